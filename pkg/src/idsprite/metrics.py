"""Evaluation harness: identity similarities, paste score, prompt adherence,
Frechet distance between embedding sets, and benchmark/sweep drivers."""

import os
from dataclasses import dataclass

import numpy as np

from .diffusion import GuidanceWeights, NoiseSchedule, ddim_sample
from .refnet import encode_references
from .rng import Rng
from .sprites import (
    ATTRIBUTES,
    IdentityEmbedding,
    Prompt,
    SpriteDataset,
    cosine,
    crop_face,
    embed_identity,
    extract_attributes,
)
from .tensor import Tensor, matrix_sqrt_psd
from .unet import make_position_mask


@dataclass(frozen=True)
class MetricsReport:
    sim_ref: float
    sim_target: float
    paste: float
    adherence: float
    fid: float
    weights: GuidanceWeights
    n_refs: int
    placement: str

    def __post_init__(self):
        if self.paste != self.sim_ref - self.sim_target:
            raise ValueError("paste must equal sim_ref - sim_target exactly")


@dataclass(frozen=True)
class BenchmarkRow:
    identity_id: int
    ref_indices: tuple
    target_index: int


@dataclass
class BenchmarkSpec:
    """Held-out identities, each contributing fixed references and a target.

    References and the target are distinct images of the same identity.
    """

    dataset: SpriteDataset
    rows: list
    n_refs: int = 4

    def __post_init__(self):
        for row in self.rows:
            if row.target_index in row.ref_indices:
                raise ValueError(f"id {row.identity_id}: target used as reference")


def _holdout_ids(dataset, holdout_frac: float) -> list:
    ids = dataset.identity_ids
    n_hold = max(1, int(round(len(ids) * holdout_frac)))
    if n_hold >= len(ids):
        raise ValueError("holdout fraction leaves no training identities")
    return ids[-n_hold:]


def train_split(dataset, holdout_frac: float = 0.2) -> SpriteDataset:
    """Dataset restricted to the identities not held out for the benchmark."""
    held = set(_holdout_ids(dataset, holdout_frac))
    records = [r for r in dataset.records if r.identity_id not in held]
    return SpriteDataset(root=dataset.root, records=records)


def build_benchmark(dataset, holdout_frac: float = 0.2, n_refs: int = 4) -> BenchmarkSpec:
    """One row per held-out identity: its first ``n_refs`` images as
    references and the next image as the target."""
    if not 1 <= n_refs:
        raise ValueError(f"n_refs must be >= 1, got {n_refs}")
    rows = []
    for ident in _holdout_ids(dataset, holdout_frac):
        idxs = dataset.by_id[ident]
        if len(idxs) < n_refs + 1:
            raise ValueError(f"id {ident} has {len(idxs)} images, needs {n_refs + 1}")
        rows.append(BenchmarkRow(ident, tuple(idxs[:n_refs]), idxs[n_refs]))
    return BenchmarkSpec(dataset=dataset, rows=rows, n_refs=n_refs)


def identity_sims(generated, refs, target) -> tuple:
    """(sim_ref, sim_target): max cosine over references, cosine to target."""
    if not refs:
        raise ValueError("need at least one reference")
    g = embed_identity(generated)
    sim_ref = max(cosine(g, embed_identity(r)) for r in refs)
    sim_target = cosine(g, embed_identity(target))
    return sim_ref, sim_target


def adherence(generated, prompt) -> float:
    """Fraction of the prompt's attribute tokens detected in the image.

    Filler tokens are ignored; a prompt with no attribute tokens scores 1.
    """
    pixels = generated.pixels if hasattr(generated, "pixels") else generated
    tokens = prompt.tokens if isinstance(prompt, Prompt) else tuple(prompt)
    wanted = [t for t in tokens if t in ATTRIBUTES]
    if not wanted:
        return 1.0
    found = extract_attributes(pixels)
    return sum(t in found for t in wanted) / len(wanted)


def _embedding_matrix(items) -> np.ndarray:
    rows = []
    for e in items:
        v = e.vector.data if isinstance(e, IdentityEmbedding) else e
        rows.append(np.asarray(v.data if isinstance(v, Tensor) else v, np.float64))
    x = np.stack(rows)
    if x.ndim == 1:
        x = x[:, None]
    return x


def fid(set_a, set_b) -> float:
    """Frechet distance between the Gaussian fits of two embedding sets.

    ``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 sqrt(S_a S_b))`` with the product
    symmetrized before the matrix square root and sets smaller than the
    dimension regularized by 1e-6 on the covariance diagonal.
    """
    a, b = _embedding_matrix(set_a), _embedding_matrix(set_b)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("each set needs at least 2 samples")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    d = a.shape[1]

    def moments(x):
        mu = x.mean(axis=0)
        xc = x - mu
        cov = xc.T @ xc / (x.shape[0] - 1)
        if x.shape[0] <= d:
            cov = cov + 1e-6 * np.eye(d)
        return mu, cov

    mu_a, cov_a = moments(a)
    mu_b, cov_b = moments(b)
    prod = cov_a @ cov_b
    sym = (prod + prod.T) / 2.0
    # the symmetrized product of two covariances is indefinite whenever they
    # fail to commute (badly so for small rank-deficient sets); its negative
    # modes carry no Frechet mass, so clamp rather than reject
    root = matrix_sqrt_psd(sym, neg_tol=float("inf")).data
    val = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a + cov_b - 2.0 * root))
    return max(val, 0.0)


def _row_sample(denoiser, refnet, dataset, row, n_refs, w, schedule, steps, seed,
                ref_timestep):
    target = dataset.records[row.target_index]
    ref_recs = [dataset.records[i] for i in row.ref_indices[:n_refs]]
    crops = Tensor(np.stack([crop_face(r.pixels, r.bbox)[None] for r in ref_recs]))
    if ref_timestep == "same":
        def cache(t, _crops=crops):
            return encode_references(refnet, _crops, np.full(len(ref_recs), t))
    else:
        cache = encode_references(refnet, crops, 0)
    mask = None
    if denoiser.config.use_position_mask or denoiser.config.inpainting:
        mask = make_position_mask([target.bbox], target.pixels.shape[-1])
    masked_latent = None
    if denoiser.config.inpainting:
        masked_latent = Tensor(target.pixels[None] * (1.0 - mask.data))
    img = ddim_sample(denoiser, schedule, (1, 1) + target.pixels.shape[-2:],
                      target.caption, cache, w, seed=seed, steps=steps,
                      position_mask=mask, masked_latent=masked_latent)
    return img, target, ref_recs


def run_benchmark(denoiser, refnet, benchmark: BenchmarkSpec, w: GuidanceWeights,
                  n_refs: int | None = None, steps: int = 50, seed: int = 0,
                  ref_timestep: str = "same", csv_path: str | None = None) -> MetricsReport:
    """Sample one image per benchmark row and aggregate the metrics.

    Each row uses the target's caption plus its first ``n_refs`` references;
    FID compares generated embeddings against target embeddings. Per-row
    results stream to ``csv_path`` when given.
    """
    n = benchmark.n_refs if n_refs is None else n_refs
    if not 1 <= n <= benchmark.n_refs:
        raise ValueError(f"n_refs must lie in [1, {benchmark.n_refs}], got {n}")
    schedule = NoiseSchedule()
    root = Rng(seed)
    per_row = []
    gen_embs, tgt_embs = [], []
    for ri, row in enumerate(benchmark.rows):
        row_seed = root.child("row", ri).integers(0, 2**62)
        try:
            img, target, ref_recs = _row_sample(
                denoiser, refnet, benchmark.dataset, row, n, w, schedule, steps,
                row_seed, ref_timestep)
        except Exception as e:
            raise type(e)(f"benchmark row {ri} (id {row.identity_id}): {e}") from e
        gen = (img.data[0], target.bbox)
        sim_ref, sim_target = identity_sims(
            gen, [(r.pixels, r.bbox) for r in ref_recs], (target.pixels, target.bbox))
        adh = adherence(Tensor(img.data[0]), target.caption)
        per_row.append((ri, sim_ref, sim_target, sim_ref - sim_target, adh))
        gen_embs.append(embed_identity(gen))
        tgt_embs.append(embed_identity((target.pixels, target.bbox)))
    if csv_path:
        _write_csv(csv_path, "row,sim_ref,sim_target,paste,adherence",
                   ((f"{ri},{sr:.6f},{st:.6f},{p:.6f},{ad:.6f}")
                    for ri, sr, st, p, ad in per_row))
    sim_ref = float(np.mean([r[1] for r in per_row]))
    sim_target = float(np.mean([r[2] for r in per_row]))
    return MetricsReport(
        sim_ref=sim_ref,
        sim_target=sim_target,
        paste=sim_ref - sim_target,
        adherence=float(np.mean([r[4] for r in per_row])),
        fid=fid(gen_embs, tgt_embs),
        weights=w,
        n_refs=n,
        placement=denoiser.config.refattn.placement,
    )


def strength_sweep(denoiser, refnet, benchmark: BenchmarkSpec, feat_grid, ref_grid,
                   lambda_text: float = 7.5, steps: int = 50, seed: int = 0,
                   ref_timestep: str = "same", csv_path: str | None = None) -> list:
    """Benchmark at every (lambda_feat, lambda_ref) grid point.

    Returns [(lambda_feat, lambda_ref, MetricsReport), ...] in row-major grid
    order and optionally writes the sweep CSV.
    """
    feat_grid = [float(f) for f in feat_grid]
    ref_grid = [float(r) for r in ref_grid]
    if not feat_grid or not ref_grid:
        raise ValueError("grids must be nonempty")
    if any(not 0.0 <= f <= 1.0 for f in feat_grid):
        raise ValueError(f"lambda_feat grid must lie in [0,1], got {feat_grid}")
    if any(not 0.0 <= r <= 4.0 for r in ref_grid):
        raise ValueError(f"lambda_ref grid must lie in [0,4], got {ref_grid}")
    out = []
    for f in feat_grid:
        for r in ref_grid:
            w = GuidanceWeights(lambda_feat=f, lambda_text=lambda_text, lambda_ref=r)
            report = run_benchmark(denoiser, refnet, benchmark, w, steps=steps,
                                   seed=seed, ref_timestep=ref_timestep)
            out.append((f, r, report))
    if csv_path:
        _write_csv(csv_path, "lambda_feat,lambda_ref,sim_target,paste,adherence,fid",
                   ((f"{f},{r},{rep.sim_target:.6f},{rep.paste:.6f},"
                     f"{rep.adherence:.6f},{rep.fid:.6f}") for f, r, rep in out))
    return out


def _write_csv(path: str, header: str, lines) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for line in lines:
            fh.write(line + "\n")
