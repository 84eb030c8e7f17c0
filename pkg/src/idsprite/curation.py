"""Identity-set cleaning.

Candidate images claiming the same identity are clustered by cosine k-means
over their embeddings. The largest cluster's center becomes the indicator
embedding for that identity; members outside the largest cluster, or inside
it but below a similarity threshold against the indicator, are dropped.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng
from .sprites import IdentityEmbedding, embed_identity


@dataclass(frozen=True)
class CurationConfig:
    k: int = 3
    threshold: float = 0.6
    max_kmeans_iters: int = 100
    restarts: int = 5

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not -1.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be a cosine in [-1,1], got {self.threshold}")
        if self.max_kmeans_iters < 1 or self.restarts < 1:
            raise ValueError("max_kmeans_iters and restarts must be positive")


@dataclass
class IdCluster:
    """One identity's candidate set after cleaning.

    ``kept[i]`` holds exactly when member i landed in the largest k-means
    cluster and its cosine against the indicator is at least the threshold.
    """

    claimed_id: int
    members: list  # (image ref, IdentityEmbedding) pairs
    labels: np.ndarray
    kept: np.ndarray
    indicator: np.ndarray
    largest_label: int
    cosines: np.ndarray

    @property
    def empty(self) -> bool:
        return not bool(self.kept.any())

    @property
    def kept_count(self) -> int:
        return int(self.kept.sum())


def _as_matrix(embeddings) -> np.ndarray:
    rows = []
    for e in embeddings:
        v = e.vector.data if isinstance(e, IdentityEmbedding) else np.asarray(e)
        rows.append(np.asarray(v, dtype=np.float64))
    x = np.stack(rows)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return x / norms


def _weighted_pick(rng: Rng, weights: np.ndarray) -> int:
    total = float(weights.sum())
    if total <= 0.0:
        return int(rng.integers(0, len(weights)))
    u = rng.random() * total
    return int(min(np.searchsorted(np.cumsum(weights), u), len(weights) - 1))


def _seed_centers(x: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    # k-means++: first center uniform, then proportional to squared distance
    # to the nearest chosen center (on the unit sphere, d^2 = 2 - 2 cos)
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(0, n)]
    d2 = np.maximum(2.0 - 2.0 * (x @ centers[0]), 0.0)
    for j in range(1, k):
        centers[j] = x[_weighted_pick(rng, d2)]
        d2 = np.minimum(d2, np.maximum(2.0 - 2.0 * (x @ centers[j]), 0.0))
    return centers


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iters: int) -> tuple:
    n, k = x.shape[0], centers.shape[0]
    labels = np.full(n, -1)
    for _ in range(max_iters):
        sims = x @ centers.T
        new_labels = sims.argmax(axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            mask = labels == j
            if not mask.any():
                # reseed an empty cluster from the point farthest from its center
                worst = int((2.0 - 2.0 * sims.max(axis=1)).argmax())
                centers[j] = x[worst]
                continue
            mean = x[mask].mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm == 0.0:
                worst = int((2.0 - 2.0 * sims.max(axis=1)).argmax())
                centers[j] = x[worst]
            else:
                centers[j] = mean / norm
    # final assignment so labels, centers, and inertia agree on every exit path
    sims = x @ centers.T
    labels = sims.argmax(axis=1)
    inertia = float(np.maximum(2.0 - 2.0 * sims, 0.0)[np.arange(n), labels].sum())
    return labels, centers, inertia


def kmeans(embeddings, k: int, config: CurationConfig, rng: Rng) -> tuple:
    """Cosine-space k-means, best of ``config.restarts`` seedings by inertia.

    Returns (labels, centers) with unit-length centers. Deterministic for a
    fixed rng stream.
    """
    x = _as_matrix(embeddings)
    n = x.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds the {n} available embeddings")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    best = None
    for r in range(config.restarts):
        centers = _seed_centers(x, k, rng.child("restart", r))
        labels, centers, inertia = _lloyd(x, centers.copy(), config.max_kmeans_iters)
        if best is None or inertia < best[2]:
            best = (labels, centers, inertia)
    return best[0], best[1]


def clean_cluster(members, config: CurationConfig, rng: Rng, claimed_id: int = -1) -> IdCluster:
    """Cluster one identity's members and keep only the trusted core.

    The largest cluster by count wins (ties break toward the lowest label);
    its center is the indicator embedding. A fully filtered set comes back
    with ``empty`` set, never an exception.
    """
    if len(members) < 2:
        raise ValueError(f"need at least 2 members, got {len(members)}")
    embeddings = [m[1] for m in members]
    k = min(config.k, len(members))
    labels, centers = kmeans(embeddings, k, config, rng)
    counts = np.bincount(labels, minlength=k)
    largest = int(counts.argmax())
    indicator = centers[largest]
    x = _as_matrix(embeddings)
    cosines = x @ indicator
    kept = (labels == largest) & (cosines >= config.threshold)
    return IdCluster(
        claimed_id=claimed_id,
        members=list(members),
        labels=labels,
        kept=kept,
        indicator=indicator,
        largest_label=largest,
        cosines=cosines,
    )


def _cluster_size(c) -> int:
    if isinstance(c, IdCluster):
        return c.kept_count
    if isinstance(c, (int, np.integer)):
        return int(c)
    return len(c)


def cluster_stats(clusters) -> tuple:
    """Histogram of cluster sizes plus the mean images per identity.

    Cleaned clusters count their kept members; raw member lists (or plain
    sizes) count everything, which gives the pre-cleaning statistics.
    """
    sizes = [_cluster_size(c) for c in clusters]
    hist = {}
    for s in sizes:
        hist[s] = hist.get(s, 0) + 1
    mean = float(np.mean(sizes)) if sizes else 0.0
    return hist, mean


def curate_dataset(dataset, config: CurationConfig, seed: int) -> list:
    """Run clean_cluster over every claimed identity in a sprite dataset.

    Each identity gets its own rng stream keyed by its id, so clusters can
    be processed in any order (or in parallel) without changing results.
    """
    root = Rng(seed)
    out = []
    for ident in dataset.identity_ids:
        members = []
        for idx in dataset.by_id[ident]:
            rec = dataset.records[idx]
            members.append((rec.file, embed_identity((rec.pixels, rec.bbox))))
        out.append(clean_cluster(members, config, root.child("curate", ident),
                                 claimed_id=ident))
    return out


def write_report(clusters, out_dir: str) -> tuple:
    """Write the per-image report and a stats summary; returns both paths.

    Report rows: ``image<TAB>claimed_id<TAB>label<TAB>cosine<TAB>kept``.
    Stats file is plain ``key: value`` lines.
    """
    os.makedirs(out_dir, exist_ok=True)
    report_path = os.path.join(out_dir, "curation_report.tsv")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write("image\tclaimed_id\tlabel\tcosine\tkept\n")
        for c in clusters:
            for i, (ref, _) in enumerate(c.members):
                fh.write(f"{ref}\t{c.claimed_id}\t{int(c.labels[i])}\t"
                         f"{c.cosines[i]:.6f}\t{int(c.kept[i])}\n")
    hist, mean = cluster_stats(clusters)
    kept_total = sum(c.kept_count for c in clusters)
    member_total = sum(len(c.members) for c in clusters)
    stats_path = os.path.join(out_dir, "curation_stats.txt")
    with open(stats_path, "w", encoding="utf-8") as fh:
        fh.write(f"identities: {len(clusters)}\n")
        fh.write(f"images: {member_total}\n")
        fh.write(f"kept: {kept_total}\n")
        fh.write(f"removed: {member_total - kept_total}\n")
        fh.write(f"mean_kept_per_identity: {mean:.4f}\n")
        for size in sorted(hist):
            fh.write(f"size_{size}: {hist[size]}\n")
    return report_path, stats_path
