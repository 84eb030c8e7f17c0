"""Procedural identity-sprite world: renderer, captions, embedding extractor.

An identity is 8 geometry parameters in [0,1] (head radii, eye layout,
mouth, fill shade). A render places that face on a 32x32 canvas with a
pose-seeded jitter/rotation, plus optional attribute glyphs drawn in
fixed margin bands that never intersect the face bounding box, so
attributes are visible to the detector but invisible to the identity
embedding (which only sees the bbox crop).

The embedding extractor is frozen: crop bbox, bilinear-resize to 8x8,
subtract the mean, project with a fixed seeded random matrix to 16
dims, L2-normalize. Its discriminative power therefore comes entirely
from the generator constants below; ``scripts/calibrate_sprites.py``
re-measures the intra/inter identity margin whenever they change.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng
from .tensor import Tensor, save_tnsr, load_tnsr

IMG_SIZE = 32
REF_SIZE = 16
EMBED_DIM = 16
N_SHAPE_PARAMS = 8
MAX_PROMPT_LEN = 8

NULL_TOKEN = "<null>"
ATTRIBUTES = ("hat", "glasses", "smile", "old", "young")
FILLERS = ("a", "portrait", "face", "person", "with", "plain", "of", "the")
VOCAB = (NULL_TOKEN,) + FILLERS + ATTRIBUTES
TOKEN_IDS = {tok: i for i, tok in enumerate(VOCAB)}

# Glyph bands (r0, r1, c0, c1), half-open. The face never leaves
# rows/cols [4, 28), so these stay clear of every bbox.
_GLYPH_REGIONS = {
    "hat": (0, 3, 10, 22),
    "smile": (29, 32, 10, 22),
    "glasses": (6, 14, 0, 3),
    "old": (18, 26, 0, 3),
    "young": (6, 14, 29, 32),
}

_EXTRACTOR_SEED = 7340033  # frozen; changing it redefines the embedding space


class VocabularyError(ValueError):
    """A token is outside the closed vocabulary."""


@dataclass(frozen=True)
class Identity:
    id: int
    shape_params: np.ndarray  # (8,) floats in [0,1]


@dataclass(frozen=True)
class Sprite:
    pixels: Tensor  # (1, 32, 32) grayscale in [0,1]
    identity_id: int
    attributes: frozenset
    bbox: tuple  # (r0, c0, r1, c1), half-open


@dataclass(frozen=True)
class Prompt:
    tokens: tuple

    def __post_init__(self):
        if len(self.tokens) > MAX_PROMPT_LEN:
            raise VocabularyError(f"prompt longer than {MAX_PROMPT_LEN} tokens")
        for tok in self.tokens:
            if tok not in TOKEN_IDS:
                raise VocabularyError(f"unknown token {tok!r}")


@dataclass(frozen=True)
class IdentityEmbedding:
    vector: Tensor  # (16,), unit norm
    degenerate: bool = False


def encode_prompt(prompt) -> np.ndarray:
    """Token ids padded with the null token to length 8."""
    tokens = prompt.tokens if isinstance(prompt, Prompt) else tuple(prompt)
    Prompt(tokens)  # validates vocabulary and length
    ids = np.zeros(MAX_PROMPT_LEN, dtype=np.int64)
    for i, tok in enumerate(tokens):
        ids[i] = TOKEN_IDS[tok]
    return ids


# -- geometry -----------------------------------------------------------------

def _geometry(shape_params: np.ndarray) -> dict:
    # Feature sizes are deliberately coarse: the frozen extractor sees an
    # 8x8 thumbnail, so anything much under 2px of structure is invisible.
    s = np.asarray(shape_params, dtype=np.float64)
    return {
        "rx": 6.2 + 2.2 * s[0],
        "ry": 6.2 + 2.2 * s[1],
        "eye_dx": 1.8 + 2.2 * s[2],
        "eye_dy": -(0.8 + 3.0 * s[3]),
        "eye_r": 1.0 + 1.2 * s[4],
        "mouth_w": 1.6 + 2.4 * s[5],
        "mouth_dy": 1.8 + 2.6 * s[6],
        "shade": 0.30 + 0.40 * s[7],
        "nose_w": 0.5 + 0.5 * s[0],
        "brow_drop": 0.7 + 0.8 * s[6],
        "forehead": 0.08 + 0.84 * s[3],
        "chin": 0.08 + 0.84 * s[1],
        "cheek_side": 1.0 if s[2] >= 0.5 else -1.0,
        "cheek_v": 0.08 + 0.84 * s[4],
        "eye_v": 0.70 + 0.30 * s[2],
        "eye_asym": 0.75 + 0.5 * s[6],
        "mouth_v": 0.03 + 0.35 * s[5],
    }


BACKGROUND = 0.45  # mid-gray canvas keeps the bbox-crop corners low-contrast


def make_identities(seed: int, n_ids: int) -> list:
    """Draw identities whose parameter vectors are pairwise >= 0.05 apart (L-inf)."""
    rng = Rng(seed)
    out: list[Identity] = []
    kept: list[np.ndarray] = []
    for i in range(n_ids):
        for attempt in range(10_000):
            params = rng.child("identity", i, attempt).uniform(0.0, 1.0, (N_SHAPE_PARAMS,), dtype=np.float64)
            if all(np.max(np.abs(params - q)) >= 0.05 for q in kept):
                break
        else:
            raise RuntimeError("could not place a sufficiently distinct identity")
        kept.append(params)
        out.append(Identity(id=i, shape_params=params))
    return out


def render(identity: Identity, attributes, pose_seed: int) -> Sprite:
    """Rasterize one sprite. Pose perturbs position/rotation only."""
    attrs = frozenset(attributes)
    unknown = attrs - set(ATTRIBUTES)
    if unknown:
        raise VocabularyError(f"unknown attributes {sorted(unknown)}")

    g = _geometry(identity.shape_params)
    pose = Rng(int(pose_seed)).child("pose")
    cx = 16.0 + float(pose.uniform(-1.6, 1.6))
    cy = 16.0 + float(pose.uniform(-1.6, 1.6))
    theta = float(pose.uniform(-0.04, 0.04))

    rows, cols = np.mgrid[0:IMG_SIZE, 0:IMG_SIZE].astype(np.float64)
    u, v = cols - cx, rows - cy
    ct, st = np.cos(theta), np.sin(theta)
    x = u * ct + v * st
    y = -u * st + v * ct

    def cover(signed_dist):
        # ~1px anti-aliased edge
        return np.clip(signed_dist + 0.5, 0.0, 1.0)

    img = np.full((IMG_SIZE, IMG_SIZE), BACKGROUND, dtype=np.float64)

    q = np.sqrt((x / g["rx"]) ** 2 + (y / g["ry"]) ** 2)
    head = cover((1.0 - q) * min(g["rx"], g["ry"]))
    img = img * (1 - head) + g["shade"] * head

    def paint(alpha, value):
        # marks only exist on the head, so they can never leave the bbox
        nonlocal img
        a = alpha * head
        img = img * (1 - a) + value * a

    brow_top = g["eye_dy"] - g["eye_r"] - g["brow_drop"] - 0.6
    paint(cover((brow_top - 1.0 - y) / 2.5), g["forehead"])
    paint(cover((y - (g["mouth_dy"] + 1.6)) / 2.5), g["chin"])

    cheek_x = x - g["cheek_side"] * (g["eye_dx"] + 1.2)
    paint(cover(2.2 - np.hypot(cheek_x, y - 1.2)), g["cheek_v"])

    for sign in (-1.0, 1.0):
        ex, ey = x - sign * g["eye_dx"], y - g["eye_dy"]
        radius = g["eye_r"] * (g["eye_asym"] if sign < 0 else 1.0)
        paint(cover(radius - np.hypot(ex, ey)), g["eye_v"])
        brow_y = g["eye_dy"] - g["eye_r"] - g["brow_drop"]
        d_brow = np.minimum(g["eye_r"] + 0.6 - np.abs(ex), 0.6 - np.abs(y - brow_y))
        paint(cover(d_brow), 0.10)

    d_nose = np.minimum(g["nose_w"] - np.abs(x),
                        np.minimum(y - (g["eye_dy"] + 1.2), 1.2 - y))
    paint(cover(d_nose), 0.12)

    d_mouth = np.minimum(g["mouth_w"] - np.abs(x), 0.9 - np.abs(y - g["mouth_dy"]))
    paint(cover(d_mouth), g["mouth_v"])

    for attr in attrs:
        r0, r1, c0, c1 = _GLYPH_REGIONS[attr]
        img[r0:r1, c0:c1] = 1.0

    half_w = np.hypot(g["rx"] * ct, g["ry"] * st)
    half_h = np.hypot(g["rx"] * st, g["ry"] * ct)
    r0 = max(0, int(np.floor(cy - half_h - 0.5)))
    r1 = min(IMG_SIZE, int(np.ceil(cy + half_h + 0.5)))
    c0 = max(0, int(np.floor(cx - half_w - 0.5)))
    c1 = min(IMG_SIZE, int(np.ceil(cx + half_w + 0.5)))

    pixels = Tensor(img[None, :, :].astype(np.float32))
    return Sprite(pixels=pixels, identity_id=identity.id, attributes=attrs, bbox=(r0, c0, r1, c1))


def extract_attributes(pixels) -> frozenset:
    """Rule-based detector: a glyph band counts as present if its mean is >= 0.5."""
    arr = pixels.data if isinstance(pixels, Tensor) else np.asarray(pixels)
    img = arr.reshape(IMG_SIZE, IMG_SIZE)
    found = [a for a, (r0, r1, c0, c1) in _GLYPH_REGIONS.items()
             if float(img[r0:r1, c0:c1].mean()) >= 0.5]
    return frozenset(found)


# -- embedding ----------------------------------------------------------------

def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample (align_corners=False convention), float64 math."""
    h, w = img.shape
    img = img.astype(np.float64)
    ri = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    ci = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    r0 = np.clip(np.floor(ri).astype(int), 0, h - 1)
    c0 = np.clip(np.floor(ci).astype(int), 0, w - 1)
    r1 = np.clip(r0 + 1, 0, h - 1)
    c1 = np.clip(c0 + 1, 0, w - 1)
    fr = np.clip(ri - r0, 0.0, 1.0)[:, None]
    fc = np.clip(ci - c0, 0.0, 1.0)[None, :]
    top = img[np.ix_(r0, c0)] * (1 - fc) + img[np.ix_(r0, c1)] * fc
    bot = img[np.ix_(r1, c0)] * (1 - fc) + img[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bot * fr


def crop_face(sprite_pixels, bbox, out_size: int = REF_SIZE) -> np.ndarray:
    """Bbox crop resized to a square; shared by the extractor and ref-crop prep."""
    arr = sprite_pixels.data if isinstance(sprite_pixels, Tensor) else np.asarray(sprite_pixels)
    img = arr.reshape(arr.shape[-2], arr.shape[-1])
    r0, c0, r1, c1 = bbox
    if not (0 <= r0 < r1 <= img.shape[0] and 0 <= c0 < c1 <= img.shape[1]):
        raise ValueError(f"bbox {bbox} out of bounds for {img.shape}")
    return resize_bilinear(img[r0:r1, c0:c1], out_size, out_size).astype(np.float32)


_PROJECTION = Rng(_EXTRACTOR_SEED).child("extractor").normal((EMBED_DIM, 64), dtype=np.float64)


def embed_identity(sprite) -> IdentityEmbedding:
    """Fixed extractor: bbox crop -> 8x8 -> mean-subtract -> random projection -> L2."""
    if isinstance(sprite, Sprite):
        pixels, bbox = sprite.pixels, sprite.bbox
    else:
        pixels, bbox = sprite
    patch = crop_face(pixels, bbox, out_size=8).astype(np.float64)
    if float(patch.max() - patch.min()) == 0.0:
        e1 = np.zeros(EMBED_DIM, dtype=np.float32)
        e1[0] = 1.0
        return IdentityEmbedding(vector=Tensor(e1), degenerate=True)
    flat = (patch - patch.mean()).reshape(64)
    vec = _PROJECTION @ flat
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        e1 = np.zeros(EMBED_DIM, dtype=np.float32)
        e1[0] = 1.0
        return IdentityEmbedding(vector=Tensor(e1), degenerate=True)
    return IdentityEmbedding(vector=Tensor((vec / norm).astype(np.float32)), degenerate=False)


def cosine(a, b) -> float:
    va = a.vector.data if isinstance(a, IdentityEmbedding) else np.asarray(a, dtype=np.float64)
    vb = b.vector.data if isinstance(b, IdentityEmbedding) else np.asarray(b, dtype=np.float64)
    va = np.asarray(va, dtype=np.float64)
    vb = np.asarray(vb, dtype=np.float64)
    denom = np.linalg.norm(va) * np.linalg.norm(vb)
    return float(va @ vb / denom) if denom else 0.0


# -- dataset ------------------------------------------------------------------

def _caption_tokens(attrs: frozenset, rng: Rng) -> tuple:
    head = ("a", ("portrait", "face", "person")[rng.integers(0, 3)])
    if attrs:
        ordered = tuple(a for a in ATTRIBUTES if a in attrs)
        return head + ("with",) + ordered
    return head + ("plain",)


def make_dataset(n_ids: int, imgs_per_id: int, seed: int, out_dir: str) -> str:
    """Write sprites as TNSR files plus a manifest; returns the manifest path."""
    if n_ids < 2 or imgs_per_id < 2:
        raise ValueError("need n_ids >= 2 and imgs_per_id >= 2")
    os.makedirs(out_dir, exist_ok=True)
    identities = make_identities(seed, n_ids)
    root = Rng(seed)
    lines = []
    for ident in identities:
        for j in range(imgs_per_id):
            draw = root.child("image", ident.id, j)
            attrs = frozenset(a for k, a in enumerate(ATTRIBUTES)
                              if draw.child("attr", k).random() < 0.2)
            pose_seed = draw.child("poseseed").integers(0, 2**62)
            sprite = render(ident, attrs, pose_seed)
            caption = _caption_tokens(attrs, draw.child("caption"))
            fname = f"sprite_{ident.id:04d}_{j:03d}.tnsr"
            save_tnsr(os.path.join(out_dir, fname), sprite.pixels)
            r0, c0, r1, c1 = sprite.bbox
            lines.append("\t".join([
                str(ident.id),
                fname,
                f"{r0},{c0},{r1},{c1}",
                ",".join(a for a in ATTRIBUTES if a in attrs),
                " ".join(caption),
            ]))
    manifest = os.path.join(out_dir, "manifest.tsv")
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


@dataclass
class DatasetRecord:
    identity_id: int
    file: str
    bbox: tuple
    attributes: frozenset
    caption: tuple
    pixels: np.ndarray  # (1, 32, 32) float32


@dataclass
class SpriteDataset:
    root: str
    records: list
    by_id: dict = field(default_factory=dict)

    def __post_init__(self):
        for i, rec in enumerate(self.records):
            self.by_id.setdefault(rec.identity_id, []).append(i)

    @property
    def identity_ids(self):
        return sorted(self.by_id)

    def sprite(self, idx: int) -> Sprite:
        rec = self.records[idx]
        return Sprite(pixels=Tensor(rec.pixels), identity_id=rec.identity_id,
                      attributes=rec.attributes, bbox=rec.bbox)


def load_dataset(root: str) -> SpriteDataset:
    manifest = os.path.join(root, "manifest.tsv")
    records = []
    with open(manifest, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            ident, fname, bbox_s, attrs_s, caption_s = line.split("\t")
            pixels = load_tnsr(os.path.join(root, fname)).data.reshape(1, IMG_SIZE, IMG_SIZE)
            records.append(DatasetRecord(
                identity_id=int(ident),
                file=fname,
                bbox=tuple(int(v) for v in bbox_s.split(",")),
                attributes=frozenset(a for a in attrs_s.split(",") if a),
                caption=tuple(caption_s.split(" ")) if caption_s else (),
                pixels=pixels,
            ))
    return SpriteDataset(root=root, records=records)
