"""Self-, cross- and reference-attention.

One ``AttentionLayer`` owns four square projections and serves every
role: self-attention (kv = queries), text cross-attention (kv = text
embedding), and the reference branch (kv = queries concatenated with
cached reference features). The self and reference branches of a
reference-attention site share the same layer weights, evaluated with
different K/V.

``reference_attend`` computes the residual update

    y + (1 - lf) * Attn(y, y) + lf * Attn(y, cat[y, r_1 .. r_N])

and skips whichever branch carries an exactly-zero weight, so the
lf = 0 / lf = 1 endpoints (and the empty-reference case) reproduce the
single-branch results bit-for-bit rather than merely approximately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .tensor import ShapeError, Tensor, concat, matmul, softmax

PLACEMENTS = ("encoder", "decoder", "both")


@dataclass
class AttentionLayer:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_out: Tensor
    heads: int = 1
    layer_id: str = ""

    def __post_init__(self):
        c = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_out"):
            w = getattr(self, name)
            if w.shape != (c, c):
                raise ShapeError(f"{name} must be {c}x{c}, got {w.shape}")
        if c % self.heads:
            raise ShapeError(f"heads={self.heads} does not divide channels={c}")

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def create(cls, channels: int, rng: Rng, heads: int = 1, layer_id: str = "") -> "AttentionLayer":
        scale = 1.0 / math.sqrt(channels)
        def init(tag, out_scale=1.0):
            data = rng.child(tag).normal((channels, channels)) * (scale * out_scale)
            return Tensor(data.astype(np.float32), requires_grad=True)
        # damped output projection: keeps the residual stream tame at init
        return cls(w_q=init("q"), w_k=init("k"), w_v=init("v"), w_out=init("out", 0.2),
                   heads=heads, layer_id=layer_id)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.{n}": getattr(self, n) for n in ("w_q", "w_k", "w_v", "w_out")}


@dataclass
class RefAttnConfig:
    placement: str = "decoder"  # middle blocks carry reference attention regardless
    lambda_feat: float = 0.85

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        if not 0.0 <= self.lambda_feat <= 1.0:
            raise ValueError(f"lambda_feat must lie in [0,1], got {self.lambda_feat}")


def attend(layer: AttentionLayer, q_src: Tensor, kv_src: Tensor) -> Tensor:
    """softmax(Q Kt / sqrt(d)) V through w_out; no residual."""
    if q_src.ndim != 3 or kv_src.ndim != 3:
        raise ShapeError(f"attend expects (B, L, C) operands, got {q_src.shape}, {kv_src.shape}")
    c = layer.channels
    if q_src.shape[-1] != c or kv_src.shape[-1] != c:
        raise ShapeError(f"channel mismatch: layer C={c}, q {q_src.shape}, kv {kv_src.shape}")
    h = layer.heads
    ch = c // h
    bq, lq, _ = q_src.shape
    bk, lk, _ = kv_src.shape

    q = matmul(q_src, layer.w_q).reshape(bq, lq, h, ch).permute(0, 2, 1, 3)
    k = matmul(kv_src, layer.w_k).reshape(bk, lk, h, ch).permute(0, 2, 1, 3)
    v = matmul(kv_src, layer.w_v).reshape(bk, lk, h, ch).permute(0, 2, 1, 3)

    scores = matmul(q, k.swapaxes(2, 3)) * (1.0 / math.sqrt(ch))
    weights = softmax(scores, axis=-1)
    mixed = matmul(weights, v).permute(0, 2, 1, 3).reshape(bq, lq, c)
    return matmul(mixed, layer.w_out)


def _normalize_refs(refs, batch: int, channels: int):
    """Validate refs: a stacked (B, N*Lr, C) Tensor passes through, a list
    (one entry per sample) of (Lr, C) feature maps becomes one concatenated
    Tensor per sample, and no refs at all becomes [None] * batch."""
    if refs is None:
        return [None] * batch
    if isinstance(refs, Tensor):
        if refs.ndim != 3 or refs.shape[0] != batch:
            raise ShapeError(f"stacked refs must be (B, L, C) with B={batch}, got {refs.shape}")
        if refs.shape[-1] != channels:
            raise ShapeError(f"refs channel mismatch: {refs.shape[-1]} vs {channels}")
        if refs.shape[1] == 0:
            return [None] * batch
        return refs
    if len(refs) != batch:
        raise ShapeError(f"need one reference list per sample: got {len(refs)} for batch {batch}")
    out = []
    for sample in refs:
        maps = list(sample)
        for m in maps:
            if m.ndim != 2 or m.shape[-1] != channels:
                raise ShapeError(f"reference map must be (Lr, {channels}), got {m.shape}")
        out.append(concat(maps, axis=0) if maps else None)
    return out


def _no_refs(per_sample) -> bool:
    return isinstance(per_sample, list) and all(r is None for r in per_sample)


def _ref_branch(layer: AttentionLayer, y_g: Tensor, per_sample) -> Tensor:
    """Attn(y, cat[y, refs]) for normalized refs (stacked Tensor or list)."""
    b, _, c = y_g.shape
    if isinstance(per_sample, Tensor):
        return attend(layer, y_g, concat([y_g, per_sample], axis=1))
    lengths = {None if r is None else r.shape[0] for r in per_sample}
    if len(lengths) == 1 and None not in lengths:
        stacked = concat([r.reshape(1, r.shape[0], c) for r in per_sample], axis=0)
        return attend(layer, y_g, concat([y_g, stacked], axis=1))
    rows = []
    for i, r in enumerate(per_sample):
        yi = y_g.narrow(0, i, 1)
        kv = yi if r is None else concat([yi, r.reshape(1, r.shape[0], c)], axis=1)
        rows.append(attend(layer, yi, kv))
    return concat(rows, axis=0)


def reference_attend(layer: AttentionLayer, y_g: Tensor, refs, lambda_feat: float,
                     residual: Tensor | None = None) -> Tensor:
    """Residual reference attention with strength re-weighting.

    ``refs`` is either a list (length B) of per-sample lists of (Lr, C)
    feature maps, or an already-stacked (B, N*Lr, C) Tensor. The K/V
    sequence length of the reference branch is L + N*Lr. With no
    references at all the concatenated branch equals the self branch,
    so the update collapses to y + Attn(y, y) exactly.

    ``residual`` overrides the stream the update is added to (default
    ``y_g``); callers that attend over normalized tokens pass the raw
    stream here so the residual path stays untouched.
    """
    if not 0.0 <= lambda_feat <= 1.0:
        raise ValueError(f"lambda_feat must lie in [0,1], got {lambda_feat}")
    base = y_g if residual is None else residual
    per_sample = _normalize_refs(refs, y_g.shape[0], y_g.shape[-1])
    if _no_refs(per_sample) or lambda_feat == 0.0:
        return base + attend(layer, y_g, y_g)
    a_ref = _ref_branch(layer, y_g, per_sample)
    if lambda_feat == 1.0:
        return base + a_ref
    a_self = attend(layer, y_g, y_g)
    return base + (1.0 - lambda_feat) * a_self + lambda_feat * a_ref


def mixed_identity_attend(layer: AttentionLayer, y_g: Tensor, refs_id1, refs_id2,
                          lambda_id1: float) -> Tensor:
    """Convex mix of two single-identity reference branches (no residual).

    Endpoints skip the zero-weighted branch, so lambda_id1 in {0, 1}
    reproduces the corresponding unmixed branch bit-exactly.
    """
    if not 0.0 <= lambda_id1 <= 1.0:
        raise ValueError(f"lambda_id1 must lie in [0,1], got {lambda_id1}")
    b, _, c = y_g.shape

    def branch(refs, tag):
        per = _normalize_refs(refs, b, c)
        if _no_refs(per):
            raise ValueError(f"empty reference list for {tag}")
        return lambda: _ref_branch(layer, y_g, per)

    b1, b2 = branch(refs_id1, "id1"), branch(refs_id2, "id2")
    if lambda_id1 == 1.0:
        return b1()
    if lambda_id1 == 0.0:
        return b2()
    return lambda_id1 * b1() + (1.0 - lambda_id1) * b2()
