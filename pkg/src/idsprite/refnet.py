"""ReferenceNet: trunk twin that turns clean identity crops into K/V features.

The net is the same U-Net as the denoiser, built from the same
per-parameter-name init streams so every shared trunk weight starts
identical; it differs only in its single-channel stem (crops carry no
mask or inpainting channels) and in having no reference-attention
layers of its own. Crops run through it as independent batch rows, so
each crop's features never depend on what else is in the batch.

Features are recorded raw, immediately after each self-attention
residual, at every site the denoiser placement wires up; the denoiser's
reference sites normalize these tokens together with their own stream
before attending, so the cache carries no normalization of its own.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor
from .unet import DenoiserConfig, UNet


@dataclass
class ReferenceFeatureCache:
    """Per-site reference features, keyed and ordered by denoiser site id.

    Each entry is (M, Lr, C) where M is the number of crops fed to
    :func:`encode_references` (batch * refs-per-sample, flattened) and
    Lr the token count of that site's resolution.
    """

    entries: dict

    def __post_init__(self):
        for site, feats in self.entries.items():
            if feats.ndim != 3:
                raise ShapeError(f"cache entry {site} must be (M, Lr, C), got {feats.shape}")

    @property
    def sites(self) -> list:
        return list(self.entries)

    @property
    def n_crops(self) -> int:
        return next(iter(self.entries.values())).shape[0] if self.entries else 0

    def detach(self) -> "ReferenceFeatureCache":
        return ReferenceFeatureCache({s: f.detach() for s, f in self.entries.items()})


def build_reference_net(config: DenoiserConfig, seed: int = 0) -> UNet:
    """Trunk twin of the denoiser for ``config``; pass the denoiser's seed."""
    return UNet(config, seed, in_channels=1, ref_sites=[])


def encode_references(net: UNet, ref_crops, timestep=0) -> ReferenceFeatureCache:
    """Run crops through the ReferenceNet and collect site features.

    ``ref_crops`` is (M, 1, h, w); the cache keeps the flat M axis and
    consumers regroup it into (batch, refs-per-sample). ``timestep``
    conditions the trunk's time embedding; the crops themselves are
    clean (never noised).
    """
    if net.ref_site_ids:
        raise ValueError("encode_references expects a reference net, not a denoiser")
    if isinstance(ref_crops, np.ndarray):
        ref_crops = Tensor(ref_crops.astype(np.float32, copy=False))
    if ref_crops.ndim != 4 or ref_crops.shape[1] != 1:
        raise ShapeError(f"reference crops must be (M, 1, h, w), got {ref_crops.shape}")

    collected = {}

    def collector(site, layer, y, norm):
        collected[site] = y
        return y

    sites = net.config.ref_sites()
    cfg = net.config
    visit_order = ([f"enc{i}" for i in cfg.attn_levels()] + ["mid"]
                   + [f"dec{i}" for i in reversed(cfg.attn_levels())])
    last = max(sites, key=visit_order.index)
    net.forward(ref_crops, timestep, None, collector, stop_after=last)
    missing = [s for s in sites if s not in collected]
    if missing:
        raise ValueError(f"reference net never visited sites {missing}")
    return ReferenceFeatureCache({s: collected[s] for s in sites})
