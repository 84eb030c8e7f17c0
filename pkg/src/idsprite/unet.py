"""Denoising U-Net, ReferenceNet twin, text encoder, and checkpoints.

Layout for the default config (base 16, two levels, 32x32 input):

    stem 3x3 -> light block @32 (cross-attn)
      -> pool + conv @16 -> res block + attn stack [enc1]
        -> pool + conv @8 -> res + attn stack [mid] + res
      <- upsample + conv, skip concat, res block + attn stack [dec1]
    <- upsample + conv, skip concat, light block (cross-attn) -> zero-init head

An "attn stack" is self-attention, then (when the site is wired for it)
reference attention sharing one layer for its self and concatenated
branches, then text cross-attention. Reference sites follow the
placement config; the middle site is always wired. The ReferenceNet is
the same trunk built from the same per-parameter init streams (so
shared names get identical weights) minus the reference layers; it
collects features right after each self-attention residual, which is
exactly the material the denoiser's reference branches consume.

Every parameter draws from ``rng.child(name)``, so adding or removing
layers never shifts another layer's initialization.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionLayer, RefAttnConfig, attend, mixed_identity_attend, reference_attend
from .rng import Rng
from .sprites import MAX_PROMPT_LEN, VOCAB
from .tensor import (
    ShapeError,
    Tensor,
    avg_pool2d,
    concat,
    conv2d,
    gather_rows,
    layer_norm,
    linear,
    load_tnsr,
    matmul,
    save_tnsr,
    silu,
    upsample2x,
)


@dataclass
class DenoiserConfig:
    base_channels: int = 16
    levels: int = 2
    refattn: RefAttnConfig = field(default_factory=RefAttnConfig)
    inpainting: bool = False
    use_position_mask: bool = True
    heads: int = 1
    img_size: int = 32
    text_dim: int = 16
    temb_dim: int = 64

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("need at least one down/up level")
        if self.img_size % (1 << self.levels):
            raise ValueError(f"img_size {self.img_size} not divisible by 2^{self.levels}")

    @property
    def in_channels(self) -> int:
        return 1 + int(self.inpainting) + int(self.use_position_mask)

    def level_channels(self, i: int) -> int:
        return self.base_channels * (1 << i)

    def attn_levels(self) -> list:
        # attention only below 32x32 resolution
        return [i for i in range(self.levels) if self.img_size >> i <= 16]

    def ref_sites(self) -> list:
        """Reference-attention site ids for this placement; middle always wired."""
        sites = []
        if self.refattn.placement in ("encoder", "both"):
            sites += [f"enc{i}" for i in self.attn_levels()]
        sites.append("mid")
        if self.refattn.placement in ("decoder", "both"):
            sites += [f"dec{i}" for i in self.attn_levels()]
        return sites


# -- parameter helpers ---------------------------------------------------------

class _Registry:
    """Flat name -> Tensor map; every module below registers through this."""

    def __init__(self, rng: Rng):
        self.rng = rng
        self.tensors: dict[str, Tensor] = {}

    def param(self, name: str, shape, scale: float | None = None, zero: bool = False) -> Tensor:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter {name}")
        if zero:
            data = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
            sigma = scale if scale is not None else math.sqrt(2.0 / fan_in)
            data = (self.rng.child(name).normal(shape, dtype=np.float64) * sigma).astype(np.float32)
        t = Tensor(data, requires_grad=True)
        self.tensors[name] = t
        return t


class _Conv:
    def __init__(self, reg: _Registry, name: str, cin: int, cout: int, k: int = 3, zero: bool = False):
        self.w = reg.param(f"{name}.w", (cout, cin, k, k), zero=zero)
        self.b = reg.param(f"{name}.b", (cout,), zero=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b)


class _Linear:
    def __init__(self, reg: _Registry, name: str, cin: int, cout: int, bias: bool = True,
                 scale: float | None = None):
        self.w = reg.param(f"{name}.w", (cin, cout), scale=scale)
        self.b = reg.param(f"{name}.b", (cout,), zero=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)


class _Norm:
    """Layer norm over the channel axis; works on NCHW (axis 1) or BLC (axis -1)."""

    def __init__(self, reg: _Registry, name: str, channels: int, axis: int):
        shape = (1, channels, 1, 1) if axis == 1 else (channels,)
        self.gamma = reg.param(f"{name}.g", shape, zero=True)
        self.gamma.data += 1.0
        self.beta = reg.param(f"{name}.b", shape, zero=True)
        self.axis = axis

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, axis=self.axis)


class _ResBlock:
    def __init__(self, reg: _Registry, name: str, cin: int, cout: int, temb_dim: int):
        self.norm1 = _Norm(reg, f"{name}.n1", cin, axis=1)
        self.conv1 = _Conv(reg, f"{name}.c1", cin, cout)
        self.temb = _Linear(reg, f"{name}.t", temb_dim, cout)
        self.norm2 = _Norm(reg, f"{name}.n2", cout, axis=1)
        self.conv2 = _Conv(reg, f"{name}.c2", cout, cout)
        self.skip = _Conv(reg, f"{name}.s", cin, cout, k=1) if cin != cout else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(silu(self.norm1(x)))
        h = h + self.temb(silu(temb)).reshape(temb.shape[0], -1, 1, 1)
        h = self.conv2(silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip else x)


class _LightBlock:
    """Cheaper 32x32-resolution block: one conv, still time-conditioned."""

    def __init__(self, reg: _Registry, name: str, cin: int, cout: int, temb_dim: int):
        self.norm = _Norm(reg, f"{name}.n", cin, axis=1)
        self.conv = _Conv(reg, f"{name}.c", cin, cout)
        self.temb = _Linear(reg, f"{name}.t", temb_dim, cout)
        self.skip = _Conv(reg, f"{name}.s", cin, cout, k=1) if cin != cout else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv(silu(self.norm(x)))
        h = h + self.temb(silu(temb)).reshape(temb.shape[0], -1, 1, 1)
        return h + (self.skip(x) if self.skip else x)


class _AttnStack:
    """Self-attention (+optional reference site) + text cross-attention on BLC tokens."""

    def __init__(self, reg: _Registry, name: str, channels: int, heads: int, text_dim: int,
                 with_ref: bool, site_id: str):
        rng = reg.rng
        self.site_id = site_id
        self.norm_self = _Norm(reg, f"{name}.ns", channels, axis=-1)
        self.self_attn = AttentionLayer.create(channels, rng.child(f"{name}.self"), heads=heads,
                                               layer_id=f"{site_id}.self")
        for k, v in self.self_attn.params(f"{name}.self").items():
            reg.tensors[k] = v
        self.ref_attn = None
        self.norm_ref = None
        if with_ref:
            # drawn from the self-attention init stream on purpose: the branch
            # starts as a copy of self-attention, so reference tokens compete
            # for mass on equal terms from step one. A fresh random layer gets
            # its attention routed away before its values become useful.
            self.ref_attn = AttentionLayer.create(channels, rng.child(f"{name}.self"),
                                                  heads=heads, layer_id=site_id)
            for k, v in self.ref_attn.params(f"{name}.ref").items():
                reg.tensors[k] = v
            # one norm serves both streams: queries and cached reference tokens
            # must land in the same coordinate system or their score scales drift
            self.norm_ref = _Norm(reg, f"{name}.ref.n", channels, axis=-1)
        self.norm_cross = _Norm(reg, f"{name}.nc", channels, axis=-1)
        self.cross_attn = AttentionLayer.create(channels, rng.child(f"{name}.cross"), heads=heads,
                                                layer_id=f"{site_id}.cross")
        for k, v in self.cross_attn.params(f"{name}.cross").items():
            reg.tensors[k] = v
        self.text_proj = _Linear(reg, f"{name}.tp", text_dim, channels, bias=False)

    def __call__(self, x: Tensor, text_kv: Tensor | None, ref_handler) -> Tensor:
        b, c, h, w = x.shape
        y = x.permute(0, 2, 3, 1).reshape(b, h * w, c)
        ns = self.norm_self(y)
        y = y + attend(self.self_attn, ns, ns)
        if ref_handler is not None:
            y = ref_handler(self.site_id, self.ref_attn, y, self.norm_ref)
        if text_kv is not None:
            y = y + attend(self.cross_attn, self.norm_cross(y), self.text_proj(text_kv))
        return y.reshape(b, h, w, c).permute(0, 3, 1, 2)


class _CrossOnly:
    """Text cross-attention for full-resolution blocks (no self-attention)."""

    def __init__(self, reg: _Registry, name: str, channels: int, heads: int, text_dim: int):
        self.norm = _Norm(reg, f"{name}.nc", channels, axis=-1)
        self.attn = AttentionLayer.create(channels, reg.rng.child(f"{name}.cross"), heads=heads,
                                          layer_id=f"{name}.cross")
        for k, v in self.attn.params(f"{name}.cross").items():
            reg.tensors[k] = v
        self.text_proj = _Linear(reg, f"{name}.tp", text_dim, channels, bias=False)

    def __call__(self, x: Tensor, text_kv: Tensor | None) -> Tensor:
        if text_kv is None:
            return x
        b, c, h, w = x.shape
        y = x.permute(0, 2, 3, 1).reshape(b, h * w, c)
        y = y + attend(self.attn, self.norm(y), self.text_proj(text_kv))
        return y.reshape(b, h, w, c).permute(0, 3, 1, 2)


class TextEncoder:
    """Token-id sequences to (B, 8, text_dim); the null token embeds to zeros."""

    def __init__(self, reg: _Registry, text_dim: int):
        self.table = reg.param("text.table", (len(VOCAB) - 1, text_dim),
                               scale=1.0 / math.sqrt(text_dim))
        self.text_dim = text_dim

    def __call__(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] != MAX_PROMPT_LEN:
            raise ShapeError(f"prompts must be padded to {MAX_PROMPT_LEN} ids, got {ids.shape}")
        zero_row = Tensor(np.zeros((1, self.text_dim), dtype=self.table.dtype))
        full = concat([zero_row, self.table], axis=0)
        return gather_rows(full, ids)


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal features of integer timesteps; (B, dim) float32."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


class UNet:
    """Shared trunk for the denoiser and the ReferenceNet.

    ``ref_sites`` controls which attention stacks own a reference layer
    (empty for the ReferenceNet). ``in_channels`` differs between the
    two nets when mask/inpainting channels are enabled; every other
    trunk parameter shares its init stream by name.
    """

    def __init__(self, config: DenoiserConfig, seed: int, in_channels: int, ref_sites):
        self.config = config
        self.seed = seed
        self.in_channels = in_channels
        self.ref_site_ids = list(ref_sites)
        reg = _Registry(Rng(seed))
        self._reg = reg
        cfg = config
        sin_dim = 32
        self.time_mlp1 = _Linear(reg, "time.l1", sin_dim, cfg.temb_dim)
        self.time_mlp2 = _Linear(reg, "time.l2", cfg.temb_dim, cfg.temb_dim)
        self.text = TextEncoder(reg, cfg.text_dim)

        ch = cfg.level_channels
        attn_levels = set(cfg.attn_levels())
        self.stem = _Conv(reg, "stem", in_channels, ch(0))

        self.enc_blocks = []
        self.enc_attn = []
        self.downs = []
        for i in range(cfg.levels):
            if i in attn_levels:
                self.enc_blocks.append(_ResBlock(reg, f"enc{i}", ch(i), ch(i), cfg.temb_dim))
                self.enc_attn.append(_AttnStack(reg, f"enc{i}.attn", ch(i), cfg.heads, cfg.text_dim,
                                                with_ref=f"enc{i}" in self.ref_site_ids,
                                                site_id=f"enc{i}"))
            else:
                self.enc_blocks.append(_LightBlock(reg, f"enc{i}", ch(i), ch(i), cfg.temb_dim))
                self.enc_attn.append(_CrossOnly(reg, f"enc{i}.attn", ch(i), cfg.heads, cfg.text_dim))
            self.downs.append(_Conv(reg, f"down{i}", ch(i), ch(i + 1)))

        cm = ch(cfg.levels)
        self.mid1 = _ResBlock(reg, "mid1", cm, cm, cfg.temb_dim)
        self.mid_attn = _AttnStack(reg, "mid.attn", cm, cfg.heads, cfg.text_dim,
                                   with_ref="mid" in self.ref_site_ids, site_id="mid")
        self.mid2 = _ResBlock(reg, "mid2", cm, cm, cfg.temb_dim)

        self.ups = []
        self.dec_blocks = []
        self.dec_attn = []
        for i in reversed(range(cfg.levels)):
            self.ups.append(_Conv(reg, f"up{i}", ch(i + 1), ch(i)))
            if i in attn_levels:
                self.dec_blocks.append(_ResBlock(reg, f"dec{i}", 2 * ch(i), ch(i), cfg.temb_dim))
                self.dec_attn.append(_AttnStack(reg, f"dec{i}.attn", ch(i), cfg.heads, cfg.text_dim,
                                                with_ref=f"dec{i}" in self.ref_site_ids,
                                                site_id=f"dec{i}"))
            else:
                self.dec_blocks.append(_LightBlock(reg, f"dec{i}", 2 * ch(i), ch(i), cfg.temb_dim))
                self.dec_attn.append(_CrossOnly(reg, f"dec{i}.attn", ch(i), cfg.heads, cfg.text_dim))

        self.out_norm = _Norm(reg, "out.n", ch(0), axis=1)
        self.out_conv = _Conv(reg, "out.c", ch(0), 1, zero=True)

    def params(self) -> dict:
        return self._reg.tensors

    def forward(self, x: Tensor, t, text_ids, ref_handler, stop_after: str | None = None) -> Tensor | None:
        """Run the trunk; with ``stop_after`` set, bail out (returning None)
        once that attention site has been visited (feature collection
        does not need the decoder tail past the last cache site)."""
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"expected (B, {self.in_channels}, H, W) input, got {x.shape}")
        b = x.shape[0]
        temb_in = timestep_embedding(np.broadcast_to(np.asarray(t), (b,)), 32)
        temb = self.time_mlp2(silu(self.time_mlp1(Tensor(temb_in.astype(x.data.dtype)))))
        text_kv = None
        if text_ids is not None:
            text_kv = self.text(np.broadcast_to(np.asarray(text_ids),
                                                (b, MAX_PROMPT_LEN)))

        h = self.stem(x)
        skips = []
        for i in range(self.config.levels):
            h = self.enc_blocks[i](h, temb)
            blk = self.enc_attn[i]
            h = blk(h, text_kv, ref_handler) if isinstance(blk, _AttnStack) else blk(h, text_kv)
            if stop_after == f"enc{i}":
                return None
            skips.append(h)
            h = self.downs[i](avg_pool2d(h))

        h = self.mid1(h, temb)
        h = self.mid_attn(h, text_kv, ref_handler)
        if stop_after == "mid":
            return None
        h = self.mid2(h, temb)

        for j, i in enumerate(reversed(range(self.config.levels))):
            h = self.ups[j](upsample2x(h))
            h = concat([h, skips[i]], axis=1)
            h = self.dec_blocks[j](h, temb)
            blk = self.dec_attn[j]
            h = blk(h, text_kv, ref_handler) if isinstance(blk, _AttnStack) else blk(h, text_kv)
            if stop_after == f"dec{i}":
                return None

        return self.out_conv(silu(self.out_norm(h)))


def build_denoiser(config: DenoiserConfig, seed: int = 0) -> UNet:
    return UNet(config, seed, in_channels=config.in_channels, ref_sites=config.ref_sites())


def cast_net(net: UNet, dtype) -> UNet:
    """Rebuild the net with parameters cast to ``dtype`` (for FD verification)."""
    twin = UNet(net.config, net.seed, net.in_channels, net.ref_site_ids)
    for name, p in twin.params().items():
        p.data = net.params()[name].data.astype(dtype)
    return twin


# -- input assembly -------------------------------------------------------------

def make_position_mask(bboxes, size: int) -> Tensor:
    """One-channel zero mask with the face bbox region filled with ones."""
    bboxes = [bboxes] if isinstance(bboxes, tuple) else list(bboxes)
    out = np.zeros((len(bboxes), 1, size, size), dtype=np.float32)
    for i, (r0, c0, r1, c1) in enumerate(bboxes):
        out[i, 0, r0:r1, c0:c1] = 1.0
    return Tensor(out)


def build_input(latent_noised: Tensor, position_mask: Tensor | None,
                masked_latent: Tensor | None, config: DenoiserConfig) -> Tensor:
    """Channel concat in fixed order [noised, masked_latent?, position_mask?]."""
    b = latent_noised.shape[0]
    chans = [latent_noised]
    if config.inpainting:
        if masked_latent is None:
            raise ValueError("inpainting config requires a masked_latent channel")
        chans.append(masked_latent)
    elif masked_latent is not None:
        raise ValueError("masked_latent given but config.inpainting is false")
    if config.use_position_mask:
        if position_mask is None:
            position_mask = Tensor(np.zeros((b, 1, config.img_size, config.img_size),
                                            dtype=latent_noised.data.dtype))
        chans.append(position_mask)
    return concat(chans, axis=1) if len(chans) > 1 else latent_noised


# -- denoiser entry point ---------------------------------------------------------

def _text_to_ids(text):
    """None | Prompt | token tuple | list of prompts | id array -> id array or None."""
    from .sprites import Prompt, encode_prompt
    if text is None:
        return None
    if isinstance(text, np.ndarray):
        return text
    if isinstance(text, Prompt):
        return encode_prompt(text)
    if isinstance(text, (list, tuple)):
        if all(isinstance(tok, str) for tok in text):
            return encode_prompt(tuple(text))
        return np.stack([encode_prompt(p) for p in text])
    raise TypeError(f"cannot interpret {type(text).__name__} as prompt text")


def predict_noise(net: UNet, x_t: Tensor, t, text, cache, lambda_feat: float | None = None,
                  cache2=None, lambda_id1: float = 1.0) -> Tensor:
    """One denoiser forward pass.

    ``cache`` of None runs the self-only branch at every reference site
    (the condition-dropout path), which is bit-identical to passing any
    cache with ``lambda_feat=0``. With ``cache2`` set, the reference
    branch becomes the identity mix  lambda_id1 * branch(cache) +
    (1 - lambda_id1) * branch(cache2).
    """
    text_ids = _text_to_ids(text)
    for c in (cache, cache2):
        if c is not None and list(c.entries) != net.ref_site_ids:
            raise ValueError(
                f"cache sites {list(c.entries)} do not match net sites {net.ref_site_ids}")

    b = x_t.shape[0]
    lf = net.config.refattn.lambda_feat if lambda_feat is None else float(lambda_feat)

    def site_kv(c, site: str) -> Tensor:
        entry = c.entries[site]
        rows, lr, ch = entry.shape
        if rows % b:
            raise ShapeError(f"cache rows {rows} not a multiple of batch {b}")
        return entry.reshape(b, (rows // b) * lr, ch)

    def ref_handler(site: str, layer, y: Tensor, norm) -> Tensor:
        if layer is None:
            return y
        ny = norm(y)
        if cache is None:
            return reference_attend(layer, ny, None, lf, residual=y)
        refs1 = norm(site_kv(cache, site))
        if cache2 is None:
            return reference_attend(layer, ny, refs1, lf, residual=y)
        if lf == 0.0:
            return y + attend(layer, ny, ny)
        refs2 = norm(site_kv(cache2, site))
        mixed = mixed_identity_attend(layer, ny, refs1, refs2, lambda_id1)
        if lf == 1.0:
            return y + mixed
        return y + (1.0 - lf) * attend(layer, ny, ny) + lf * mixed

    return net.forward(x_t, t, text_ids, ref_handler)


# -- checkpoints -------------------------------------------------------------------

def save_checkpoint(net: UNet, dirpath: str, kind: str = "denoiser") -> None:
    os.makedirs(dirpath, exist_ok=True)
    names = sorted(net.params())
    lines = []
    for i, name in enumerate(names):
        p = net.params()[name]
        fname = f"p{i:04d}.tnsr"
        save_tnsr(os.path.join(dirpath, fname), p)
        lines.append(f"{name}\t{fname}\t{','.join(str(s) for s in p.shape)}")
    with open(os.path.join(dirpath, "manifest.tsv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    cfg = net.config
    meta = {
        "kind": kind,
        "seed": net.seed,
        "in_channels": net.in_channels,
        "ref_sites": net.ref_site_ids,
        "config": {
            "base_channels": cfg.base_channels,
            "levels": cfg.levels,
            "inpainting": cfg.inpainting,
            "use_position_mask": cfg.use_position_mask,
            "heads": cfg.heads,
            "img_size": cfg.img_size,
            "text_dim": cfg.text_dim,
            "temb_dim": cfg.temb_dim,
            "placement": cfg.refattn.placement,
            "lambda_feat": cfg.refattn.lambda_feat,
        },
    }
    with open(os.path.join(dirpath, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)


def config_from_meta(meta: dict) -> DenoiserConfig:
    c = dict(meta["config"])
    ref = RefAttnConfig(placement=c.pop("placement"), lambda_feat=c.pop("lambda_feat"))
    return DenoiserConfig(refattn=ref, **c)


def load_checkpoint(dirpath: str) -> UNet:
    with open(os.path.join(dirpath, "config.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    config = config_from_meta(meta)
    net = UNet(config, meta["seed"], meta["in_channels"], meta["ref_sites"])
    wanted = net.params()
    seen = set()
    with open(os.path.join(dirpath, "manifest.tsv"), encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            name, fname, shape_s = line.split("\t")
            if name not in wanted:
                raise ValueError(f"checkpoint has unknown parameter {name}")
            t = load_tnsr(os.path.join(dirpath, fname))
            shape = tuple(int(v) for v in shape_s.split(",")) if shape_s else ()
            if t.shape != shape or wanted[name].shape != shape:
                raise ShapeError(f"shape mismatch for {name}: file {t.shape}, manifest {shape}, "
                                 f"net {wanted[name].shape}")
            wanted[name].data = t.data.copy()
            seen.add(name)
    missing = set(wanted) - seen
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:5]}")
    return net
