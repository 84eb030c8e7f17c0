"""Joint denoiser + ReferenceNet training on identity clusters.

Each step samples a batch of identity clusters, picks N+1 distinct
images per cluster (N references, one target; N drawn once per step
from {1..4}), noises the target, and regresses the injected noise
under three independent condition-dropout coins (reference features,
position mask, text), each firing with probability 0.1. Reconstruction
mode replaces the cluster references with crops of the target image
itself, which is the known shortcut that inflates copy-paste behavior.

Reference attention trains at full strength; the lambda_feat dial is
an inference-time control.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, q_sample
from .refnet import encode_references
from .rng import Rng
from .sprites import crop_face, encode_prompt
from .tensor import NumericError, Tensor
from .unet import DenoiserConfig, build_denoiser, build_input, make_position_mask, predict_noise, save_checkpoint
from .refnet import build_reference_net

REF_TIMESTEP_MODES = ("same", "zero")


@dataclass
class TrainConfig:
    batch_ids: int = 8
    min_refs: int = 1
    max_refs: int = 4
    drop_prob: float = 0.1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    iters: int = 3000
    seed: int = 0
    ref_timestep: str = "same"
    reconstruction: bool = False
    checkpoint_every: int = 0  # 0: only the final checkpoint

    def __post_init__(self):
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError(f"drop_prob must lie in [0,1], got {self.drop_prob}")
        if not 1 <= self.min_refs <= self.max_refs:
            raise ValueError(f"bad reference count range [{self.min_refs}, {self.max_refs}]")
        if self.ref_timestep not in REF_TIMESTEP_MODES:
            raise ValueError(f"ref_timestep must be one of {REF_TIMESTEP_MODES}")


class Adam:
    """Standard Adam; parameters with no gradient this step are left alone."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            g = g.astype(p.data.dtype, copy=False)
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * np.square(g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def grad_norm(params: dict) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


@dataclass
class Batch:
    targets: Tensor        # (B, 1, H, W)
    crops: Tensor          # (B*N, 1, hr, wr)
    n_refs: int
    prompt_ids: np.ndarray  # (B, max prompt len)
    masks: Tensor          # (B, 1, H, W)
    bboxes: list


def sample_batch(dataset, rng: Rng, batch_ids: int = 8, min_refs: int = 1,
                 max_refs: int = 4, reconstruction: bool = False) -> Batch:
    """Draw one training batch; never uses the target as its own reference
    (except in reconstruction mode, where that is the point)."""
    n = int(rng.integers(min_refs, max_refs + 1))
    ids = dataset.identity_ids
    need = 1 if reconstruction else n + 1
    targets, crops, prompts, masks_b, bboxes = [], [], [], [], []
    for _ in range(batch_ids):
        for attempt in range(10 * len(ids)):
            ident = ids[rng.integers(0, len(ids))]
            if len(dataset.by_id[ident]) >= need:
                break
        else:
            raise ValueError(f"no identity cluster has >= {need} images")
        members = dataset.by_id[ident]
        pick = rng.choice(len(members), size=need, replace=False)
        target = dataset.records[members[pick[0]]]
        targets.append(target.pixels)
        prompts.append(encode_prompt(target.caption))
        masks_b.append(target.bbox)
        bboxes.append(target.bbox)
        if reconstruction:
            ref_recs = [target] * n
        else:
            ref_recs = [dataset.records[members[j]] for j in pick[1:]]
        for rec in ref_recs:
            crops.append(crop_face(rec.pixels, rec.bbox)[None])
    return Batch(
        targets=Tensor(np.stack(targets)),
        crops=Tensor(np.stack(crops)),
        n_refs=n,
        prompt_ids=np.stack(prompts),
        masks=make_position_mask(masks_b, dataset.records[0].pixels.shape[-1]),
        bboxes=bboxes,
    )


def _dropout_coins(coin: Rng, p: float) -> tuple[bool, bool, bool]:
    """Three independent batch-level dropout decisions: reference features,
    position mask, text prompt. Drawn sequentially from one stream."""
    return (coin.random() < p, coin.random() < p, coin.random() < p)


def train_step(denoiser, refnet, opt: Adam, batch: Batch, schedule: NoiseSchedule,
               config: TrainConfig, rng: Rng):
    """One optimization step; returns (loss, grad_norm)."""
    b = batch.targets.shape[0]
    t = rng.child("t").integers(0, schedule.timesteps, shape=(b,))
    noise = Tensor(rng.child("noise").normal(batch.targets.shape))
    x_t = q_sample(schedule, batch.targets, t, noise)

    drop_ref, drop_mask, drop_text = _dropout_coins(rng.child("drop"), config.drop_prob)

    cache = None
    if not drop_ref:
        if config.ref_timestep == "same":
            t_ref = np.repeat(t, batch.n_refs)
        else:
            t_ref = 0
        cache = encode_references(refnet, batch.crops, t_ref)
    mask = None if drop_mask else batch.masks
    text_ids = None if drop_text else batch.prompt_ids
    masked_latent = None
    if denoiser.config.inpainting:
        masked_latent = batch.targets * (1.0 - batch.masks)

    inp = build_input(x_t, mask, masked_latent, denoiser.config)
    pred = predict_noise(denoiser, inp, t, text_ids, cache, lambda_feat=1.0)
    loss = ((pred - noise) ** 2).mean()
    val = loss.item()
    if not math.isfinite(val):
        raise NumericError(f"non-finite loss {val} (t range {t.min()}..{t.max()}, "
                           f"drops ref={drop_ref} mask={drop_mask} text={drop_text})")
    opt.zero_grad()
    loss.backward()
    gn = grad_norm(opt.params)
    if not math.isfinite(gn):
        raise NumericError(f"non-finite gradient norm at loss {val}")
    opt.step()
    return val, gn


def train(dataset, den_config: DenoiserConfig, config: TrainConfig,
          log_path: str | None = None, ckpt_dir: str | None = None, quiet: bool = True):
    """Full training loop; returns (denoiser, refnet, history).

    History rows are (iter, loss, grad_norm), also streamed to
    ``log_path`` as CSV when given. Checkpoints land in
    ``ckpt_dir/denoiser`` and ``ckpt_dir/refnet``.
    """
    denoiser = build_denoiser(den_config, seed=config.seed)
    refnet = build_reference_net(den_config, seed=config.seed)
    params = {}
    for name, p in denoiser.params().items():
        params[f"den.{name}"] = p
    for name, p in refnet.params().items():
        params[f"ref.{name}"] = p
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.adam_eps)
    schedule = NoiseSchedule()
    root = Rng(config.seed)
    history = []
    log_fh = None
    if log_path:
        os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
        log_fh = open(log_path, "w", encoding="utf-8")
        log_fh.write("iter,loss,grad_norm\n")
    try:
        for it in range(config.iters):
            batch = sample_batch(dataset, root.child("batch", it), config.batch_ids,
                                 config.min_refs, config.max_refs, config.reconstruction)
            loss, gn = train_step(denoiser, refnet, opt, batch, schedule, config,
                                  root.child("step", it))
            history.append((it, loss, gn))
            if log_fh:
                log_fh.write(f"{it},{loss:.6f},{gn:.6f}\n")
            if not quiet and (it % 100 == 0 or it == config.iters - 1):
                print(f"iter {it:5d}  loss {loss:.4f}  grad {gn:.3f}", flush=True)
            if ckpt_dir and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                save_models(denoiser, refnet, os.path.join(ckpt_dir, f"it{it + 1:05d}"))
    finally:
        if log_fh:
            log_fh.close()
    if ckpt_dir:
        save_models(denoiser, refnet, ckpt_dir)
    return denoiser, refnet, history


def save_models(denoiser, refnet, dirpath: str) -> None:
    save_checkpoint(denoiser, os.path.join(dirpath, "denoiser"), kind="denoiser")
    save_checkpoint(refnet, os.path.join(dirpath, "refnet"), kind="refnet")


def load_models(dirpath: str):
    from .unet import load_checkpoint
    return (load_checkpoint(os.path.join(dirpath, "denoiser")),
            load_checkpoint(os.path.join(dirpath, "refnet")))


def train_reconstruction_mode(dataset, den_config: DenoiserConfig, config: TrainConfig,
                              **kwargs):
    """Ablation loop whose references are crops of the target image itself."""
    cfg = TrainConfig(**{**config.__dict__, "reconstruction": True})
    return train(dataset, den_config, cfg, **kwargs)
