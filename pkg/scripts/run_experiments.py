#!/usr/bin/env python3
"""Reproduce the four trend studies on the sprite world.

Each study trains and/or evaluates against the held-out benchmark split
and appends its rows to a CSV under --out:

  refcount   sim/paste as the number of references grows 1..4
  strength   sim/paste across the lambda_feat grid at fixed lambda_ref
  placement  decoder-only vs encoder-only reference sites, several seeds
  recon      cluster-sampled references vs target-crop (reconstruction) refs

A study that needs a trained model trains one per flag budget; `refcount`
and `strength` reuse a single shared model. Results land in
<out>/<study>.csv plus a plain-text summary.

Usage:
  python scripts/run_experiments.py --data data/ --out results/ \
      --studies refcount strength --iters 3000 --steps 50
"""

import argparse
import os
import time

import numpy as np

from idsprite.attention import RefAttnConfig
from idsprite.diffusion import GuidanceWeights
from idsprite.metrics import build_benchmark, run_benchmark, strength_sweep, train_split
from idsprite.sprites import load_dataset, make_dataset
from idsprite.training import TrainConfig, load_models, save_models, train
from idsprite.unet import DenoiserConfig


def _model(args, tag, placement="decoder", reconstruction=False, seed=0):
    """Train (or reuse from cache) one model variant."""
    cache = os.path.join(args.out, "models", tag)
    if os.path.exists(os.path.join(cache, "denoiser", "manifest.tsv")):
        print(f"[{tag}] reusing cached model", flush=True)
        return load_models(cache)
    ds = train_split(load_dataset(args.data), args.holdout)
    cfg = DenoiserConfig(refattn=RefAttnConfig(placement=placement))
    tcfg = TrainConfig(iters=args.iters, seed=seed, reconstruction=reconstruction)
    t0 = time.time()
    den, ref, hist = train(ds, cfg, tcfg)
    print(f"[{tag}] trained {args.iters} iters in {time.time() - t0:.0f}s "
          f"(final loss {hist[-1][1]:.4f})", flush=True)
    save_models(den, ref, cache)
    return den, ref


def _append(path, header, rows):
    fresh = not os.path.exists(path)
    with open(path, "a", encoding="utf-8") as fh:
        if fresh:
            fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


def study_refcount(args, bm, summary):
    den, ref = _model(args, "main")
    rows = []
    for n in (1, 2, 3, 4):
        rep = run_benchmark(den, ref, bm, GuidanceWeights(), n_refs=n,
                            steps=args.steps, seed=args.eval_seed)
        rows.append((n, f"{rep.sim_ref:.6f}", f"{rep.sim_target:.6f}",
                     f"{rep.paste:.6f}", f"{rep.adherence:.6f}", f"{rep.fid:.6f}"))
        print(f"  n_refs={n}  sim_target={rep.sim_target:.4f}  paste={rep.paste:.4f}",
              flush=True)
    _append(os.path.join(args.out, "refcount.csv"),
            "n_refs,sim_ref,sim_target,paste,adherence,fid", rows)
    delta = float(rows[-1][2]) - float(rows[0][2])
    summary.append(f"refcount: sim_target(4) - sim_target(1) = {delta:+.4f}")


def study_strength(args, bm, summary):
    den, ref = _model(args, "main")
    grid = strength_sweep(den, ref, bm, [0.0, 0.25, 0.5, 0.75, 1.0], [2.0],
                          steps=args.steps, seed=args.eval_seed,
                          csv_path=os.path.join(args.out, "strength.csv"))
    sims = [rep.sim_target for _, _, rep in grid]
    for (lf, _, rep) in grid:
        print(f"  lambda_feat={lf:.2f}  sim_target={rep.sim_target:.4f}  "
              f"paste={rep.paste:.4f}", flush=True)
    summary.append(f"strength: sim_target rises {sims[0]:.4f} -> {sims[-1]:.4f} "
                   f"over lambda_feat 0 -> 1")


def study_placement(args, bm, summary):
    rows, wins = [], 0
    for seed in range(args.placement_seeds):
        scores = {}
        for place in ("decoder", "encoder"):
            den, ref = _model(args, f"{place}-s{seed}", placement=place, seed=seed)
            rep = run_benchmark(den, ref, bm, GuidanceWeights(),
                                steps=args.steps, seed=args.eval_seed)
            scores[place] = rep.sim_target
            rows.append((place, seed, f"{rep.sim_ref:.6f}", f"{rep.sim_target:.6f}",
                         f"{rep.paste:.6f}"))
            print(f"  {place} seed={seed}  sim_target={rep.sim_target:.4f}", flush=True)
        wins += scores["decoder"] > scores["encoder"]
    _append(os.path.join(args.out, "placement.csv"),
            "placement,seed,sim_ref,sim_target,paste", rows)
    summary.append(f"placement: decoder wins {wins}/{args.placement_seeds} seeds")


def study_recon(args, bm, summary):
    rows = {}
    for tag, recon in (("main", False), ("recon", True)):
        den, ref = _model(args, tag, reconstruction=recon)
        rows[tag] = run_benchmark(den, ref, bm, GuidanceWeights(),
                                  steps=args.steps, seed=args.eval_seed)
        print(f"  {tag}: sim_ref={rows[tag].sim_ref:.4f}  paste={rows[tag].paste:.4f}",
              flush=True)
    _append(os.path.join(args.out, "recon.csv"),
            "mode,sim_ref,sim_target,paste",
            [(t, f"{r.sim_ref:.6f}", f"{r.sim_target:.6f}", f"{r.paste:.6f}")
             for t, r in rows.items()])
    summary.append(
        f"recon: sim_ref {rows['recon'].sim_ref:.4f} vs {rows['main'].sim_ref:.4f}, "
        f"paste {rows['recon'].paste:.4f} vs {rows['main'].paste:.4f}")


STUDIES = {"refcount": study_refcount, "strength": study_strength,
           "placement": study_placement, "recon": study_recon}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", required=True, help="dataset dir (gen-data output)")
    ap.add_argument("--out", required=True, help="results dir")
    ap.add_argument("--studies", nargs="+", default=list(STUDIES),
                    choices=sorted(STUDIES))
    ap.add_argument("--iters", type=int, default=3000)
    ap.add_argument("--steps", type=int, default=50, help="sampler steps per eval")
    ap.add_argument("--holdout", type=float, default=0.2)
    ap.add_argument("--eval-seed", type=int, default=5)
    ap.add_argument("--placement-seeds", type=int, default=3)
    ap.add_argument("--gen-ids", type=int, default=64,
                    help="generate a dataset of this many ids if --data is missing")
    ap.add_argument("--gen-per-id", type=int, default=20)
    ap.add_argument("--gen-seed", type=int, default=11)
    args = ap.parse_args()

    if not os.path.exists(os.path.join(args.data, "manifest.tsv")):
        print(f"generating dataset at {args.data}", flush=True)
        make_dataset(args.data, args.gen_ids, args.gen_per_id, args.gen_seed)
    os.makedirs(args.out, exist_ok=True)

    bm = build_benchmark(load_dataset(args.data), args.holdout, n_refs=4)
    print(f"benchmark: {len(bm.rows)} held-out identities", flush=True)

    summary = []
    for name in args.studies:
        print(f"== {name} ==", flush=True)
        STUDIES[name](args, bm, summary)

    with open(os.path.join(args.out, "summary.txt"), "a", encoding="utf-8") as fh:
        fh.write("\n".join(summary) + "\n")
    print("\n".join(summary))


if __name__ == "__main__":
    main()
