#!/usr/bin/env python3
"""Re-measure the identity-embedding separation of the sprite generator.

The embedding extractor is frozen, so all discriminative power comes
from the generator constants in ``idsprite.sprites``. Run this after
touching any of them. Exits nonzero if the intra/inter margin drops
below the 0.1 floor the test suite enforces.

Usage: python scripts/calibrate_sprites.py [--n-ids 40] [--poses 6] [--seeds 123 11 99]
"""

import argparse
import sys

import numpy as np

from idsprite.rng import Rng
from idsprite.sprites import cosine, embed_identity, extract_attributes, make_identities, render


def measure(seed: int, n_ids: int, poses: int) -> dict:
    rng = Rng(seed)
    ids = make_identities(seed * 7 + 1, n_ids)
    embs = {}
    for ident in ids:
        vecs = [
            embed_identity(render(ident, frozenset(), rng.child(ident.id, j).integers(0, 2**60))).vector.data.astype(np.float64)
            for j in range(poses)
        ]
        embs[ident.id] = np.stack(vecs)

    intra, inter = [], []
    keys = sorted(embs)
    for k in keys:
        v = embs[k]
        for a in range(poses):
            for b in range(a + 1, poses):
                intra.append(v[a] @ v[b])
    for i in range(len(keys)):
        for j in range(i + 1, len(keys)):
            for a in range(poses):
                inter.append(embs[keys[i]][a] @ embs[keys[j]][a])
    intra, inter = np.array(intra), np.array(inter)

    pair_rng = Rng(7)
    pair_cos = []
    for t in range(100):
        a, b = pair_rng.child(t).choice(len(ids), 2)
        pair_cos.append(cosine(embed_identity(render(ids[a], frozenset(), 1000 + t)),
                               embed_identity(render(ids[b], frozenset(), 2000 + t))))
    pair_cos = np.array(pair_cos)

    det_ok = 0
    det_total = 0
    for t in range(50):
        draw = rng.child("det", t)
        attrs = frozenset(a for k, a in enumerate(("hat", "glasses", "smile", "old", "young"))
                          if draw.child(k).random() < 0.4)
        sprite = render(ids[t % len(ids)], attrs, 5000 + t)
        det_ok += extract_attributes(sprite.pixels) == attrs
        det_total += 1

    return {
        "intra_mean": intra.mean(), "intra_min": intra.min(),
        "inter_mean": inter.mean(), "inter_p95": np.percentile(inter, 95),
        "margin": intra.mean() - inter.mean(),
        "pairs_below_08": int((pair_cos < 0.8).sum()),
        "pair_worst": pair_cos.max(),
        "detector_acc": det_ok / det_total,
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-ids", type=int, default=40)
    ap.add_argument("--poses", type=int, default=6)
    ap.add_argument("--seeds", type=int, nargs="+", default=[123, 11, 99])
    args = ap.parse_args(argv)

    ok = True
    for seed in args.seeds:
        m = measure(seed, args.n_ids, args.poses)
        status = "ok" if m["margin"] >= 0.1 and m["detector_acc"] >= 0.99 else "FAIL"
        ok &= status == "ok"
        print(f"seed {seed}: margin {m['margin']:.3f} "
              f"(intra {m['intra_mean']:.3f} min {m['intra_min']:.3f}, "
              f"inter {m['inter_mean']:.3f} p95 {m['inter_p95']:.3f}) "
              f"pairs<0.8 {m['pairs_below_08']}/100 worst {m['pair_worst']:.3f} "
              f"detector {m['detector_acc']:.2%} [{status}]")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
