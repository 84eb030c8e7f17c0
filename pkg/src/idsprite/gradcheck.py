"""Finite-difference verification of reverse-mode gradients.

``grad_check`` compares analytic gradients against central differences,
entry by entry. Callers should hand it float64 parameters: with float32
storage the difference quotient itself carries ~1e-5 of rounding noise,
which would swamp the tolerances used in the tests.
"""

from __future__ import annotations

import numpy as np

from .rng import Rng
from .tensor import Tensor, no_grad


def grad_check(f, params, eps: float = 1e-4, max_entries_per_param: int | None = None,
               rng: Rng | None = None, floor: float = 1e-6) -> float:
    """Return the worst relative error between analytic and FD gradients.

    ``f(params) -> scalar Tensor`` must be a pure function of the current
    parameter values; it is re-evaluated after each in-place perturbation.
    Relative error is |a - b| / max(|a|, |b|, floor), so an identically
    zero gradient scores 0 rather than 0/0.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    loss = f(params)
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ValueError("f must return a scalar Tensor")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else np.array(p.grad, dtype=np.float64)
                for p in params]

    if rng is None:
        rng = Rng(0)
    worst = 0.0
    with no_grad():
        for k, (p, ga) in enumerate(zip(params, analytic)):
            n = p.data.size
            if max_entries_per_param is not None and n > max_entries_per_param:
                idxs = np.sort(rng.child("gradcheck", k).choice(n, max_entries_per_param))
            else:
                idxs = range(n)
            for i in idxs:
                orig = p.data.flat[i]
                p.data.flat[i] = orig + eps
                up = f(params).item()
                p.data.flat[i] = orig - eps
                down = f(params).item()
                p.data.flat[i] = orig
                fd = (up - down) / (2.0 * eps)
                a = float(ga.reshape(-1)[i])
                err = abs(a - fd) / max(abs(a), abs(fd), floor)
                worst = max(worst, err)
    return worst
