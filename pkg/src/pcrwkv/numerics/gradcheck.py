"""Central finite-difference checks for reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autograd import Node, backward


@dataclass
class GradReport:
    elementwise: float  # max |a - n| / (|a| + floor)
    normwise: float  # ||a - n|| / max(||a||, ||n||, tiny)
    count: int


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place and restoring it."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def check_grads(
    loss_fn: Callable[[], Node],
    params: Sequence[Node],
    eps: float = 1e-5,
    floor: float = 1e-8,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    points: int = 2,
) -> GradReport:
    """Compare analytic gradients of ``loss_fn()`` w.r.t. ``params`` with central differences.

    ``points`` selects the stencil: 2 is the usual (f(x+e) - f(x-e)) / 2e, 4 adds
    the +-2e evaluations for O(e^4) truncation error, which allows larger steps
    and so less cancellation on tiny gradient entries.
    ``max_entries`` limits the number of perturbed entries per parameter (chosen
    with ``rng``) to keep big models affordable.
    """
    if points not in (2, 4):
        raise ValueError("points must be 2 or 4")
    stencil = [(1, 0.5), (-1, -0.5)] if points == 2 else [(1, 8 / 12), (-1, -8 / 12), (2, -1 / 12), (-2, 1 / 12)]
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    analytic, numeric = [], []
    for p in params:
        a = p.grad.reshape(-1).copy()
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
        for i in idx:
            old = flat[i]
            acc = 0.0
            for step, coef in stencil:
                flat[i] = old + step * eps
                acc += coef * float(loss_fn().value)
            flat[i] = old
            numeric.append(acc / eps)
            analytic.append(a[i])
    a, n = np.asarray(analytic), np.asarray(numeric)
    elem = float(np.max(np.abs(a - n) / (np.abs(a) + floor))) if a.size else 0.0
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-300)
    return GradReport(elem, float(np.linalg.norm(a - n) / scale), int(a.size))
