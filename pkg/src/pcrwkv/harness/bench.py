"""Complexity benchmarks: analytic FLOPs and wall-clock for the attention kernels
and for geometric token shifting.

FLOPs count a multiply-add as 2 and every exp, max, compare or divide as 1.
Both attention layers include their four C x C projections so the counts
compare whole layers at equal width.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..agt_shift import AgtConfig, agt_op_count, agt_shift, build_grid
from ..numerics import make_rng
from ..rwkv_core import bi_wkv_linear

# per token and channel: two one-sided scans (decay sub, max, 2 exp, 2 mul-add
# pairs for numerator/denominator = 10 each), merging them (2 exp, 2 mul-add
# pairs = 6), the self term (add, max, 2 exp, 2 mul-add pairs = 8), one divide
WKV_FLOPS_PER_ELEMENT = 2 * 10 + 6 + 8 + 1


def projection_flops(T: int, C: int) -> int:
    return 4 * 2 * T * C * C


def biwkv_flops(T: int, C: int) -> int:
    """Receptance gate (sigmoid ~4 + multiply) plus the scan kernel, all O(T C)."""
    return projection_flops(T, C) + T * C * (WKV_FLOPS_PER_ELEMENT + 5)


def softmax_attention_flops(T: int, C: int) -> int:
    """Scores Q K^T (2 T^2 C), row softmax (max, sub, exp, sum, divide = 5 T^2), weights @ V (2 T^2 C)."""
    return projection_flops(T, C) + 2 * T * T * C + 5 * T * T + 2 * T * T * C


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


def softmax_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray, block: int = 1024) -> np.ndarray:
    """Reference quadratic attention, evaluated in row blocks to bound memory."""
    T, C = Q.shape
    out = np.empty_like(V)
    scale = 1.0 / np.sqrt(C)
    for s in range(0, T, block):
        scores = (Q[s : s + block] @ K.T) * scale
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        out[s : s + block] = scores @ V
    return out


def _best_time(fn, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


@dataclass
class BenchRow:
    kind: str  # "biwkv" | "softmax" | "agt"
    size: int  # T for attention kernels, N for token shift
    width: int
    flops: int
    seconds: float


def bench_kernels(kernels, lengths, width: int = 16, repeats: int = 1, measure: bool = True, seed: int = 0):
    rng = make_rng(seed)
    rows = []
    for T in lengths:
        K = rng.uniform(-1, 1, (T, width))
        V = rng.uniform(-1, 1, (T, width))
        Q = rng.uniform(-1, 1, (T, width))
        w = np.linspace(0, 5, width)
        u = np.zeros(width)
        for kind in kernels:
            if kind == "biwkv":
                flops = biwkv_flops(T, width)
                fn = lambda: bi_wkv_linear(K, V, w=w, u=u)  # noqa: E731
            elif kind == "softmax":
                flops = softmax_attention_flops(T, width)
                fn = lambda: softmax_attention(Q, K, V)  # noqa: E731
            else:
                raise ValueError(f"unknown kernel {kind!r}")
            secs = _best_time(fn, repeats) if measure else float("nan")
            rows.append(BenchRow(kind, T, width, flops, secs))
    return rows


def fixed_density_cloud(n: int, rng, points_per_unit: float = 1024.0) -> np.ndarray:
    """Uniform points in a cube whose volume grows with n, so density stays fixed."""
    side = (n / points_per_unit) ** (1.0 / 3.0)
    return rng.uniform(0.0, side, size=(n, 3))


def bench_agt(sizes, width: int = 32, repeats: int = 5, seed: int = 0, cfg: AgtConfig = AgtConfig(h=0.2)):
    rng = make_rng(seed)
    rows = []
    for n in sizes:
        coords = fixed_density_cloud(n, rng)
        F = rng.normal(size=(n, width))

        def fn():
            agt_shift(F, coords, cfg)

        fn()  # warm caches
        secs = _best_time(fn, repeats)
        grid = build_grid(coords, cfg.h)
        rows.append(BenchRow("agt", n, width, agt_op_count(grid, cfg.channels(width)), secs))
    return rows


def slopes(rows: list[BenchRow]) -> dict[str, dict[str, float]]:
    out = {}
    for kind in sorted({r.kind for r in rows}):
        rs = [r for r in rows if r.kind == kind]
        entry = {"flops_slope": loglog_slope([r.size for r in rs], [r.flops for r in rs])}
        if all(np.isfinite(r.seconds) and r.seconds > 0 for r in rs):
            entry["time_slope"] = loglog_slope([r.size for r in rs], [r.seconds for r in rs])
        out[kind] = entry
    return out


def write_bench(rows: list[BenchRow], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "size", "width", "flops", "seconds"])
        for r in rows:
            w.writerow([r.kind, r.size, r.width, r.flops, repr(r.seconds)])
