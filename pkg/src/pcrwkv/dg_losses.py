"""Training objectives: classification, cross-domain key alignment, and their sum."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from .errors import LabelOutOfRange, TooFewRows
from .numerics import ag
from .numerics.autograd import Node

ALIGN_MODES = ("none", "k_only", "v_only", "k_and_v")


@dataclass
class KeyStats:
    domain_id: int
    mu: Node  # (C,)
    sigma: Node  # (C, C)
    count: int


def key_stats(keys) -> tuple[Node, Node]:
    """Column mean and population covariance (divide by M) of an (M, C) key matrix."""
    keys = ag.const(keys)
    if keys.value.ndim != 2:
        raise ValueError(f"keys must be (M, C), got {keys.shape}")
    M = keys.shape[0]
    if M < 2:
        raise TooFewRows(f"covariance needs at least two rows, got {M}")
    mu = ag.mean(keys, axis=0)
    centered = keys - mu
    sigma = (ag.swapaxes(centered, 0, 1) @ centered) / float(M)
    return mu, sigma


def domain_stats(rows_by_domain: dict[int, Node]) -> list[KeyStats]:
    out = []
    for d in sorted(rows_by_domain):
        rows = rows_by_domain[d]
        mu, sigma = key_stats(rows)
        out.append(KeyStats(domain_id=d, mu=mu, sigma=sigma, count=rows.shape[0]))
    return out


def cd_kda_loss(stats: Sequence[KeyStats]) -> Node:
    """Mean over unordered domain pairs of squared mean gap plus squared Frobenius covariance gap."""
    pairs = list(combinations(range(len(stats)), 2))
    if not pairs:
        return ag.const(0.0)
    total = None
    for i, j in pairs:
        a, b = stats[i], stats[j]
        term = ag.sum(ag.square(a.mu - b.mu)) + ag.sum(ag.square(a.sigma - b.sigma))
        total = term if total is None else total + term
    return total / float(len(pairs))


def cross_entropy(logits, labels) -> Node:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logits = ag.const(logits)
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"labels shape {labels.shape} != ({B},)")
    if np.any(labels < 0) or np.any(labels >= K):
        raise LabelOutOfRange(f"labels must lie in [0, {K})")
    # shift is a constant: lse(x) = m + log sum exp(x - m) holds for any m
    shift = ag.const(logits.value.max(axis=1, keepdims=True))
    lse = ag.log(ag.sum(ag.exp(logits - shift), axis=1)) + ag.reshape(shift, (B,))
    picked = ag.index(logits, (np.arange(B), labels))
    return ag.mean(lse - picked)


def total_loss(cls, kda, lambda1: float = 1.0, lambda2: float = 0.3) -> Node:
    """lambda1 * cls + lambda2 * kda; a zero alignment weight drops the term from the graph."""
    if lambda2 == 0:
        # keeps backward identical to a run that never aligned, down to summation order
        return lambda1 * ag.const(cls)
    return lambda1 * ag.const(cls) + lambda2 * ag.const(kda)


@dataclass
class _Tap:
    layer: int
    k: Node
    v: Node
    domains: np.ndarray


@dataclass
class KeyCollector:
    """Gathers per-layer key/value tensors of one training step, tagged by domain."""

    layers: frozenset[int] | None = None  # None keeps every layer
    keep_values: bool = True
    taps: list[_Tap] = field(default_factory=list)
    # > 0 blends each batch's statistics with a running per-domain estimate
    momentum: float = 0.0
    running: dict = field(default_factory=dict)  # (which, layer, domain) -> (mean, second moment)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")

    def clear(self) -> None:
        self.taps.clear()

    def hook(self, layer: int, domains: np.ndarray):
        if self.layers is not None and layer not in self.layers:
            return None
        domains = np.asarray(domains)

        def on_kv(k: Node, v: Node) -> None:
            self.taps.append(_Tap(layer, k, v if self.keep_values else None, domains))

        return on_kv

    def rows_by_domain(self, tap: _Tap, which: str) -> dict[int, Node]:
        x = tap.k if which == "k" else tap.v
        out = {}
        for d in np.unique(tap.domains):
            sel = np.flatnonzero(tap.domains == d)
            rows = ag.index(x, sel)
            out[int(d)] = ag.reshape(rows, (-1, x.shape[-1]))
        return out

    def layer_losses(self, which: str) -> list[Node]:
        if self.momentum == 0.0:
            return [cd_kda_loss(domain_stats(self.rows_by_domain(t, which))) for t in self.taps]
        return [cd_kda_loss(self._blended_stats(t, which)) for t in self.taps]

    def _blended_stats(self, tap: _Tap, which: str) -> list[KeyStats]:
        """Per-domain stats where the current batch enters with weight 1 - momentum and
        the (constant) running estimate with weight momentum; running values then update."""
        b = self.momentum
        out = []
        for d, rows in sorted(self.rows_by_domain(tap, which).items()):
            mu_b, sigma_b = key_stats(rows)
            m2_b = sigma_b + ag.reshape(mu_b, (-1, 1)) * ag.reshape(mu_b, (1, -1))
            key = (which, tap.layer, d)
            if key in self.running:
                run_mu, run_m2 = self.running[key]
                mu = (1.0 - b) * mu_b + b * ag.const(run_mu)
                m2 = (1.0 - b) * m2_b + b * ag.const(run_m2)
            else:
                mu, m2 = mu_b, m2_b
            sigma = m2 - ag.reshape(mu, (-1, 1)) * ag.reshape(mu, (1, -1))
            out.append(KeyStats(domain_id=d, mu=mu, sigma=sigma, count=rows.shape[0]))
            self.running[key] = (mu.value.copy(), m2.value.copy())
        return out


def _mean(nodes: Iterable[Node]) -> Node:
    nodes = list(nodes)
    if not nodes:
        return ag.const(0.0)
    total = nodes[0]
    for n in nodes[1:]:
        total = total + n
    return total / float(len(nodes))


def alignment_target(mode: str, collector: KeyCollector) -> Node:
    """Alignment loss for an ablation mode, averaged over collected layers."""
    if mode not in ALIGN_MODES:
        raise ValueError(f"unknown alignment mode {mode!r}")
    if mode == "none":
        return ag.const(0.0)
    if mode == "k_only":
        return _mean(collector.layer_losses("k"))
    if mode == "v_only":
        return _mean(collector.layer_losses("v"))
    return _mean(collector.layer_losses("k")) + _mean(collector.layer_losses("v"))
