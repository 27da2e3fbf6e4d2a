"""RWKV block machinery: token shift, bidirectional WKV attention, mixing sublayers.

The bidirectional WKV attention of token ``t`` over a length-``T`` sequence is

    wkv_t = (sum_{i != t} a_ti v_i + e^{u + k_t} v_t) / (sum_{i != t} a_ti + e^{u + k_t})
    a_ti  = exp(k_i - (|t - i| - 1) / T * w)

per channel. :func:`bi_wkv_linear` evaluates it with one forward and one
backward prefix scan; :func:`bi_wkv_quadratic` is the direct O(T^2) oracle.
Scan accumulators are kept as ``(m, s)`` pairs meaning ``s * exp(m)`` so no
intermediate exponential can overflow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ChannelsNotDivisibleBy4, ShapeMismatch
from .numerics import ag
from .numerics.autograd import Node

QSHIFT_OFFSETS = (-1, 1, -2, 2)

ShiftFn = Callable[[Node], Node]


@dataclass
class BiWkvParams:
    w: Node  # per-channel distance decay, unconstrained
    u: Node  # per-channel bonus for the token itself


@dataclass
class SpatialMixParams:
    W_r: Node
    W_k: Node
    W_v: Node
    W_o: Node
    wkv: BiWkvParams
    mu: Node

    def named(self) -> dict[str, Node]:
        return {
            "W_r": self.W_r, "W_k": self.W_k, "W_v": self.W_v, "W_o": self.W_o,
            "w": self.wkv.w, "u": self.wkv.u, "mu": self.mu,
        }


@dataclass
class ChannelMixParams:
    W_r: Node
    W_k: Node
    W_v: Node
    mu: Node

    def named(self) -> dict[str, Node]:
        return {"W_r": self.W_r, "W_k": self.W_k, "W_v": self.W_v, "mu": self.mu}


# ------------------------------------------------------------------ scan helpers


def _one_sided(coefs, expo, decay, with_distance):
    """Sums over i < t of c_i exp(e_i - (t-1-i) * decay), arrays laid out (T, ...).

    Returns the max-exponent track m and, per coefficient array, the scaled sums
    (and distance-weighted sums sum (t-1-i) c_i exp(...)) relative to exp(m).
    """
    T = expo.shape[0]
    tail = np.broadcast_shapes(expo.shape[1:], *(c.shape[1:] for c in coefs))
    m = np.full(tail, -np.inf)
    s = [np.zeros(tail) for _ in coefs]
    q = [np.zeros(tail) for _ in coefs] if with_distance else None
    m_out = np.empty((T,) + tail)
    s_out = [np.empty((T,) + tail) for _ in coefs]
    q_out = [np.empty((T,) + tail) for _ in coefs] if with_distance else None
    for t in range(T):
        m_out[t] = m
        for j in range(len(coefs)):
            s_out[j][t] = s[j]
            if with_distance:
                q_out[j][t] = q[j]
        md = m - decay
        et = expo[t]
        mn = np.maximum(md, et)
        carry = np.exp(md - mn)
        fresh = np.exp(et - mn)
        for j, c in enumerate(coefs):
            if with_distance:
                q[j] = (q[j] + s[j]) * carry
            s[j] = s[j] * carry + c[t] * fresh
        m = mn
    return m_out, s_out, q_out


def _two_sided(coefs, expo, decay, with_distance=False):
    """sum over i != t of c_i exp(e_i - (|t-i| - 1) * decay), as (m, s[, q])."""
    mf, sf, qf = _one_sided(coefs, expo, decay, with_distance)
    flip = [c[::-1] for c in coefs]
    mb, sb, qb = _one_sided(flip, expo[::-1], decay, with_distance)
    mb = mb[::-1]
    sb = [x[::-1] for x in sb]
    m = np.maximum(mf, mb)
    safe = np.where(np.isfinite(m), m, 0.0)
    af = np.exp(mf - safe)
    ab = np.exp(mb - safe)
    s = [x * af + y * ab for x, y in zip(sf, sb)]
    q = None
    if with_distance:
        q = [x * af + y[::-1] * ab for x, y in zip(qf, qb)]
    return m, s, q


def _check_kv(K: np.ndarray, V: np.ndarray, w: np.ndarray, u: np.ndarray) -> None:
    if K.shape != V.shape or K.ndim < 2:
        raise ShapeMismatch(f"K {K.shape} and V {V.shape} must match with rank >= 2")
    C = K.shape[-1]
    if w.shape != (C,) or u.shape != (C,):
        raise ShapeMismatch(f"w {w.shape} / u {u.shape} must have length {C}")


def _wkv_forward(K, V, w, u):
    """Linear-time forward. Inputs (..., T, C); returns y and a backward cache."""
    T = K.shape[-2]
    k = np.moveaxis(K, -2, 0)
    v = np.moveaxis(V, -2, 0)
    decay = w / T
    m_x, (s_num, s_den), (q_num, q_den) = _two_sided([v, np.ones_like(v)], k, decay, True)
    e_self = u + k
    M = np.maximum(m_x, e_self)
    cross = np.exp(m_x - M)
    own = np.exp(e_self - M)
    num = s_num * cross + v * own
    den = s_den * cross + own
    y = num / den
    cache = dict(
        k=k, v=v, y=y, decay=decay, T=T,
        log_den=M + np.log(den), alpha=own / den, cross_frac=cross / den,
        q_num=q_num, q_den=q_den,
    )
    return np.moveaxis(y, 0, -2), cache


def _wkv_backward(G, cache):
    g = np.moveaxis(G, -2, 0)
    k, v, y, T = cache["k"], cache["v"], cache["y"], cache["T"]
    alpha = cache["alpha"]
    # d/da_ti of y_t is (v_i - y_t) / D_t; the transposed sums over t reuse the scan
    m2, (s_g, s_gy), _ = _two_sided([g, g * y], -cache["log_den"], cache["decay"])
    finite = np.isfinite(m2)
    scale = np.where(finite, np.exp(k + np.where(finite, m2, 0.0)), 0.0)
    dv = g * alpha + scale * s_g
    dk = v * dv - (g * y * alpha + scale * s_gy)
    reduce_axes = tuple(range(k.ndim - 1))
    du = np.sum(alpha * g * (v - y), axis=reduce_axes)
    dw = -np.sum(g * cache["cross_frac"] * (cache["q_num"] - y * cache["q_den"]), axis=reduce_axes) / T
    return np.moveaxis(dk, 0, -2), np.moveaxis(dv, 0, -2), dw, du


def bi_wkv_linear(K, V, p: BiWkvParams | None = None, *, w=None, u=None) -> np.ndarray:
    """O(T) bidirectional WKV on plain arrays of shape (..., T, C)."""
    if p is not None:
        w, u = p.w.value, p.u.value
    K, V = np.asarray(K, float), np.asarray(V, float)
    w, u = np.asarray(w, float), np.asarray(u, float)
    _check_kv(K, V, w, u)
    return _wkv_forward(K, V, w, u)[0]


def bi_wkv_quadratic(K, V, p: BiWkvParams | None = None, *, w=None, u=None) -> np.ndarray:
    """Direct O(T^2) evaluation over blocks of query tokens. Reference oracle."""
    if p is not None:
        w, u = p.w.value, p.u.value
    K, V = np.asarray(K, float), np.asarray(V, float)
    w, u = np.asarray(w, float), np.asarray(u, float)
    _check_kv(K, V, w, u)
    T = K.shape[-2]
    out = np.empty_like(V)
    pos = np.arange(T)
    for lo in range(0, T, 64):
        q = pos[lo : lo + 64]
        dist = (np.abs(q[:, None] - pos[None, :]) - 1.0) / T  # (Q, T)
        ex = K[..., None, :, :] - dist[..., None] * w  # (..., Q, T, C)
        ex[..., np.arange(len(q)), q, :] = u + K[..., q, :]
        ex = ex - ex.max(axis=-2, keepdims=True)
        weights = np.exp(ex)
        weights /= weights.sum(axis=-2, keepdims=True)
        # exp of a finite exponent is positive unless it underflows past -745
        assert np.all(weights >= 0)
        assert np.allclose(weights.sum(axis=-2), 1.0, rtol=0, atol=1e-12)
        out[..., q, :] = np.sum(weights * V[..., None, :, :], axis=-2)
    return out


def bi_wkv(K: Node, V: Node, p: BiWkvParams) -> Node:
    """Differentiable bidirectional WKV over nodes of shape (..., T, C)."""
    K, V = ag.const(K), ag.const(V)
    _check_kv(K.value, V.value, p.w.value, p.u.value)
    y, cache = _wkv_forward(K.value, V.value, p.w.value, p.u.value)
    return Node(y, (K, V, p.w, p.u), lambda g: _wkv_backward(g, cache))


# ------------------------------------------------------------------- token shift


def shift_indices(T: int, offsets: Sequence[int] = QSHIFT_OFFSETS) -> list[np.ndarray]:
    """Source token index per channel quarter, clamped at the sequence ends."""
    pos = np.arange(T)
    return [np.clip(pos + off, 0, T - 1) for off in offsets]


def q_shift(X, mu, neighbor_offsets: Sequence[int] = QSHIFT_OFFSETS) -> Node:
    """X + (1 - mu) * X_star, X_star quarter j taken from token t + offset_j."""
    X, mu = ag.const(X), ag.const(mu)
    C = X.shape[-1]
    if C % 4:
        raise ChannelsNotDivisibleBy4(f"q_shift needs C divisible by 4, got {C}")
    if len(neighbor_offsets) != 4:
        raise ValueError("q_shift takes exactly four offsets")
    q = C // 4
    parts = []
    for j, idx in enumerate(shift_indices(X.shape[-2], neighbor_offsets)):
        chunk = ag.index(X, (Ellipsis, slice(j * q, (j + 1) * q)))
        parts.append(ag.take(chunk, idx, axis=-2))
    x_star = ag.concat(parts, axis=-1)
    return X + (1.0 - mu) * x_star


def identity_shift(X: Node) -> Node:
    return X


# --------------------------------------------------------------------- sublayers


def spatial_mix(
    X: Node,
    params: SpatialMixParams,
    shift_fn: ShiftFn,
    on_kv: Callable[[Node, Node], None] | None = None,
) -> Node:
    """Token mixing: sigmoid-gated bidirectional WKV over shifted inputs."""
    xs = shift_fn(X)
    r = xs @ params.W_r
    k = xs @ params.W_k
    v = xs @ params.W_v
    if on_kv is not None:
        on_kv(k, v)
    return (ag.sigmoid(r) * bi_wkv(k, v, params.wkv)) @ params.W_o


def channel_mix(X: Node, params: ChannelMixParams, shift_fn: ShiftFn) -> Node:
    """Per-token feed-forward with squared ReLU and a sigmoid receptance gate."""
    xs = shift_fn(X)
    hidden = ag.square(ag.relu(xs @ params.W_k))
    return ag.sigmoid(xs @ params.W_r) * (hidden @ params.W_v)


# ---------------------------------------------------------------- initialisation


def _dense(rng: np.random.Generator, n_in: int, n_out: int, gain: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, gain / np.sqrt(n_in), size=(n_in, n_out))


def init_spatial_mix(C: int, rng: np.random.Generator, mu_init: float = 0.5) -> SpatialMixParams:
    # spread decays so some channels attend locally and some globally
    w0 = np.linspace(0.0, 8.0, C)
    return SpatialMixParams(
        W_r=ag.parameter(_dense(rng, C, C)),
        W_k=ag.parameter(_dense(rng, C, C)),
        W_v=ag.parameter(_dense(rng, C, C)),
        W_o=ag.parameter(_dense(rng, C, C, gain=0.5)),
        wkv=BiWkvParams(w=ag.parameter(w0), u=ag.parameter(np.full(C, 0.5))),
        mu=ag.parameter(np.full(C, mu_init)),
    )


def init_channel_mix(C: int, rng: np.random.Generator, ratio: int = 4, mu_init: float = 0.5) -> ChannelMixParams:
    H = ratio * C
    return ChannelMixParams(
        W_r=ag.parameter(_dense(rng, C, C)),
        W_k=ag.parameter(_dense(rng, C, H)),
        W_v=ag.parameter(_dense(rng, H, C, gain=0.5)),
        mu=ag.parameter(np.full(C, mu_init)),
    )
