"""Finite-difference checks of every differentiable operation, as one table.

Each entry maps an operation name to ``(make, trials, eps)`` where ``make(rng)``
builds one random case as ``(loss_fn, nodes)``. Derivatives use the 4-point
central stencil so that a large step keeps cancellation small on entries with
tiny gradients. Cases keep kinks (relu at 0, max ties) at least 10x the step
away. :func:`run_suite` reports the worst elementwise relative error per entry.
"""

import numpy as np
from scipy import sparse

from pcrwkv import rwkv_core as rk
from pcrwkv.agt_shift import AgtConfig, agt_shift, knn_shift
from pcrwkv.dg_losses import cd_kda_loss, cross_entropy, domain_stats, key_stats
from pcrwkv.model import downsample, embed, init_params, layer_norm, ModelConfig
from pcrwkv.numerics import ag, check_grads, const, parameter


def _away(x, point, gap):
    return np.where(np.abs(x - point) < gap, point + gap * np.sign(x - point + 1e-300), x)


def _case_unary(op, prep=lambda v: v):
    def make(rng):
        x = parameter(prep(rng.uniform(-2, 2, size=(3, 2))))
        w = rng.normal(size=(3, 2))
        return (lambda: ag.sum(ag.elementwise(op, x) * const(w))), [x]

    return make


def _case_binary(op):
    def make(rng):
        a = parameter(rng.uniform(-2, 2, size=(2, 3)))
        b = rng.uniform(-2, 2, size=(3,))
        if op == "div":
            b = _away(b, 0.0, 0.3)
        b = parameter(b)
        return (lambda: ag.sum(ag.square(ag.elementwise(op, a, b)))), [a, b]

    return make


def _case_matmul(rng):
    a, b = parameter(rng.uniform(-2, 2, (2, 4, 3))), parameter(rng.uniform(-2, 2, (3, 2)))
    return (lambda: ag.sum(ag.square(a @ b))), [a, b]


def _separated(rng, shape, gap=0.2):
    """Values in about [-2, 2] whose pairwise gaps are at least ``gap``."""
    n = int(np.prod(shape))
    base = (rng.permutation(n) - (n - 1) / 2) * gap
    return (base + rng.uniform(-0.02, 0.02, n) * gap).reshape(shape)


def _case_reduce(op):
    def make(rng):
        x = parameter(_separated(rng, (4, 3), 0.3))
        w = rng.normal(size=3)
        return (lambda: ag.sum(ag.reduce(op, x, axis=0) * const(w))), [x]

    return make


def _case_shape(rng):
    x = parameter(rng.uniform(-2, 2, (3, 4)))
    y = parameter(rng.uniform(-2, 2, (3, 2)))
    idx = rng.integers(0, 4, size=5)
    rows = rng.integers(0, 4, size=(3, 4))

    def loss():
        t = ag.reshape(ag.swapaxes(x, 0, 1), (2, 6))
        g = ag.gather_rows(ag.reshape(x, (3, 4, 1)), rows)
        return (
            ag.sum(ag.square(t))
            + ag.sum(ag.square(ag.take(x, idx, axis=1)))
            + ag.sum(ag.square(g))
            + ag.sum(ag.square(ag.concat([x, y], axis=1)[1:, ::2]))
        )

    return loss, [x, y]


def _case_sparse(rng):
    m = sparse.random(5, 4, density=0.5, random_state=int(rng.integers(1 << 30)), format="csr")
    x = parameter(rng.uniform(-2, 2, (4, 3)))
    f = parameter(_separated(rng, (6, 3)))
    seg = np.array([0, 1, 0, 2, 1, 2])
    w = rng.normal(size=(3, 3))
    return (lambda: ag.sum(ag.square(ag.spmm(m, x))) + ag.sum(ag.segment_max(f, seg, 3) * const(w))), [x, f]


def _case_bi_wkv(rng):
    T = int(rng.integers(1, 9))
    K, V = parameter(rng.uniform(-2, 2, (T, 3))), parameter(rng.uniform(-2, 2, (T, 3)))
    p = rk.BiWkvParams(parameter(rng.uniform(0, 2, 3)), parameter(rng.uniform(-2, 2, 3)))
    G = rng.normal(size=(T, 3))
    return (lambda: ag.sum(rk.bi_wkv(K, V, p) * const(G))), [K, V, p.w, p.u]


def _case_q_shift(rng):
    X, mu = parameter(rng.normal(size=(5, 8))), parameter(rng.random(8))
    G = rng.normal(size=(5, 8))
    return (lambda: ag.sum(rk.q_shift(X, mu) * const(G))), [X, mu]


def _case_agt(rng):
    pts = rng.random((20, 3))
    F = parameter(rng.normal(size=(20, 8)))
    G = rng.normal(size=(20, 8))
    return (lambda: ag.sum(agt_shift(F, pts, AgtConfig(h=0.4)) * const(G))), [F]


def _case_knn(rng):
    pts = rng.random((20, 3))
    F = parameter(rng.normal(size=(20, 8)))
    G = rng.normal(size=(20, 8))
    return (lambda: ag.sum(knn_shift(F, pts, 4, "WAvg") * const(G))), [F]


def _case_spatial(rng):
    p = rk.init_spatial_mix(8, rng)
    X = parameter(rng.normal(size=(6, 8)))
    return (lambda: ag.sum(rk.spatial_mix(X, p, lambda Z: rk.q_shift(Z, p.mu)))), [X, *p.named().values()]


def _case_channel(rng):
    p = rk.init_channel_mix(8, rng, ratio=2)
    # redraw inputs until no squared-relu pre-activation sits within reach of the stencil
    while True:
        X = parameter(rng.normal(size=(5, 8)))
        if np.min(np.abs(rk.q_shift(X, p.mu).value @ p.W_k.value)) > 0.05:
            break
    return (lambda: ag.sum(rk.channel_mix(X, p, lambda Z: rk.q_shift(Z, p.mu)))), [X, *p.named().values()]


def _case_layer_norm(rng):
    x, g, b = parameter(rng.normal(size=(4, 6))), parameter(rng.normal(size=6)), parameter(rng.normal(size=6))
    W = rng.normal(size=(4, 6))
    return (lambda: ag.sum(layer_norm(x, g, b) * const(W))), [x, g, b]


def _case_embed_downsample(rng):
    P = {k: v for k, v in init_params(ModelConfig(stage_widths=(16, 16, 16, 16)), 0).items() if k.startswith("embed")}
    for v in P.values():
        v.value = v.value + rng.normal(size=v.shape) * 0.1
    X = rng.uniform(-1, 1, (8, 3))
    W, b = parameter(rng.normal(size=(16, 4))), parameter(rng.normal(size=4))
    G = rng.normal(size=(4, 4))
    return (lambda: ag.sum(downsample(X, embed(X, P), 4, W, b)[1] * const(G))), [*P.values(), W, b]


def _case_kda(rng):
    A, B = parameter(rng.normal(size=(4, 3))), parameter(rng.normal(size=(4, 3)))
    return (lambda: cd_kda_loss(domain_stats({0: A, 1: B}))), [A, B]


def _case_key_stats(rng):
    K = parameter(rng.normal(size=(5, 3)))
    W = rng.normal(size=(3, 3))
    return (lambda: ag.sum(key_stats(K)[1] * const(W)) + ag.sum(ag.square(key_stats(K)[0]))), [K]


def _case_cross_entropy(rng):
    L = parameter(rng.normal(size=(4, 5)) * 3)
    y = rng.integers(0, 5, size=4)
    return (lambda: cross_entropy(L, y)), [L]


SUITE = {
    "exp": (_case_unary("exp"), 100, 1e-3),
    "log": (_case_unary("log", lambda v: np.abs(v) + 0.1), 100, 1e-3),
    "relu": (_case_unary("relu", lambda v: _away(v, 0.0, 0.05)), 100, 1e-3),
    "sigmoid": (_case_unary("sigmoid"), 100, 1e-3),
    "square": (_case_unary("square"), 100, 1e-3),
    "sqrt": (_case_unary("sqrt", lambda v: np.abs(v) + 0.1), 100, 1e-3),
    "neg": (_case_unary("neg"), 100, 1e-3),
    "add": (_case_binary("add"), 100, 1e-3),
    "sub": (_case_binary("sub"), 100, 1e-3),
    "mul": (_case_binary("mul"), 100, 1e-3),
    "div": (_case_binary("div"), 100, 1e-3),
    "matmul": (_case_matmul, 100, 1e-3),
    "sum": (_case_reduce("sum"), 100, 1e-3),
    "mean": (_case_reduce("mean"), 100, 1e-3),
    "max": (_case_reduce("max"), 100, 1e-3),
    "reshape/swapaxes/take/gather/concat/index": (_case_shape, 100, 1e-3),
    "spmm/segment_max": (_case_sparse, 100, 1e-3),
    "bi_wkv": (_case_bi_wkv, 25, 1e-3),
    "q_shift": (_case_q_shift, 25, 1e-3),
    "agt_shift": (_case_agt, 25, 1e-3),
    "knn_shift": (_case_knn, 25, 1e-3),
    "spatial_mix": (_case_spatial, 10, 1e-3),
    "channel_mix": (_case_channel, 10, 1e-3),
    "layer_norm": (_case_layer_norm, 25, 1e-3),
    "embed+downsample": (_case_embed_downsample, 10, 1e-5),
    "key_stats": (_case_key_stats, 25, 1e-3),
    "cd_kda": (_case_kda, 25, 1e-3),
    "cross_entropy": (_case_cross_entropy, 25, 1e-3),
}




def run_suite(rng, scale: float = 1.0) -> dict[str, float]:
    """Worst elementwise error per entry; ``scale`` multiplies every trial count."""
    worst = {}
    for name, (make, trials, eps) in SUITE.items():
        err = 0.0
        for _ in range(max(1, int(round(trials * scale)))):
            loss, nodes = make(rng)
            err = max(err, check_grads(loss, nodes, eps=eps, points=4).elementwise)
        worst[name] = err
    return worst
