"""Shared full-model gradient check (used by unit and acceptance tests)."""

import numpy as np

from pcrwkv.dg_losses import KeyCollector, alignment_target, cross_entropy, total_loss
from pcrwkv.model import Model, ModelConfig
from pcrwkv.numerics import backward, check_grads, make_rng

TINY = dict(stage_widths=(8, 8, 16, 16), stage_points=(32, 16, 8, 4), head_init="random")


def tiny_model(shift_mode="qshift", align_mode="k_only", seed=1, **kw) -> Model:
    cfg = ModelConfig(**{**TINY, **kw}, shift_mode=shift_mode, align_mode=align_mode)
    return Model(cfg, seed=seed)


def model_grad_errors(model: Model, per_tensor: int = 16, eps: float = 1e-5, seed: int = 0):
    """Worst relative gradient error per parameter tensor on a 2-sample batch with N=64.

    Each tensor is checked on ``per_tensor`` random entries (all of them if smaller).
    Returns {name: (normwise, elementwise)} over the checked entries.
    """
    rng = make_rng(seed)
    X = rng.uniform(-1, 1, size=(2, 64, 3))
    y = np.array([0, model.cfg.num_classes - 2])
    mode = model.cfg.align_mode

    def loss():
        col = KeyCollector(keep_values=mode in ("v_only", "k_and_v"))
        r = model.forward(X, col, domains=[0, 1], rng=make_rng(7))
        return total_loss(cross_entropy(r.logits, y), alignment_target(mode, col), 1.0, 0.3)

    out = {}
    for name, p in model.params.items():
        rep = check_grads(loss, [p], eps=eps, max_entries=per_tensor, rng=rng)
        out[name] = (rep.normwise, rep.elementwise)
    return out


def directional_error(model: Model, eps: float = 1e-5, seed: int = 0) -> float:
    """Relative error of g . d against a central difference along one random direction d over every parameter."""
    rng = make_rng(seed)
    X = rng.uniform(-1, 1, size=(2, 64, 3))
    y = np.array([1, 3])

    def loss():
        col = KeyCollector()
        r = model.forward(X, col, domains=[0, 1], rng=make_rng(7))
        return total_loss(cross_entropy(r.logits, y), alignment_target(model.cfg.align_mode, col), 1.0, 0.3)

    model.zero_grad()
    backward(loss())
    dirs = {k: rng.normal(size=p.value.shape) for k, p in model.params.items()}
    analytic = sum(float(np.sum(p.grad * dirs[k])) for k, p in model.params.items())
    base = {k: p.value.copy() for k, p in model.params.items()}
    vals = []
    for sgn in (1, -1):
        for k, p in model.params.items():
            p.value = base[k] + sgn * eps * dirs[k]
        vals.append(float(loss().value))
    for k, p in model.params.items():
        p.value = base[k]
    numeric = (vals[0] - vals[1]) / (2 * eps)
    return abs(analytic - numeric) / max(abs(numeric), 1e-12)
