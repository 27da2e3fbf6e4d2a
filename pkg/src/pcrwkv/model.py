"""Hierarchical RWKV point-cloud classifier.

Per forward pass: Morton-sort the points, lift xyz to features, then for each
stage farthest-point downsample (max-pool each anchor's nearest-point
partition, project to the stage width) and run pre-norm residual RWKV blocks.
Tokens of the last stage are pooled with concat(mean, max) into a linear head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import agt_shift as agts
from . import rwkv_core as rk
from .agt_shift import AgtConfig
from .config import Section
from .dg_losses import ALIGN_MODES, KeyCollector
from .errors import CheckpointError, ConfigError, CoordOutOfRange, MTooLarge, ShapeMismatch
from .numerics import ag, make_rng
from .numerics.autograd import Node
from .numerics.checkpoint import load_checkpoint, save_checkpoint

SHIFT_MODES = ("qshift", "agt", "knn_randone", "knn_avg", "knn_wavg")
_KNN_STRATEGY = {"knn_randone": "RandOne", "knn_avg": "Avg", "knn_wavg": "WAvg"}


@dataclass(frozen=True)
class ModelConfig:
    stage_blocks: tuple[int, ...] = (1, 1, 2, 2)
    stage_widths: tuple[int, ...] = (32, 64, 128, 128)
    stage_points: tuple[int, ...] = (512, 256, 128, 64)
    num_classes: int = 5
    shift_mode: str = "qshift"
    align_mode: str = "none"
    agt: AgtConfig = field(default_factory=AgtConfig)
    agt_in_channel_mix: bool = True
    # grow the hashing cell with the typical spacing of the downsampled tokens
    agt_scale_cells: bool = True
    knn_k: int = 8
    ffn_ratio: int = 4
    mu_init: float = 0.5
    head_init: str = "zero"

    def __post_init__(self):
        for name in ("stage_blocks", "stage_widths", "stage_points"):
            object.__setattr__(self, name, tuple(int(x) for x in getattr(self, name)))
        n = len(self.stage_blocks)
        if n != 4 or len(self.stage_widths) != n or len(self.stage_points) != n:
            raise ConfigError("stage_blocks, stage_widths and stage_points need 4 entries each")
        if any(b < 1 for b in self.stage_blocks):
            raise ConfigError("every stage needs at least one block")
        if any(a > b for a, b in zip(self.stage_widths, self.stage_widths[1:])):
            raise ConfigError("stage widths must be nondecreasing")
        if any(a < b for a, b in zip(self.stage_points, self.stage_points[1:])):
            raise ConfigError("stage points must be nonincreasing")
        if self.shift_mode == "qshift" and any(c % 4 for c in self.stage_widths):
            raise ConfigError("q-shift needs stage widths divisible by 4")
        if self.shift_mode not in SHIFT_MODES:
            raise ConfigError(f"shift_mode must be one of {SHIFT_MODES}")
        if self.align_mode not in ALIGN_MODES:
            raise ConfigError(f"align_mode must be one of {ALIGN_MODES}")
        if self.head_init not in ("zero", "random"):
            raise ConfigError("head_init must be 'zero' or 'random'")

    @classmethod
    def base(cls, **kw) -> "ModelConfig":
        return cls(stage_blocks=(1, 1, 1, 1), **kw)

    @classmethod
    def standard(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def large(cls, **kw) -> "ModelConfig":
        return cls(stage_widths=(48, 96, 192, 192), stage_points=(1024, 512, 256, 128), **kw)

    def to_section(self) -> dict:
        d = asdict(self)
        agt = d.pop("agt")
        d["agt_h"] = agt["h"]
        d["agt_lambda"] = agt["lam"]
        d["agt_c_prime"] = "half" if agt["c_prime"] is None else agt["c_prime"]
        return d

    @classmethod
    def from_section(cls, sec: Section) -> "ModelConfig":
        d = cls()
        cp_raw = sec.get_str("agt_c_prime", "half")
        try:
            cp = None if cp_raw == "half" else int(cp_raw)
            agt = AgtConfig(
                h=sec.get_float("agt_h", d.agt.h),
                lam=sec.get_float("agt_lambda", d.agt.lam),
                c_prime=cp,
            )
        except ValueError as exc:
            raise ConfigError(f"{sec.path}: [{sec.name}] agt: {exc}") from None
        try:
            cfg = cls(
                stage_blocks=tuple(sec.get_ints("stage_blocks", list(d.stage_blocks))),
                stage_widths=tuple(sec.get_ints("stage_widths", list(d.stage_widths))),
                stage_points=tuple(sec.get_ints("stage_points", list(d.stage_points))),
                num_classes=sec.get_int("num_classes", d.num_classes),
                shift_mode=sec.get_str("shift_mode", d.shift_mode),
                align_mode=sec.get_str("align_mode", d.align_mode),
                agt=agt,
                agt_in_channel_mix=sec.get_bool("agt_in_channel_mix", d.agt_in_channel_mix),
                agt_scale_cells=sec.get_bool("agt_scale_cells", d.agt_scale_cells),
                knn_k=sec.get_int("knn_k", d.knn_k),
                ffn_ratio=sec.get_int("ffn_ratio", d.ffn_ratio),
                mu_init=sec.get_float("mu_init", d.mu_init),
                head_init=sec.get_str("head_init", d.head_init),
            )
        except ConfigError as exc:
            raise ConfigError(f"{sec.path}: [{sec.name}] {exc}") from None
        sec.check_unused()
        return cfg


# ------------------------------------------------------------------ ordering


def _spread_bits(v: np.ndarray) -> np.ndarray:
    """Insert two zero bits between each of the low 10 bits."""
    v = v.astype(np.uint64) & np.uint64(0x3FF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x030000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x0300F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x030C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x09249249)
    return v


def quantize(coords: np.ndarray, bits: int = 10) -> np.ndarray:
    levels = 1 << bits
    q = np.floor((np.asarray(coords, dtype=float) + 1.0) * 0.5 * levels).astype(np.int64)
    return np.clip(q, 0, levels - 1)


def morton_codes(coords) -> np.ndarray:
    """30-bit codes, x in bit 0 of each 3-bit group, then y, then z."""
    coords = np.asarray(coords, dtype=float)
    if np.any(~np.isfinite(coords)) or np.any(np.abs(coords) > 1.0):
        raise CoordOutOfRange("Morton ordering needs coordinates in [-1, 1]^3")
    q = quantize(coords)
    return (
        _spread_bits(q[..., 0])
        | (_spread_bits(q[..., 1]) << np.uint64(1))
        | (_spread_bits(q[..., 2]) << np.uint64(2))
    )


def morton_order(coords) -> np.ndarray:
    """Stable permutation sorting points by Morton code (ties keep input order)."""
    return np.argsort(morton_codes(coords), kind="stable")


def fit_unit_cube(coords: np.ndarray) -> np.ndarray:
    """Shrink a cloud (never grow it) so every coordinate lies in [-1, 1]."""
    m = np.max(np.abs(coords), axis=(-2, -1), keepdims=True)
    return coords / np.maximum(m, 1.0)


# --------------------------------------------------------------- downsampling


def farthest_point_sample(coords: np.ndarray, m: int) -> np.ndarray:
    """Greedy FPS from index 0 for (N, 3) or (B, N, 3); returns (..., m) indices."""
    coords = np.asarray(coords, dtype=float)
    single = coords.ndim == 2
    pts = coords[None] if single else coords
    B, N, _ = pts.shape
    if m > N or m < 1:
        raise MTooLarge(f"cannot pick {m} anchors from {N} points")
    chosen = np.zeros((B, m), dtype=np.int64)
    best = np.full((B, N), np.inf)
    cur = np.zeros(B, dtype=np.int64)
    rows = np.arange(B)
    for i in range(m):
        chosen[:, i] = cur
        d = np.sum((pts - pts[rows, cur][:, None, :]) ** 2, axis=-1)
        np.minimum(best, d, out=best)
        best[rows, cur] = -1.0  # picked points can never be picked again
        cur = np.argmax(best, axis=1)
    return chosen[0] if single else chosen


def nearest_anchor(coords: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Index (into ``anchors``) of each point's nearest anchor, lowest index on ties.

    ``anchors`` are point indices, so every anchor is assigned to itself.
    """
    B, N, _ = coords.shape
    rows = np.arange(B)[:, None]
    a_xyz = coords[rows, anchors]  # (B, m, 3)
    d = np.sum((coords[:, :, None, :] - a_xyz[:, None, :, :]) ** 2, axis=-1)
    assign = np.argmin(d, axis=2)
    assign[rows, anchors] = np.arange(anchors.shape[1])[None, :]
    return assign


def downsample(coords, F, m: int, W=None, b=None):
    """Farthest-point anchors, max-pool of each anchor's partition, optional projection.

    Works on one cloud ((N, 3), (N, C)) or a batch ((B, N, 3), (B, N, C)).
    Anchors are returned in ascending index order so a sorted sequence stays sorted.
    """
    coords = np.asarray(coords, dtype=float)
    F = ag.const(F)
    single = coords.ndim == 2
    if single:
        coords = coords[None]
        F = ag.reshape(F, (1,) + F.shape)
    B, N, _ = coords.shape
    if F.shape[:2] != (B, N):
        raise ShapeMismatch(f"features {F.shape} vs coords {coords.shape}")
    if m > N:
        raise MTooLarge(f"cannot keep {m} of {N} points")
    anchors = np.sort(farthest_point_sample(coords, m), axis=1)
    assign = nearest_anchor(coords, anchors)
    seg = (assign + (np.arange(B) * m)[:, None]).reshape(-1)
    C = F.shape[-1]
    pooled = ag.segment_max(ag.reshape(F, (B * N, C)), seg, B * m)
    out = ag.reshape(pooled, (B, m, C))
    if W is not None:
        out = out @ W
    if b is not None:
        out = out + b
    new_coords = coords[np.arange(B)[:, None], anchors]
    if single:
        return new_coords[0], ag.reshape(out, out.shape[1:])
    return new_coords, out


# ------------------------------------------------------------------- modules


def layer_norm(x: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
    mu = ag.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = ag.mean(ag.square(centered), axis=-1, keepdims=True)
    return centered / ag.sqrt(var + eps) * gain + bias


def embed(coords, params: dict[str, Node]) -> Node:
    """Shared per-point MLP 3 -> C0 -> C0."""
    x = ag.const(np.asarray(coords, dtype=float))
    h = ag.relu(x @ params["embed.W1"] + params["embed.b1"])
    return h @ params["embed.W2"] + params["embed.b2"]


def _dense(rng, n_in, n_out, gain=1.0):
    return rng.normal(0.0, gain / np.sqrt(n_in), size=(n_in, n_out))


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Node]:
    rng = make_rng(seed)
    p: dict[str, np.ndarray] = {}
    c0 = cfg.stage_widths[0]
    p["embed.W1"] = _dense(rng, 3, c0, gain=2.0)
    p["embed.b1"] = np.zeros(c0)
    p["embed.W2"] = _dense(rng, c0, c0)
    p["embed.b2"] = np.zeros(c0)
    c_prev = c0
    for s, (nb, C) in enumerate(zip(cfg.stage_blocks, cfg.stage_widths)):
        p[f"stage{s}.down.W"] = _dense(rng, c_prev, C)
        p[f"stage{s}.down.b"] = np.zeros(C)
        for blk in range(nb):
            pre = f"stage{s}.block{blk}"
            p[f"{pre}.ln1.g"] = np.ones(C)
            p[f"{pre}.ln1.b"] = np.zeros(C)
            for k, node in rk.init_spatial_mix(C, rng, cfg.mu_init).named().items():
                p[f"{pre}.spatial.{k}"] = node.value
            p[f"{pre}.ln2.g"] = np.ones(C)
            p[f"{pre}.ln2.b"] = np.zeros(C)
            for k, node in rk.init_channel_mix(C, rng, cfg.ffn_ratio, cfg.mu_init).named().items():
                p[f"{pre}.channel.{k}"] = node.value
        c_prev = C
    p["head.ln.g"] = np.ones(2 * c_prev)
    p["head.ln.b"] = np.zeros(2 * c_prev)
    if cfg.head_init == "zero":
        p["head.W"] = np.zeros((2 * c_prev, cfg.num_classes))
    else:
        p["head.W"] = _dense(rng, 2 * c_prev, cfg.num_classes)
    p["head.b"] = np.zeros(cfg.num_classes)
    return {k: ag.parameter(v, name=k) for k, v in p.items()}


def param_count(cfg: ModelConfig) -> int:
    return int(sum(v.value.size for v in init_params(cfg, 0).values()))


def _spatial(params, pre) -> rk.SpatialMixParams:
    g = lambda k: params[f"{pre}.spatial.{k}"]  # noqa: E731
    return rk.SpatialMixParams(
        g("W_r"), g("W_k"), g("W_v"), g("W_o"), rk.BiWkvParams(g("w"), g("u")), g("mu")
    )


def _channel(params, pre) -> rk.ChannelMixParams:
    g = lambda k: params[f"{pre}.channel.{k}"]  # noqa: E731
    return rk.ChannelMixParams(g("W_r"), g("W_k"), g("W_v"), g("mu"))


@dataclass
class ForwardResult:
    logits: Node  # (B, K)
    embedding: Node  # (B, 2 C_last), pooled features fed to the head


class Model:
    """Parameters plus configuration; forward passes run on batches of equal-size clouds."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, params: dict[str, Node] | None = None):
        self.cfg = cfg
        self.seed = seed
        self.params = params if params is not None else init_params(cfg, seed)

    # -- parameters
    def parameters(self) -> list[Node]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def project(self) -> None:
        """Keep the shift mixing coefficients inside [0, 1] after an optimizer step."""
        for name, p in self.params.items():
            if name.endswith(".mu"):
                np.clip(p.value, 0.0, 1.0, out=p.value)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise CheckpointError(f"checkpoint/config mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, p in self.params.items():
            if state[k].shape != p.value.shape:
                raise CheckpointError(f"checkpoint/config mismatch for {k}: {state[k].shape} vs {p.value.shape}")
            p.value = np.array(state[k], dtype=np.float64)
            p.zero_grad()

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())

    @classmethod
    def load(cls, path, cfg: ModelConfig) -> "Model":
        m = cls(cfg)
        m.load_state_dict(load_checkpoint(path))
        return m

    # -- forward
    def _shift_fns(self, coords: np.ndarray, stage: int, C: int, rng):
        cfg = self.cfg
        if cfg.shift_mode == "qshift":
            return None
        B, N, _ = coords.shape
        if cfg.shift_mode == "agt":
            h = cfg.agt.h
            if cfg.agt_scale_cells:
                h *= float(np.sqrt(cfg.stage_points[0] / N))
            op = agts.agt_operator(coords, h)
        else:
            k = min(cfg.knn_k, N - 1)
            op = agts.knn_operator(coords, k, _KNN_STRATEGY[cfg.shift_mode], rng)
        cp = cfg.agt.channels(C)
        return lambda X: agts.apply_operator(X, op, cfg.agt.lam, cp)

    def forward(
        self,
        coords,
        collector: KeyCollector | None = None,
        domains: Sequence[int] | None = None,
        rng: np.random.Generator | None = None,
    ) -> ForwardResult:
        """Logits for a batch of clouds, coords (B, N, 3) (or one cloud (N, 3))."""
        cfg, P = self.cfg, self.params
        coords = np.asarray(coords, dtype=float)
        if coords.ndim == 2:
            coords = coords[None]
        B, N, _ = coords.shape
        if cfg.stage_points[0] > N:
            raise MTooLarge(f"first stage keeps {cfg.stage_points[0]} tokens but clouds have {N} points")
        if rng is None:
            rng = make_rng(self.seed)
        order = np.stack([morton_order(c) for c in fit_unit_cube(coords)])
        coords = coords[np.arange(B)[:, None], order]
        x = embed(coords, P)
        layer = 0
        for s, (nb, C, m) in enumerate(zip(cfg.stage_blocks, cfg.stage_widths, cfg.stage_points)):
            coords, x = downsample(coords, x, m, P[f"stage{s}.down.W"], P[f"stage{s}.down.b"])
            shift = self._shift_fns(coords, s, C, rng)
            for blk in range(nb):
                pre = f"stage{s}.block{blk}"
                sm = _spatial(P, pre)
                cm = _channel(P, pre)
                spatial_shift = shift or (lambda X, mu=sm.mu: rk.q_shift(X, mu))
                if shift is not None and cfg.agt_in_channel_mix:
                    channel_shift = shift
                else:
                    channel_shift = lambda X, mu=cm.mu: rk.q_shift(X, mu)  # noqa: E731
                hook = None
                if collector is not None:
                    if domains is None:
                        raise ValueError("collecting keys needs per-sample domain ids")
                    hook = collector.hook(layer, domains)
                h = layer_norm(x, P[f"{pre}.ln1.g"], P[f"{pre}.ln1.b"])
                x = x + rk.spatial_mix(h, sm, spatial_shift, hook)
                h = layer_norm(x, P[f"{pre}.ln2.g"], P[f"{pre}.ln2.b"])
                x = x + rk.channel_mix(h, cm, channel_shift)
                layer += 1
        pooled = ag.concat([ag.mean(x, axis=1), ag.max(x, axis=1)], axis=-1)
        z = layer_norm(pooled, P["head.ln.g"], P["head.ln.b"])
        logits = z @ P["head.W"] + P["head.b"]
        return ForwardResult(logits=logits, embedding=pooled)

    def logits(self, coords, rng=None) -> np.ndarray:
        return self.forward(coords, rng=rng).logits.value

    def predict(self, coords, rng=None) -> np.ndarray:
        """Class ids; np.argmax picks the lowest index among tied logits."""
        return np.argmax(self.logits(coords, rng=rng), axis=-1)


def predict_from_logits(logits) -> int:
    return int(np.argmax(np.asarray(logits)))


def with_modes(cfg: ModelConfig, shift_mode: str | None = None, align_mode: str | None = None) -> ModelConfig:
    kw = {}
    if shift_mode is not None:
        kw["shift_mode"] = shift_mode
    if align_mode is not None:
        kw["align_mode"] = align_mode
    return replace(cfg, **kw)
