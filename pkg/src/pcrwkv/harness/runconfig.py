from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from ..config import parse_kv_file, render_kv
from ..errors import ConfigError
from ..model import ModelConfig


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 30
    batch_per_domain: int = 4
    lr: float = 1e-4
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda1: float = 1.0
    lambda2: float = 0.3
    kda_start: float = 0.0  # epochs trained with lambda2 = 0
    kda_warmup: float = 0.0  # epochs over which lambda2 then ramps linearly to its value
    kda_momentum: float = 0.0  # running-statistics weight for the alignment loss (0 = per batch)
    stratify: bool = True  # class-balanced slices shared across domains
    val_every: int = 1
    eval_batch: int = 32

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_per_domain < 1:
            raise ConfigError("batch_per_domain must be >= 1")
        if self.lr <= 0 or self.lr_min < 0 or self.lr_min > self.lr:
            raise ConfigError("need 0 <= lr_min <= lr and lr > 0")
        if self.val_every < 1 or self.eval_batch < 1:
            raise ConfigError("val_every and eval_batch must be >= 1")
        if not 0.0 <= self.kda_momentum < 1.0:
            raise ConfigError("kda_momentum must lie in [0, 1)")
        if self.kda_start < 0 or self.kda_warmup < 0:
            raise ConfigError("kda_start and kda_warmup must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    data_root: str
    target: str
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    seed: int = 0
    out_dir: str = "runs/default"

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    def to_text(self) -> str:
        return render_kv(
            {
                "run": {
                    "data_root": self.data_root,
                    "target": self.target,
                    "seed": self.seed,
                    "out_dir": self.out_dir,
                },
                "model": self.model.to_section(),
                "train": {k: getattr(self.train, k) for k in TrainSettings.__dataclass_fields__},
            }
        )


def _train_settings(sec) -> TrainSettings:
    d = TrainSettings()
    kw = {}
    for name, f in TrainSettings.__dataclass_fields__.items():
        default = getattr(d, name)
        if isinstance(default, bool):
            kw[name] = sec.get_bool(name, default)
        elif isinstance(default, int):
            kw[name] = sec.get_int(name, default)
        else:
            kw[name] = sec.get_float(name, default)
    sec.check_unused()
    try:
        return TrainSettings(**kw)
    except ConfigError as exc:
        raise ConfigError(f"{sec.path}: [train] {exc}") from None


def load_run_config(path, seed: int | None = None) -> RunConfig:
    """Parse a run file; relative data/output paths resolve against its directory."""
    path = Path(path)
    cfg = parse_kv_file(path)
    for name in cfg.sections():
        if name not in ("run", "model", "train"):
            raise ConfigError(f"{path}: unknown section [{name}]")
    run = cfg.section("run")
    base = path.parent
    data_root = run.get_str("data_root")
    out_dir = run.get_str("out_dir", "runs/default")
    rc = RunConfig(
        data_root=str((base / data_root).resolve()),
        target=run.get_str("target"),
        seed=run.get_int("seed", 0),
        out_dir=str((base / out_dir).resolve()),
        model=ModelConfig.from_section(cfg.section("model")),
        train=_train_settings(cfg.section("train")),
    )
    run.check_unused()
    if seed is not None:
        rc = rc.with_(seed=seed)
    return rc
