"""Ablation matrix: variants x leave-one-out tasks x seeds, reported like a results table."""

from __future__ import annotations

import csv
import hashlib
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..data import CloudStore
from ..model import ModelConfig
from .evaluate import evaluate
from .runconfig import RunConfig, TrainSettings
from .train import train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    name: str
    shift_mode: str | None = None
    align_mode: str | None = None
    scale: str | None = None  # "base" | "standard" | "large"


SUITES: dict[str, tuple[Variant, ...]] = {
    "modules": (
        Variant("baseline", "qshift", "none"),
        Variant("AGTS", "agt", "none"),
        Variant("KDA", "qshift", "k_only"),
        Variant("AGTS+KDA", "agt", "k_only"),
    ),
    "shift": (
        Variant("KNN-RandOne", "knn_randone", "k_only"),
        Variant("KNN-Avg", "knn_avg", "k_only"),
        Variant("KNN-WAvg", "knn_wavg", "k_only"),
        Variant("AGT-Shift", "agt", "k_only"),
    ),
    "align": (
        Variant("none", "agt", "none"),
        Variant("only-v", "agt", "v_only"),
        Variant("k-and-v", "agt", "k_and_v"),
        Variant("only-k", "agt", "k_only"),
    ),
    "scale": (
        Variant("Base", "agt", "k_only", "base"),
        Variant("Standard", "agt", "k_only", "standard"),
        Variant("Large", "agt", "k_only", "large"),
    ),
}


def scaled_model(cfg: ModelConfig, scale: str | None, n_points: int | None = None) -> ModelConfig:
    """Scale variants relative to ``cfg``: base halves block counts, large widens
    by 1.5x and keeps twice the tokens per stage (capped at the cloud size)."""
    if scale in (None, "standard"):
        return cfg
    if scale == "base":
        return replace(cfg, stage_blocks=tuple(max(1, b // 2) for b in cfg.stage_blocks))
    if scale == "large":
        widths = tuple(int(round(w * 1.5 / 4)) * 4 for w in cfg.stage_widths)
        cap = n_points if n_points is not None else 2 * cfg.stage_points[0]
        points = tuple(min(2 * p, cap) for p in cfg.stage_points)
        return replace(cfg, stage_widths=widths, stage_points=points)
    raise ValueError(f"unknown scale {scale!r}")


def variant_config(base: RunConfig, v: Variant, target: str, seed: int, n_points: int | None = None) -> RunConfig:
    model = base.model
    kw = {}
    if v.shift_mode:
        kw["shift_mode"] = v.shift_mode
    if v.align_mode:
        kw["align_mode"] = v.align_mode
    model = scaled_model(replace(model, **kw), v.scale, n_points)
    return base.with_(model=model, target=target, seed=seed)


def cell_key(rc: RunConfig) -> str:
    # alignment weights cannot affect a run that does not align, so share those cells
    if rc.model.align_mode == "none":
        d = TrainSettings()
        rc = rc.with_(train=replace(rc.train, lambda2=d.lambda2, kda_start=d.kda_start, kda_warmup=d.kda_warmup,
                                         kda_momentum=d.kda_momentum))
    text = rc.with_(out_dir="").to_text()
    return hashlib.sha256(text.encode()).hexdigest()[:20]


def run_cell(rc: RunConfig, cache_dir: str | None = None) -> float:
    """Train on the sources, return target accuracy. Results are cached by config hash."""
    path = Path(cache_dir) / f"{cell_key(rc)}.txt" if cache_dir else None
    if path is not None and path.is_file():
        return float(path.read_text().split()[0])
    store = CloudStore(rc.data_root)
    result = train(rc, store, write=False)
    acc = evaluate(result.model, store, rc.target, rc.train.eval_batch).accuracy
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(f"{acc!r}\n")
        os.replace(tmp, path)
    return acc


def _run_cell_star(args):
    return run_cell(*args)


@dataclass
class AblationRow:
    variant: str
    task_mean: dict[str, float]
    task_std: dict[str, float]
    avg: float
    avg_std: float
    gain: float


@dataclass
class AblationTable:
    suite: str
    tasks: list[str]
    seeds: list[int]
    rows: list[AblationRow]
    cells: dict[tuple[str, str, int], float]  # (variant, task, seed) -> accuracy

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.variant == name:
                return r
        raise KeyError(name)

    def to_text(self) -> str:
        head = ["Variant", *self.tasks, "Avg.", "Gain"]
        lines = []
        for r in self.rows:
            cells = [f"{100 * r.task_mean[t]:.2f}±{100 * r.task_std[t]:.2f}" for t in self.tasks]
            gain = "-" if r is self.rows[0] else f"{100 * r.gain:+.2f}"
            lines.append([r.variant, *cells, f"{100 * r.avg:.2f}±{100 * r.avg_std:.2f}", gain])
        widths = [max(len(str(x)) for x in col) for col in zip(head, *lines)]
        fmt = lambda row: " | ".join(str(x).ljust(w) for x, w in zip(row, widths))  # noqa: E731
        rule = "-+-".join("-" * w for w in widths)
        title = f"suite={self.suite} seeds={','.join(map(str, self.seeds))} (target accuracy %, mean±std over seeds)"
        return "\n".join([title, fmt(head), rule, *map(fmt, lines)]) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"ablation_{self.suite}.txt").write_text(self.to_text())
        with open(out / f"ablation_{self.suite}_cells.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["suite", "variant", "task", "seed", "accuracy"])
            for (v, t, s), acc in sorted(self.cells.items(), key=lambda kv: (self._order(kv[0][0]), kv[0][1:])):
                w.writerow([self.suite, v, t, s, repr(acc)])
        with open(out / f"ablation_{self.suite}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", *[f"{t}_mean" for t in self.tasks], *[f"{t}_std" for t in self.tasks],
                        "avg", "avg_std", "gain"])
            for r in self.rows:
                w.writerow([r.variant, *[repr(r.task_mean[t]) for t in self.tasks],
                            *[repr(r.task_std[t]) for t in self.tasks], repr(r.avg), repr(r.avg_std), repr(r.gain)])

    def _order(self, name):
        return [r.variant for r in self.rows].index(name)


def summarize(suite: str, variants, tasks, seeds, cells) -> AblationTable:
    rows = []
    for v in variants:
        acc = np.array([[cells[(v.name, t, s)] for s in seeds] for t in tasks])  # (tasks, seeds)
        task_mean = acc.mean(axis=1)
        per_seed_avg = acc.mean(axis=0)
        rows.append(
            AblationRow(
                variant=v.name,
                task_mean=dict(zip(tasks, task_mean.tolist())),
                task_std=dict(zip(tasks, acc.std(axis=1).tolist())),
                avg=float(np.mean(task_mean)),
                avg_std=float(per_seed_avg.std()),
                gain=0.0,
            )
        )
    for r in rows:
        r.gain = r.avg - rows[0].avg
    rows[0].gain = 0.0
    return AblationTable(suite, list(tasks), list(seeds), rows, dict(cells))


def ablate(
    base: RunConfig,
    suite: str,
    seeds=(0, 1, 2),
    tasks=None,
    jobs: int = 1,
    cache_dir: str | None = None,
    variants=None,
) -> AblationTable:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    variants = tuple(variants or SUITES[suite])
    store = CloudStore(base.data_root)
    manifest = store.manifest()
    tasks = list(tasks or manifest.domain_names)
    jobs_list = []
    keys = []
    for v in variants:
        for t in tasks:
            for s in seeds:
                keys.append((v.name, t, s))
                jobs_list.append((variant_config(base, v, t, s, manifest.points), cache_dir))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            accs = list(pool.map(_run_cell_star, jobs_list))
    else:
        accs = []
        for key, args in zip(keys, jobs_list):
            accs.append(run_cell(*args))
            log.info("%s task=%s seed=%s acc=%.4f", *key, accs[-1])
    return summarize(suite, variants, tasks, list(seeds), dict(zip(keys, accs)))
