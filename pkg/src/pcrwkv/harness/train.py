"""Source-domain training loop with per-step domain-balanced batches."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..data import CloudStore, parse_sample_id, preprocess
from ..dg_losses import KeyCollector, alignment_target, cross_entropy, total_loss
from ..model import Model
from ..numerics import AdamWState, adamw_step, ag, cosine_lr, derive_seed, make_rng
from ..numerics.checkpoint import encode
from .runconfig import RunConfig

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "steps", "lr", "cls_loss", "kda_loss", "total_loss", "val_acc", "seconds")


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    lr: float
    cls_loss: float
    kda_loss: float
    total_loss: float
    val_acc: float
    seconds: float


@dataclass
class TrainResult:
    model: Model  # holds the best-validation parameters
    history: list[EpochRecord]
    best_epoch: int
    best_val_acc: float
    step_losses: list[tuple[float, float, float]] = field(default_factory=list)
    checkpoint: bytes = b""


def kda_ramp(step: int, start: float, warmup: float) -> float:
    """Alignment weight multiplier: 0 before ``start`` steps, then linear to 1 over ``warmup`` steps."""
    if step < start:
        return 0.0
    if warmup <= 0:
        return 1.0
    return min(1.0, (step - start + 1) / warmup)


def group_by_domain(ids: list[str]) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for sid in ids:
        out.setdefault(parse_sample_id(sid)[0], []).append(sid)
    return out


def epoch_order(by_domain: dict[str, list[str]], rng, stratify: bool = True) -> dict[str, list[str]]:
    """Per-domain sample order for one epoch.

    With ``stratify`` the order runs in rounds; each round takes one unseen
    sample of every class in a class order shared by all domains, so equal
    slices of every domain carry the same class mix.
    """
    domains = sorted(by_domain)
    if not stratify:
        return {d: [by_domain[d][j] for j in rng.permutation(len(by_domain[d]))] for d in domains}
    pools = {}
    for d in domains:
        per_class: dict[str, list[str]] = {}
        for sid in by_domain[d]:
            per_class.setdefault(parse_sample_id(sid)[2], []).append(sid)
        pools[d] = {c: [ids[j] for j in rng.permutation(len(ids))] for c, ids in sorted(per_class.items())}
    classes = sorted({c for p in pools.values() for c in p})
    rounds = max(len(ids) for p in pools.values() for ids in p.values())
    out: dict[str, list[str]] = {d: [] for d in domains}
    for r in range(rounds):
        for ci in rng.permutation(len(classes)):
            c = classes[ci]
            for d in domains:
                ids = pools[d].get(c, [])
                if r < len(ids):
                    out[d].append(ids[r])
    return out


def load_batch(store: CloudStore, ids, train: bool, rng=None):
    clouds = [preprocess(store.load(i), train=train, rng=rng) for i in ids]
    coords = np.stack([c.coords for c in clouds])
    labels = np.array([c.label for c in clouds])
    domains = np.array([c.domain_id for c in clouds])
    return coords, labels, domains


def predict_ids(model: Model, store: CloudStore, ids, batch: int, seed: int = 0):
    """Logits and pooled embeddings for ``ids`` in eval mode."""
    logits, embeds, labels = [], [], []
    rng = make_rng(derive_seed("eval", seed))
    for start in range(0, len(ids), batch):
        coords, lab, _ = load_batch(store, ids[start : start + batch], train=False)
        res = model.forward(coords, rng=rng)
        logits.append(res.logits.value)
        embeds.append(res.embedding.value)
        labels.append(lab)
    if not logits:
        return np.zeros((0, model.cfg.num_classes)), np.zeros((0, 0)), np.zeros(0, dtype=int)
    return np.concatenate(logits), np.concatenate(embeds), np.concatenate(labels)


def accuracy(model: Model, store: CloudStore, ids, batch: int) -> float:
    logits, _, labels = predict_ids(model, store, ids, batch)
    return float(np.mean(np.argmax(logits, axis=1) == labels)) if len(labels) else 0.0


def train(rc: RunConfig, store: CloudStore | None = None, write: bool = True) -> TrainResult:
    """Train on the task's source domains; the target domain is never read."""
    store = store or CloudStore(rc.data_root)
    task = store.task(rc.target)
    by_domain = group_by_domain(task.source_train)
    if len(by_domain) < 1:
        raise ValueError("task has no source training samples")
    ts = rc.train
    model = Model(rc.model, seed=rc.seed)
    rng = make_rng(derive_seed("train", rc.seed))
    domains = sorted(by_domain)
    steps_per_epoch = min(len(v) for v in by_domain.values()) // ts.batch_per_domain
    if steps_per_epoch < 1:
        raise ValueError("batch_per_domain exceeds the smallest source domain")
    total_steps = ts.epochs * steps_per_epoch
    opt = AdamWState()
    collector = KeyCollector(keep_values=rc.model.align_mode in ("v_only", "k_and_v"), momentum=ts.kda_momentum)
    need_keys = rc.model.align_mode != "none"
    params = model.parameters()

    history: list[EpochRecord] = []
    step_losses: list[tuple[float, float, float]] = []
    best_acc, best_epoch, best_state = -1.0, -1, model.state_dict()
    step = 0
    out = Path(rc.out_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "run.cfg").write_text(rc.to_text())
    for epoch in range(ts.epochs):
        t0 = time.perf_counter()
        order = epoch_order(by_domain, rng, ts.stratify)
        sums = np.zeros(3)
        lr = ts.lr
        for i in range(steps_per_epoch):
            sl = slice(i * ts.batch_per_domain, (i + 1) * ts.batch_per_domain)
            ids = [sid for d in domains for sid in order[d][sl]]
            coords, labels, dom = load_batch(store, ids, train=True, rng=rng)
            lr = cosine_lr(step, total_steps, ts.lr, ts.lr_min)
            model.zero_grad()
            collector.clear()
            res = model.forward(coords, collector if need_keys else None, dom, rng=rng)
            cls = cross_entropy(res.logits, labels)
            kda = alignment_target(rc.model.align_mode, collector)
            loss = total_loss(cls, kda, ts.lambda1, ts.lambda2 * kda_ramp(step, ts.kda_start * steps_per_epoch, ts.kda_warmup * steps_per_epoch))
            ag.backward(loss)
            adamw_step(params, lr, ts.weight_decay, (ts.beta1, ts.beta2), ts.eps, opt)
            model.project()
            step += 1
            rec = (float(cls.value), float(kda.value), float(loss.value))
            step_losses.append(rec)
            sums += rec
        val_acc = float("nan")
        if (epoch + 1) % ts.val_every == 0 or epoch + 1 == ts.epochs:
            val_acc = accuracy(model, store, task.source_val, ts.eval_batch)
            if val_acc >= best_acc:
                best_acc, best_epoch, best_state = val_acc, epoch, model.state_dict()
                if write:
                    model.save(out / "checkpoint.pdgr")
        mean = sums / steps_per_epoch
        history.append(
            EpochRecord(epoch, steps_per_epoch, lr, *map(float, mean), val_acc, time.perf_counter() - t0)
        )
        log.info("epoch %d cls %.4f kda %.4f val %.3f", epoch, mean[0], mean[1], val_acc)
    model.load_state_dict(best_state)
    if write:
        write_history(out / "train_history.csv", history)
    return TrainResult(
        model=model,
        history=history,
        best_epoch=best_epoch,
        best_val_acc=best_acc,
        step_losses=step_losses,
        checkpoint=encode(best_state),
    )


def write_history(path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for r in history:
            w.writerow([r.epoch, r.steps, repr(r.lr), repr(r.cls_loss), repr(r.kda_loss),
                        repr(r.total_loss), repr(r.val_acc), f"{r.seconds:.3f}"])
