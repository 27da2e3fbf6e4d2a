"""Target-domain evaluation: accuracy, per-class accuracy, confusion matrix, embeddings."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..data import CloudStore
from ..model import Model
from .train import predict_ids


@dataclass
class EvalResult:
    target: str
    accuracy: float
    per_class: np.ndarray  # accuracy per class, nan for classes absent from the split
    confusion: np.ndarray  # rows true class, columns predicted class
    ids: list[str]
    labels: np.ndarray
    predictions: np.ndarray
    embeddings: np.ndarray


def confusion_matrix(labels: np.ndarray, preds: np.ndarray, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def evaluate(model: Model, store: CloudStore, target: str, batch: int = 32) -> EvalResult:
    ids = store.task(target).target_test
    logits, emb, labels = predict_ids(model, store, ids, batch)
    preds = np.argmax(logits, axis=1) if len(ids) else np.zeros(0, dtype=int)
    k = model.cfg.num_classes
    cm = confusion_matrix(labels, preds, k)
    support = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(cm) / np.maximum(support, 1), np.nan)
    acc = float(np.mean(preds == labels)) if len(ids) else 0.0
    return EvalResult(target, acc, per_class, cm, list(ids), labels, preds, emb)


def write_eval(result: EvalResult, out_dir, class_names) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "summary": out / f"eval_{result.target}.csv",
        "confusion": out / f"confusion_{result.target}.csv",
        "embeddings": out / f"embeddings_{result.target}.csv",
    }
    with open(paths["summary"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target", "class", "accuracy", "support"])
        w.writerow([result.target, "overall", repr(result.accuracy), len(result.ids)])
        for c, name in enumerate(class_names):
            w.writerow([result.target, name, repr(float(result.per_class[c])), int(result.confusion[c].sum())])
    with open(paths["confusion"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *class_names])
        for c, name in enumerate(class_names):
            w.writerow([name, *result.confusion[c].tolist()])
    with open(paths["embeddings"], "w", newline="") as fh:
        w = csv.writer(fh)
        dim = result.embeddings.shape[1] if result.embeddings.ndim == 2 else 0
        w.writerow(["id", "label", "prediction", *[f"e{i}" for i in range(dim)]])
        for sid, lab, pred, row in zip(result.ids, result.labels, result.predictions, result.embeddings):
            w.writerow([sid, int(lab), int(pred), *[repr(float(x)) for x in row]])
    return paths
