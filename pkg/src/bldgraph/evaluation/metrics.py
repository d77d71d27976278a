"""Confusion matrices, one-vs-rest macro metrics and class-balance diagnostics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

METRICS = ("accuracy", "precision", "recall", "specificity", "f1")
REPORT_SPLITS = ("train", "test", "hold", "full")


@dataclass(frozen=True)
class ConfusionMatrix:
    """K x K counts; rows are true classes, columns predicted classes."""
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {c.shape}")
        if np.any(c < 0):
            raise ValueError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", c)

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(pred: Sequence[int], true: Sequence[int], k: int) -> ConfusionMatrix:
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} predictions vs {true.shape} labels")
    for name, v in (("predicted", pred), ("true", true)):
        if v.size and (v.min() < 0 or v.max() >= k):
            raise ValueError(f"{name} labels must lie in 0..{k - 1}")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return ConfusionMatrix(counts)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # classes with an empty denominator score 0
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def macro_metrics(cm: ConfusionMatrix) -> dict[str, float]:
    """Accuracy plus macro-averaged one-vs-rest precision, recall, specificity and F1."""
    c = cm.counts.astype(np.float64)
    if cm.k < 2:
        raise ValueError("macro metrics need K >= 2")
    total = c.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    tn = total - tp - fp - fn
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    specificity = _ratio(tn, tn + fp)
    f1 = _ratio(2 * precision * recall, precision + recall)
    return {
        "accuracy": float(tp.sum() / total),
        "precision": float(precision.mean()),
        "recall": float(recall.mean()),
        "specificity": float(specificity.mean()),
        "f1": float(f1.mean()),
    }


def shannon_equitability(class_counts: Sequence[float], k: int | None = None) -> float:
    """Entropy of the class distribution divided by ln K (K defaults to len(class_counts))."""
    counts = np.asarray(class_counts, dtype=np.float64)
    k = len(counts) if k is None else int(k)
    if k < 2:
        raise ValueError("equitability needs a scheme with at least two classes")
    if np.any(counts < 0) or counts.sum() <= 0:
        raise ValueError("class counts must be non-negative with a positive total")
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum() / np.log(k))


@dataclass
class SplitMetrics:
    n: int
    metrics: dict[str, float]
    confusion: ConfusionMatrix
    equitability: float

    def to_json(self) -> dict:
        return {"n": self.n, **self.metrics, "confusion": self.confusion.counts.tolist(),
                "equitability": self.equitability}


def split_metrics(pred, true, k: int) -> SplitMetrics:
    cm = confusion(pred, true, k)
    return SplitMetrics(cm.total, macro_metrics(cm), cm, shannon_equitability(cm.counts.sum(axis=1)))


@dataclass
class MetricsReport:
    """Five metrics, a confusion matrix and label equitability for each evaluated split."""
    splits: dict[str, SplitMetrics]
    num_classes: int
    extra: dict = field(default_factory=dict)

    def __getitem__(self, split: str) -> dict[str, float]:
        return self.splits[split].metrics

    def to_json(self) -> dict:
        return {"num_classes": self.num_classes,
                "splits": {s: m.to_json() for s, m in self.splits.items()},
                "extra": self.extra}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_json(cls, doc: dict) -> "MetricsReport":
        splits = {}
        for s, d in doc["splits"].items():
            splits[s] = SplitMetrics(d["n"], {m: d[m] for m in METRICS},
                                     ConfusionMatrix(np.array(d["confusion"])), d["equitability"])
        return cls(splits, doc["num_classes"], doc.get("extra", {}))

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_json(json.loads(Path(path).read_text()))


def metrics_report(pred, labels, masks: dict[str, np.ndarray], k: int) -> MetricsReport:
    """Evaluate ``pred`` against ``labels`` on each named boolean mask (empty masks are skipped)."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    out = {}
    for name, m in masks.items():
        m = np.asarray(m, dtype=bool)
        if m.any():
            out[name] = split_metrics(pred[m], labels[m], k)
    return MetricsReport(out, k)
