"""Classification metrics: accuracy, ROC AUC and background rejection."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, MetricError


def _binary_inputs(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise MetricError("scores must be finite")
    pos = y == 1
    if not np.all((y == 0) | pos):
        raise MetricError("labels must be binary (0 or 1)")
    if pos.all() or not pos.any():
        raise MetricError("both classes must be present")
    return s, pos


def roc_auc(scores, labels) -> float:
    """Mann-Whitney estimate ``P(s_pos > s_neg) + P(s_pos == s_neg) / 2`` via mid-ranks."""
    s, pos = _binary_inputs(scores, labels)
    n_pos = int(pos.sum())
    n_neg = s.size - n_pos
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def efficiency_count(eff: float, n_signal: int) -> int:
    """Smallest ``k`` with ``k / n_signal >= eff`` (at least one event)."""
    if not 0.0 < eff <= 1.0:
        raise MetricError(f"efficiency must lie in (0, 1], got {eff}")
    k = math.ceil(eff * n_signal)
    # guard against eff * n landing a hair above an integer
    if (k - 1) / n_signal >= eff:
        k -= 1
    return max(k, 1)


def rejection_at_efficiency(scores, labels, eff: float = 0.8) -> float:
    """Inverse background efficiency at the cut that keeps ``>= eff`` of the signal.

    The cut is the ``k``-th highest signal score with ``k`` from
    :func:`efficiency_count`; events with score at or above it pass. Returns
    ``math.inf`` when no background passes.
    """
    s, pos = _binary_inputs(scores, labels)
    sig = np.sort(s[pos])[::-1]
    cut = sig[efficiency_count(eff, sig.size) - 1]
    bkg = s[~pos]
    passed = int((bkg >= cut).sum())
    if passed == 0:
        return math.inf
    return bkg.size / passed


def accuracy(pred, labels) -> float:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if pred.shape != labels.shape or pred.size == 0:
        raise MetricError(f"cannot compare predictions {pred.shape} with labels {labels.shape}")
    return float(np.mean(pred == labels))


def confusion_matrix(pred, labels, classes: int) -> np.ndarray:
    m = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(m, (np.asarray(labels), np.asarray(pred)), 1)
    return m


@dataclass
class EvalReport:
    accuracy: float
    auc: list[float]
    auc_mean: float
    rejection: list[float]
    rejection_mean: float
    rejection_infinite: list[bool]
    confusion: np.ndarray
    n: int = 0
    eff: float = 0.8

    def summary(self) -> str:
        rej = "inf" if math.isinf(self.rejection_mean) else f"{self.rejection_mean:.2f}"
        return f"accuracy={self.accuracy:.4f} auc={self.auc_mean:.4f} rejection@{self.eff:g}={rej} (n={self.n})"

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "auc": self.auc,
            "auc_mean": self.auc_mean,
            "rejection": [None if math.isinf(r) else r for r in self.rejection],
            "rejection_mean": None if math.isinf(self.rejection_mean) else self.rejection_mean,
            "rejection_infinite": self.rejection_infinite,
            "confusion": self.confusion.tolist(),
            "n": self.n,
            "eff": self.eff,
        }


def report_from_scores(scores, labels, eff: float = 0.8) -> EvalReport:
    """One-vs-rest metrics per class, macro-averaged.

    ``scores`` is ``(N, C)`` with one column per class.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.size:
        raise MetricError(f"scores {scores.shape} do not match {labels.size} labels")
    c = scores.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise MetricError(f"labels must lie in [0, {c})")
    pred = scores.argmax(axis=1)
    aucs, rejs = [], []
    for k in range(c):
        target = (labels == k).astype(np.int64)
        aucs.append(roc_auc(scores[:, k], target))
        rejs.append(rejection_at_efficiency(scores[:, k], target, eff))
    return EvalReport(
        accuracy=accuracy(pred, labels),
        auc=aucs,
        auc_mean=float(np.mean(aucs)),
        rejection=rejs,
        rejection_mean=float(np.mean(rejs)),
        rejection_infinite=[math.isinf(r) for r in rejs],
        confusion=confusion_matrix(pred, labels, c),
        n=int(labels.size),
        eff=eff,
    )


def evaluate(model, dataset, eff: float = 0.8) -> EvalReport:
    from .model import predict_scores

    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    return report_from_scores(predict_scores(model, dataset.x), dataset.y, eff)


@dataclass
class BinResult:
    lo: int
    hi: int
    count: int
    accuracy: float | None = field(default=None)

    @property
    def absent(self) -> bool:
        return self.count == 0


def binned_accuracy_from_predictions(pred, labels, multiplicity, edges) -> list[BinResult]:
    """Accuracy per multiplicity bin ``[edges[i], edges[i+1])``; the last bin includes its upper edge."""
    edges = [int(e) for e in edges]
    if len(edges) < 2:
        raise MetricError("need at least two bin edges")
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise MetricError(f"bin edges must be strictly ascending, got {edges}")
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    mult = np.asarray(multiplicity)
    out = []
    for i, (lo, hi) in enumerate(zip(edges, edges[1:])):
        last = i == len(edges) - 2
        sel = (mult >= lo) & ((mult <= hi) if last else (mult < hi))
        count = int(sel.sum())
        acc = float(np.mean(pred[sel] == labels[sel])) if count else None
        out.append(BinResult(lo, hi, count, acc))
    return out


def binned_accuracy(model, dataset, edges) -> list[BinResult]:
    from .model import predict_scores

    pred = predict_scores(model, dataset.x).argmax(axis=1)
    return binned_accuracy_from_predictions(pred, dataset.y, dataset.multiplicity, edges)


def write_bins_csv(path, bins: list[BinResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lo", "hi", "count", "accuracy"])
        for b in bins:
            w.writerow([b.lo, b.hi, b.count, "" if b.absent else repr(b.accuracy)])


def write_scores_csv(path, scores, labels) -> None:
    scores = np.asarray(scores)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["jet_id", "label"] + [f"score_{k}" for k in range(scores.shape[1])])
        for i, (row, y) in enumerate(zip(scores, labels)):
            w.writerow([i, int(y)] + [repr(float(v)) for v in row])


def read_scores_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["jet_id", "label"]:
        raise DataError(f"{path}: missing scores header")
    body = rows[1:]
    labels = np.array([int(r[1]) for r in body], dtype=np.int64)
    scores = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64)
    return scores, labels
