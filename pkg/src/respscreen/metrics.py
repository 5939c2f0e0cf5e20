"""Binary screening metrics with asthma as the positive class."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidParameter, UndefinedMetric


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsReport:
    """Ratios that would divide by zero are ``None``, never 0."""

    counts: ConfusionCounts
    accuracy: float | None
    precision: float | None
    recall: float | None
    specificity: float | None
    f1: float | None
    youden_j: float | None
    roc_auc: float | None = None

    @property
    def sensitivity(self) -> float | None:
        return self.recall

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sensitivity"] = self.recall
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _binary(values, name: str) -> np.ndarray:
    a = np.asarray(values)
    if a.ndim != 1:
        raise InvalidParameter(f"{name} must be one-dimensional")
    if a.size and not np.isin(a, (0, 1)).all():
        raise InvalidParameter(f"{name} must be binary (0/1)")
    return a.astype(np.int64)


def confusion(labels, predictions) -> ConfusionCounts:
    y = _binary(labels, "labels")
    p = _binary(predictions, "predictions")
    if y.size != p.size:
        raise InvalidParameter(f"length mismatch: {y.size} labels vs {p.size} predictions")
    if y.size == 0:
        raise InvalidParameter("no items to evaluate")
    return ConfusionCounts(
        tp=int(np.sum((y == 1) & (p == 1))),
        fp=int(np.sum((y == 0) & (p == 1))),
        tn=int(np.sum((y == 0) & (p == 0))),
        fn=int(np.sum((y == 1) & (p == 0))),
    )


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def summarize(counts: ConfusionCounts, roc_auc: float | None = None) -> MetricsReport:
    if counts.total <= 0:
        raise InvalidParameter("empty confusion counts")
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    specificity = _ratio(counts.tn, counts.tn + counts.fp)
    f1 = None
    if precision is not None and recall is not None and precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    youden = recall + specificity - 1 if recall is not None and specificity is not None else None
    return MetricsReport(
        counts=counts,
        accuracy=(counts.tp + counts.tn) / counts.total,
        precision=precision,
        recall=recall,
        specificity=specificity,
        f1=f1,
        youden_j=youden,
        roc_auc=roc_auc,
    )


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], xs.size]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def roc_auc(labels, scores) -> float:
    """Mann-Whitney AUC: P(pos > neg) + 0.5 P(tie), via midranks."""
    y = _binary(labels, "labels")
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != y.shape:
        raise InvalidParameter("labels and scores differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("ROC AUC needs at least one positive and one negative")
    r = midranks(s)
    u = r[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(labels, scores) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds) with a prediction of positive when score >= threshold.

    The first point is (0, 0) at threshold +inf.
    """
    y = _binary(labels, "labels")
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("ROC curve needs both classes")
    order = np.argsort(-s, kind="mergesort")
    ys, ss = y[order], s[order]
    last = np.r_[ss[1:] != ss[:-1], True]
    tp = np.cumsum(ys)[last]
    fp = np.cumsum(1 - ys)[last]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    return fpr, tpr, np.r_[np.inf, ss[last]]


def youden_threshold(labels, scores) -> tuple[float, float]:
    """Score threshold maximizing tpr - fpr, and that maximum."""
    fpr, tpr, thr = roc_curve(labels, scores)
    j = tpr - fpr
    k = int(np.argmax(j))
    return float(thr[k]), float(j[k])


def write_roc_csv(path: str | Path, labels, scores) -> None:
    fpr, tpr, thr = roc_curve(labels, scores)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr", "threshold"])
        for a, b, c in zip(fpr, tpr, thr):
            w.writerow([repr(float(a)), repr(float(b)), "inf" if np.isinf(c) else repr(float(c))])
