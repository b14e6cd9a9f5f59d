"""Binary classification metrics and ROC analysis."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    roc_auc: float
    tp: int
    fp: int
    tn: int
    fn: int
    roc_points: list = field(default_factory=list)
    roc_thresholds: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roc_points"] = [list(p) for p in self.roc_points]
        d["roc_thresholds"] = [float(t) if np.isfinite(t) else "inf" for t in self.roc_thresholds]
        return d


def confusion_counts(predicted, truth) -> tuple[int, int, int, int]:
    """(TP, FP, TN, FN) with class 1 as positive."""
    p = np.asarray(predicted).astype(int)
    t = np.asarray(truth).astype(int)
    if p.shape != t.shape:
        raise ValueError(f"prediction/truth length mismatch: {p.shape} vs {t.shape}")
    tp = int(np.sum((p == 1) & (t == 1)))
    fp = int(np.sum((p == 1) & (t == 0)))
    tn = int(np.sum((p == 0) & (t == 0)))
    fn = int(np.sum((p == 0) & (t == 1)))
    return tp, fp, tn, fn


def _ratio(num: float, den: float, name: str, flags: list) -> float:
    if den == 0:
        flags.append(f"{name}: zero denominator, reported as 0")
        return 0.0
    return num / den


def roc_curve(scores, truth) -> tuple[list[tuple[float, float]], list[float]]:
    """ROC points from (0, 0) to (1, 1), one per distinct score threshold.

    A sample is called positive when ``score >= threshold``. The first point
    uses an infinite threshold (nothing positive).
    """
    s = np.asarray(scores, dtype=float)
    t = np.asarray(truth).astype(int)
    if s.shape != t.shape or s.ndim != 1:
        raise ValueError("scores and truth must be equal-length 1-D sequences")
    n_pos = int(t.sum())
    n_neg = int(len(t) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC-AUC is undefined unless both classes are present")
    order = np.argsort(-s, kind="mergesort")
    s, t = s[order], t[order]
    tps = np.cumsum(t)
    fps = np.cumsum(1 - t)
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    points = [(0.0, 0.0)] + [(fps[i] / n_neg, tps[i] / n_pos) for i in last_of_group]
    thresholds = [float("inf")] + [float(s[i]) for i in last_of_group]
    return points, thresholds


def roc_auc(scores, truth) -> tuple[float, list[tuple[float, float]]]:
    """Trapezoidal area under the ROC curve, and the curve itself."""
    points, _ = roc_curve(scores, truth)
    xs = np.array([p[0] for p in points])
    ys = np.array([p[1] for p in points])
    area = float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))
    return area, points


def binary_metrics(predicted, truth, scores=None) -> MetricsReport:
    """Accuracy, precision, recall (sensitivity), F1 and ROC-AUC.

    Zero denominators give 0 and add a note to ``flags``. ROC-AUC needs
    ``scores`` and both classes; otherwise it is reported as NaN with a flag.
    """
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.size == 0:
        raise ValueError("cannot compute metrics on an empty record set")
    tp, fp, tn, fn = confusion_counts(predicted, truth)
    flags: list[str] = []
    accuracy = (tp + tn) / (tp + fp + tn + fn)
    precision = _ratio(tp, tp + fp, "precision", flags)
    recall = _ratio(tp, tp + fn, "recall", flags)
    f1 = _ratio(2 * precision * recall, precision + recall, "f1", flags)
    auc, points, thresholds = float("nan"), [], []
    if scores is not None:
        try:
            points, thresholds = roc_curve(scores, truth)
            auc, _ = roc_auc(scores, truth)
        except ValueError as exc:
            flags.append(f"roc_auc: {exc}")
    return MetricsReport(accuracy, precision, recall, f1, auc, tp, fp, tn, fn, points, thresholds, flags)
