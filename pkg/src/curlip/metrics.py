"""Binary and multi-class detection metrics: confusion counts, P/R/F1,
ROC/AUC, TPR at fixed FPR and macro-averaged one-vs-rest ROC."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateLabels, LengthMismatch

FPR_LEVELS = (1e-4, 1e-3, 1e-2, 1e-1)
GRID_POINTS = 1001

_trapz = getattr(np, "trapezoid", None) or np.trapz


def _arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if len(s) != len(y):
        raise LengthMismatch(f"{len(s)} scores but {len(y)} labels")
    return s, y.astype(np.int64)


def confusion(scores, labels, threshold: float = 0.5) -> tuple[int, int, int, int]:
    """(tp, fp, tn, fn) with "positive" meaning score >= threshold."""
    s, y = _arrays(scores, labels)
    pred = s >= threshold
    pos = y == 1
    return (int(np.sum(pred & pos)), int(np.sum(pred & ~pos)),
            int(np.sum(~pred & ~pos)), int(np.sum(~pred & pos)))


class Prf1(NamedTuple):
    accuracy: float
    precision: float
    recall: float
    f1: float
    # names of metrics whose denominator was zero (reported as 0.0)
    undefined: tuple[str, ...] = ()


def prf1(tp: int, fp: int, tn: int, fn: int) -> Prf1:
    undefined = []

    def ratio(name, num, den):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    acc = ratio("accuracy", tp + tn, tp + fp + tn + fn)
    prec = ratio("precision", tp, tp + fp)
    rec = ratio("recall", tp, tp + fn)
    f1 = ratio("f1", 2 * prec * rec, prec + rec)
    return Prf1(acc, prec, rec, f1, tuple(undefined))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds) sweeping unique scores from high to low.

    Tied scores form one step.  The curve starts at (0, 0) with threshold
    +inf and ends at (1, 1).
    """
    s, y = _arrays(scores, labels)
    n_pos = int(np.sum(y == 1))
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"ROC needs both classes, got {n_pos} positives and {n_neg} negatives")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(y == 1)[last_of_group]
    fps = (last_of_group + 1) - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    thresholds = np.r_[np.inf, s[last_of_group]]
    return fpr, tpr, thresholds


def auc(scores, labels) -> float:
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(_trapz(tpr, fpr))


def tpr_at_fpr(scores, labels, levels: Sequence[float] = FPR_LEVELS) -> dict[float, float]:
    """Largest TPR among ROC operating points with FPR <= level (no interpolation)."""
    fpr, tpr, _ = roc_curve(scores, labels)
    return {float(lv): float(tpr[fpr <= lv + 1e-15].max()) for lv in levels}


# -- multi-class -------------------------------------------------------------

def _curve_limits(fpr: np.ndarray, tpr: np.ndarray, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Left and right limits of a ROC polyline at each x.

    At an FPR with a vertical segment the left limit is its bottom and the
    right limit its top; elsewhere the two agree.
    """
    ux, first = np.unique(fpr, return_index=True)
    last = np.r_[first[1:] - 1, len(fpr) - 1]
    lo, hi = tpr[first], tpr[last]
    idx = np.searchsorted(ux, xs, side="left")
    idx_c = np.minimum(idx, len(ux) - 1)
    exact = ux[idx_c] == xs
    k = np.clip(idx - 1, 0, len(ux) - 2)
    frac = (xs - ux[k]) / (ux[k + 1] - ux[k])
    between = hi[k] + (lo[k + 1] - hi[k]) * frac
    return np.where(exact, lo[idx_c], between), np.where(exact, hi[idx_c], between)


def macro_roc(curves: Sequence[tuple[np.ndarray, np.ndarray]], grid_points: int = GRID_POINTS
              ) -> tuple[np.ndarray, np.ndarray, float]:
    """Mean of per-class ROC curves.

    Returns the mean TPR on a shared ``grid_points`` FPR grid (upper value at
    vertical steps) and the trapezoidal area of the mean curve.  The area is
    integrated on the grid refined with every per-class breakpoint, so it
    carries no discretisation error.
    """
    grid = np.linspace(0.0, 1.0, grid_points)
    mean_grid = np.mean([_curve_limits(f, t, grid)[1] for f, t in curves], axis=0)
    knots = np.unique(np.concatenate([grid] + [f for f, _ in curves]))
    lims = [_curve_limits(f, t, knots) for f, t in curves]
    left = np.mean([lo for lo, _ in lims], axis=0)
    right = np.mean([hi for _, hi in lims], axis=0)
    xs = np.repeat(knots, 2)
    ys = np.column_stack([left, right]).reshape(-1)
    return grid, mean_grid, float(_trapz(ys, xs))


@dataclass
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    undefined: list[str]
    roc: list[tuple[float, float]]
    auc: float
    tpr_at_fpr: dict[str, float]
    threshold: float = 0.5
    n_classes: int = 2
    per_class: list[dict] = field(default_factory=list)
    macro_auc: float | None = None
    macro_roc: list[tuple[float, float]] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes, "threshold": self.threshold,
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "accuracy": self.accuracy, "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "undefined": list(self.undefined), "auc": self.auc, "tpr_at_fpr": dict(self.tpr_at_fpr),
            "roc": [list(p) for p in self.roc], "per_class": self.per_class,
            "macro_auc": self.macro_auc, "macro_roc": [list(p) for p in self.macro_roc], **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_roc_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["curve", "fpr", "tpr"])
            for f, t in self.roc:
                w.writerow(["binary", repr(f), repr(t)])
            for f, t in self.macro_roc:
                w.writerow(["macro", repr(f), repr(t)])


def binary_report(scores, labels, threshold: float = 0.5, levels: Sequence[float] = FPR_LEVELS) -> EvalReport:
    tp, fp, tn, fn = confusion(scores, labels, threshold)
    m = prf1(tp, fp, tn, fn)
    fpr, tpr, _ = roc_curve(scores, labels)
    table = tpr_at_fpr(scores, labels, levels)
    return EvalReport(tp, fp, tn, fn, m.accuracy, m.precision, m.recall, m.f1, list(m.undefined),
                      list(zip(fpr.tolist(), tpr.tolist())), float(_trapz(tpr, fpr)),
                      {repr(k): v for k, v in table.items()}, threshold)


def multiclass_report(probs, labels, levels: Sequence[float] = FPR_LEVELS) -> EvalReport:
    """Per-class one-vs-rest metrics plus macro ROC/AUC.

    Accuracy and F1 per class use argmax predictions.  The top-level binary
    fields treat class 0 as negative and every other class as positive, with
    score 1 - p(class 0).
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if p.ndim != 2 or p.shape[1] < 2:
        raise ValueError(f"expected (N, K>=2) class scores, got {p.shape}")
    if len(p) != len(y):
        raise LengthMismatch(f"{len(p)} score rows but {len(y)} labels")
    k = p.shape[1]
    pred = p.argmax(axis=1)
    per_class, curves = [], []
    for c in range(k):
        truth = (y == c).astype(np.int64)
        if truth.sum() == 0 or truth.sum() == len(y):
            raise DegenerateLabels(f"class {c} is {'absent' if truth.sum() == 0 else 'the only class'}")
        tp, fp, tn, fn = confusion((pred == c).astype(float), truth, 0.5)
        m = prf1(tp, fp, tn, fn)
        fpr, tpr, _ = roc_curve(p[:, c], truth)
        curves.append((fpr, tpr))
        per_class.append({"class": c, "accuracy": m.accuracy, "precision": m.precision, "recall": m.recall,
                          "f1": m.f1, "auc": float(_trapz(tpr, fpr))})
    grid, mean_tpr, m_auc = macro_roc(curves)
    report = binary_report(1.0 - p[:, 0], (y != 0).astype(np.int64), 0.5, levels)
    report.n_classes = k
    report.per_class = per_class
    report.macro_auc = m_auc
    report.macro_roc = list(zip(grid.tolist(), mean_tpr.tolist()))
    return report
