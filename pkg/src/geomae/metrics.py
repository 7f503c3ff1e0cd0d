"""Classification/segmentation and regression scores."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # [n_classes, n_classes], rows = truth, cols = prediction

    @property
    def n_classes(self) -> int:
        return int(self.counts.shape[0])

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion(pred, true, n_classes: int) -> ConfusionMatrix:
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    true = np.asarray(true).reshape(-1).astype(np.int64)
    if pred.shape != true.shape:
        raise InvalidArgumentError("prediction and truth sizes differ")
    for name, arr in (("prediction", pred), ("truth", true)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise InvalidArgumentError(f"{name} label outside [0, {n_classes})")
    counts = np.bincount(true * n_classes + pred, minlength=n_classes * n_classes)
    return ConfusionMatrix(counts.reshape(n_classes, n_classes))


def scores(cm: ConfusionMatrix, include_empty: bool = False) -> dict:
    """Overall accuracy, per-class IoU and F1 and their averages.

    Classes with no true pixels are left out of the macro averages
    (``miou``, ``macro_f1``, ``precision``, ``recall``) unless
    ``include_empty``, in which case they count as zero. Their per-class
    entries are NaN. ``weighted_f1`` weights classes by true support.
    """
    c = np.asarray(cm.counts, dtype=np.float64)
    total = c.sum()
    if total <= 0:
        raise InvalidArgumentError("confusion matrix is empty")
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    support = c.sum(axis=1)
    present = support > 0

    def _ratio(num, den):
        out = np.full_like(num, np.nan)
        np.divide(num, den, out=out, where=den > 0)
        return out

    iou = _ratio(tp, tp + fp + fn)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    prec = _ratio(tp, tp + fp)
    rec = _ratio(tp, tp + fn)
    mask = np.ones_like(present) if include_empty else present

    def _macro(v):
        v = np.where(np.isnan(v), 0.0, v)
        return float(v[mask].mean())

    if not include_empty:
        iou[~present] = np.nan
        f1[~present] = np.nan
    return {
        "overall_acc": float(tp.sum() / total),
        "per_class_iou": iou.tolist(),
        "miou": _macro(iou),
        "per_class_f1": f1.tolist(),
        "macro_f1": _macro(f1),
        "weighted_f1": float(np.nansum(np.where(present, f1, 0.0) * support) / support.sum()),
        "precision": _macro(prec),
        "recall": _macro(rec),
    }


def regression_scores(pred, true) -> dict:
    """RMSE and coefficient of determination."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(true, dtype=np.float64).reshape(-1)
    if p.shape != t.shape or p.size < 2:
        raise InvalidArgumentError("need at least two paired samples")
    sse = float(((p - t) ** 2).sum())
    sst = float(((t - t.mean()) ** 2).sum())
    if sst == 0.0:
        raise InvalidArgumentError("R^2 undefined: targets have zero variance")
    return {"rmse": float(np.sqrt(sse / p.size)), "r2": 1.0 - sse / sst}
