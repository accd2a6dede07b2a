"""Segmentation metrics: IoU/F1, mIoU and HD95."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import InputError


def _binary_pair(pred, target):
    p = np.asarray(pred).astype(bool)
    t = np.asarray(target).astype(bool)
    if p.shape != t.shape:
        raise InputError(f"mask shapes differ: {p.shape} vs {t.shape}")
    return p, t


def iou_f1(pred, target) -> tuple[float, float]:
    """IoU and F1 (Dice) of two binary masks; both are 1 when both masks are empty."""
    p, t = _binary_pair(pred, target)
    inter = int(np.logical_and(p, t).sum())
    union = int(np.logical_or(p, t).sum())
    if union == 0:
        return 1.0, 1.0
    iou = inter / union
    return iou, 2 * iou / (1 + iou)


def per_class_iou(pred, target, num_classes: int) -> list:
    """IoU per class index; None for classes absent from both maps."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise InputError(f"class-map shapes differ: {pred.shape} vs {target.shape}")
    out = []
    for c in range(num_classes):
        p, t = pred == c, target == c
        union = np.logical_or(p, t).sum()
        out.append(None if union == 0 else float(np.logical_and(p, t).sum() / union))
    return out


def miou(pred, target, num_classes: int) -> float:
    """Mean IoU over classes present in either map."""
    vals = [v for v in per_class_iou(pred, target, num_classes) if v is not None]
    return float(np.mean(vals)) if vals else 1.0


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour (outside counts as background)."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def surface_distances(pred, target) -> np.ndarray:
    """Pooled directed boundary distances, pred->target then target->pred."""
    bp, bt = boundary(pred), boundary(target)
    # EDT of the complement gives the distance to the nearest boundary pixel
    to_t = distance_transform_edt(~bt)
    to_p = distance_transform_edt(~bp)
    return np.concatenate([to_t[bp], to_p[bt]])


def hd95(pred, target) -> float:
    """95th-percentile symmetric Hausdorff distance in pixels; NaN if a mask is empty."""
    p, t = _binary_pair(pred, target)
    if not p.any() or not t.any():
        return math.nan
    return float(np.percentile(surface_distances(p, t), 95))


@dataclass
class MetricsReport:
    class_iou: list
    class_dice: list
    class_hd95: list
    samples: int = 0
    excluded: int = 0
    class_ids: Optional[list] = None

    @property
    def mean_iou(self) -> float:
        vals = [v for v in self.class_iou if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def mean_dice(self) -> float:
        vals = [v for v in self.class_dice if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def mean_hd95(self) -> float:
        vals = [v for v in self.class_hd95 if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    def to_text(self) -> str:
        def fmt(v):
            return "undefined" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"

        lines = [f"samples = {self.samples}", f"excluded_hd95 = {self.excluded}"]
        ids = self.class_ids or list(range(len(self.class_iou)))
        for i, a, b, c in zip(ids, self.class_iou, self.class_dice, self.class_hd95):
            lines += [f"class{i}_iou = {fmt(a)}", f"class{i}_dice = {fmt(b)}", f"class{i}_hd95 = {fmt(c)}"]
        lines += [f"mean_iou = {fmt(self.mean_iou)}", f"mean_dice = {fmt(self.mean_dice)}",
                  f"hd95 = {fmt(self.mean_hd95)}"]
        return "\n".join(lines) + "\n"


def evaluate_masks(preds: Sequence[np.ndarray], targets: Sequence[np.ndarray],
                   num_classes: int = 1) -> MetricsReport:
    """Average per-sample metrics for each foreground class.

    With ``num_classes == 1`` masks are binary. Otherwise maps hold class
    indices and class 0 is background; classes 1..K-1 are scored. HD95 is
    averaged over samples where both masks are non-empty.
    """
    classes = [1] if num_classes == 1 else list(range(1, num_classes))
    ious = {c: [] for c in classes}
    dices = {c: [] for c in classes}
    hds = {c: [] for c in classes}
    excluded = 0
    for p, t in zip(preds, targets):
        for c in classes:
            pm, tm = np.asarray(p) == c, np.asarray(t) == c
            if num_classes > 1 and not pm.any() and not tm.any():
                continue
            i, f = iou_f1(pm, tm)
            ious[c].append(i)
            dices[c].append(f)
            h = hd95(pm, tm)
            if math.isnan(h):
                excluded += 1
            else:
                hds[c].append(h)

    def avg(v):
        return float(np.mean(v)) if v else math.nan

    return MetricsReport([avg(ious[c]) for c in classes], [avg(dices[c]) for c in classes],
                         [avg(hds[c]) for c in classes], samples=len(preds), excluded=excluded,
                         class_ids=classes)
