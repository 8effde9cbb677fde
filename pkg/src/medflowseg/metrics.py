"""Segmentation metrics: Dice, IoU, and the 95th-percentile Hausdorff distance.

All three are symmetric in their arguments.  Conventions for degenerate
inputs are pinned here and in the tests: when both masks are empty Dice and
IoU are 1.0, while HD95 is undefined (reported as NaN and flagged, never
raised) whenever either mask is empty.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ShapeError


def _as_bool(mask) -> np.ndarray:
    return np.asarray(mask).astype(bool)


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")


def dice(a, b) -> float:
    """2|a∩b| / (|a| + |b|); 1.0 when both masks are empty."""
    a, b = _as_bool(a), _as_bool(b)
    _check_shapes(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def iou(a, b) -> float:
    """|a∩b| / |a∪b|; 1.0 when both masks are empty."""
    a, b = _as_bool(a), _as_bool(b)
    _check_shapes(a, b)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbor background pixel.

    Pixels outside the image count as background, so foreground touching the
    border is boundary.
    """
    m = _as_bool(mask)
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def hd95(a, b) -> float:
    """95th percentile of pooled symmetric boundary nearest-neighbor distances.

    Distances from every boundary pixel of `a` to the boundary of `b` and
    vice versa are pooled, then the percentile is taken with linear
    interpolation.  Returns NaN if either mask is empty.
    """
    a, b = _as_bool(a), _as_bool(b)
    _check_shapes(a, b)
    ba, bb = boundary(a), boundary(b)
    if not ba.any() or not bb.any():
        return float("nan")
    dist_to_b = ndimage.distance_transform_edt(~bb)
    dist_to_a = ndimage.distance_transform_edt(~ba)
    pooled = np.concatenate([dist_to_b[ba], dist_to_a[bb]])
    return float(np.percentile(pooled, 95))


@dataclass
class MetricReport:
    """Per-class and mean scores for one prediction/ground-truth pair.

    Classes are the foreground indices 1..K-1.  `hd95_undefined` marks
    classes where either mask was empty; those entries are NaN and excluded
    from `mean_hd95`.
    """

    classes: list[int]
    dice_per_class: list[float]
    iou_per_class: list[float]
    hd95_per_class: list[float]
    hd95_undefined: list[bool]
    empty_pair: list[bool] = field(default_factory=list)

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice_per_class))

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.iou_per_class))

    @property
    def mean_hd95(self) -> float:
        defined = [h for h, u in zip(self.hd95_per_class, self.hd95_undefined) if not u]
        return float(np.mean(defined)) if defined else float("nan")

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "dice_per_class": self.dice_per_class,
            "iou_per_class": self.iou_per_class,
            "hd95_per_class": self.hd95_per_class,
            "hd95_undefined": self.hd95_undefined,
            "empty_pair": self.empty_pair,
            "mean_dice": self.mean_dice,
            "mean_iou": self.mean_iou,
            "mean_hd95": self.mean_hd95,
        }


def evaluate_pair(pred, target, num_classes: int) -> MetricReport:
    """Score one predicted label map against its ground truth."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"label map shapes differ: {pred.shape} vs {target.shape}")
    classes = list(range(1, num_classes))
    report = MetricReport(classes, [], [], [], [], [])
    for cls in classes:
        p = pred == cls
        t = target == cls
        report.dice_per_class.append(dice(p, t))
        report.iou_per_class.append(iou(p, t))
        h = hd95(p, t)
        report.hd95_per_class.append(h)
        report.hd95_undefined.append(bool(np.isnan(h)))
        report.empty_pair.append(bool(not p.any() and not t.any()))
    return report


def aggregate_reports(reports: dict[str, MetricReport]) -> dict:
    """Average per-case means into a dataset-level summary."""
    if not reports:
        return {"cases": 0}
    dices = [r.mean_dice for r in reports.values()]
    ious = [r.mean_iou for r in reports.values()]
    hds = [r.mean_hd95 for r in reports.values() if not np.isnan(r.mean_hd95)]
    return {
        "cases": len(reports),
        "mean_dice": float(np.mean(dices)),
        "mean_iou": float(np.mean(ious)),
        "mean_hd95": float(np.mean(hds)) if hds else float("nan"),
    }
