"""Overlap, confusion and boundary-distance scores for binary masks.

Distances are in pixel units. ``mad`` is the average symmetric surface
distance; ``bde`` is the one-directional mean distance from the predicted
boundary to the reference boundary, so it is not symmetric.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyMask, ShapeMismatch

# row names used in CSV output, in report order
METRIC_ROWS = {
    "dice": "Dice Score Coefficient (DSC)",
    "jaccard": "Jaccard Index (JI)",
    "precision": "Precision",
    "recall": "Recall / Sensitivity",
    "f1": "F-1",
    "accuracy": "Accuracy",
    "hausdorff": "Hausdorff Distance (HD)",
    "mad": "Mean Average Distance (MAD)",
    "mae": "Mean Absolute Error (MAE)",
    "specificity": "Specificity",
    "bde": "Boundary Displacement Error (BDE)",
}


@dataclass
class MetricReport:
    dice: float
    jaccard: float
    precision: float
    recall: float
    f1: float
    accuracy: float
    specificity: float
    mae: float
    hausdorff: float
    mad: float
    bde: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def jaccard(a, b) -> float:
    a, b = _pair(a, b)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def confusion_metrics(pred, truth) -> dict[str, float]:
    a, b = _pair(pred, truth)
    tp = int(np.sum(a & b))
    fp = int(np.sum(a & ~b))
    fn = int(np.sum(~a & b))
    tn = int(np.sum(~a & ~b))
    total = a.size
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "accuracy": (tp + tn) / total,
        "specificity": _ratio(tn, tn + fp),
        "mae": (fp + fn) / total,
    }


def boundary_mask(m) -> np.ndarray:
    m = np.asarray(m, dtype=bool)
    if not m.any():
        raise EmptyMask("boundary of an empty mask")
    interior = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(2, 1),
                                      border_value=0)
    return m & ~interior


def extract_boundary(m) -> set[tuple[int, int]]:
    return {(int(r), int(c)) for r, c in np.argwhere(boundary_mask(m))}


def _distances_to(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Euclidean distance from every pixel of ``src`` to the nearest pixel of ``dst``."""
    _, (ri, ci) = ndimage.distance_transform_edt(~dst, return_indices=True)
    rows, cols = np.nonzero(src)
    dr = rows - ri[rows, cols]
    dc = cols - ci[rows, cols]
    return np.sqrt((dr * dr + dc * dc).astype(np.float64))


def _mean(d: np.ndarray) -> float:
    # correctly rounded, so the result does not depend on summation order
    return math.fsum(d.tolist()) / len(d)


def aggregate_distances(d_ab: np.ndarray, d_ba: np.ndarray) -> dict[str, float]:
    return {
        "hausdorff": float(max(d_ab.max(), d_ba.max())),
        "mad": 0.5 * (_mean(d_ab) + _mean(d_ba)),
        "bde": _mean(d_ab),
    }


def boundary_distances(a, b) -> dict[str, float]:
    a, b = _pair(a, b)
    ba, bb = boundary_mask(a), boundary_mask(b)
    return aggregate_distances(_distances_to(ba, bb), _distances_to(bb, ba))


def evaluate_masks(pred, truth) -> MetricReport:
    """Full score battery; distances are NaN when either mask is empty."""
    pred, truth = _pair(pred, truth)
    if pred.any() and truth.any():
        dist = boundary_distances(pred, truth)
    else:
        dist = {"hausdorff": float("nan"), "mad": float("nan"), "bde": float("nan")}
    return MetricReport(dice=dice(pred, truth), jaccard=jaccard(pred, truth),
                        **confusion_metrics(pred, truth), **dist)
