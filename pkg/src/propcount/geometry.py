"""Box overlap and non-maximum suppression.

Boxes are (x, y, w, h) in continuous pixel units. Overlap is area-based,
so boxes that only touch along an edge have IoU 0.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from propcount.models import Box, ScoredBox


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes."""
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def as_array(boxes: Sequence[Box]) -> np.ndarray:
    """Stack boxes into an (N, 4) array of x, y, w, h."""
    if not boxes:
        return np.zeros((0, 4))
    return np.array([(b.x, b.y, b.w, b.h) for b in boxes], dtype=np.float64)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (N, 4) / (M, 4) x, y, w, h arrays."""
    ax1, ay1 = a[:, 0:1], a[:, 1:2]
    ax2, ay2 = ax1 + a[:, 2:3], ay1 + a[:, 3:4]
    bx1, by1 = b[:, 0], b[:, 1]
    bx2, by2 = bx1 + b[:, 2], by1 + b[:, 3]

    iw = np.maximum(0.0, np.minimum(ax2, bx2) - np.maximum(ax1, bx1))
    ih = np.maximum(0.0, np.minimum(ay2, by2) - np.maximum(ay1, by1))
    inter = iw * ih
    union = a[:, 2:3] * a[:, 3:4] + b[:, 2] * b[:, 3] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def score_order(candidates: Sequence[ScoredBox]) -> list[ScoredBox]:
    """Score descending; ties broken by (x, y, w, h) ascending."""
    return sorted(candidates, key=lambda c: (-c.score, *c.box.sort_key))


def nms(candidates: Sequence[ScoredBox], iou_threshold: float) -> list[ScoredBox]:
    """Greedy non-maximum suppression.

    Keeps the best remaining box and drops every remaining box whose IoU
    with it exceeds ``iou_threshold``. Output stays in score order.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    ordered = score_order(candidates)
    if not ordered:
        return []

    coords = as_array([c.box for c in ordered])
    overlaps = iou_matrix(coords, coords)
    alive = np.ones(len(ordered), dtype=bool)
    keep: list[ScoredBox] = []
    for i, cand in enumerate(ordered):
        if not alive[i]:
            continue
        keep.append(cand)
        suppressed = overlaps[i] > iou_threshold
        suppressed[: i + 1] = False
        alive &= ~suppressed
    return keep
