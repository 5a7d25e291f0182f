"""Detection and counting evaluation.

  average_precision            VOC2007 11-point AP over pooled predictions
  counting_errors              MAE and RMSE between predicted and true counts
  select_counting_threshold    best score threshold over a grid
  propagation_quality          expanded vs. correctly expanded label boxes
  evaluate                     all of the above folded into an EvalReport

RMSE is the root of the mean squared error.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence

import numpy as np

from propcount.geometry import as_array, iou_matrix
from propcount.models import (
    Box,
    CountingRecord,
    EvalConfig,
    EvalReport,
    LabelSet,
    Objective,
    PropagationQuality,
    ScoredBox,
)

RECALL_LEVELS: tuple[float, ...] = tuple(k / 10 for k in range(11))


# ============================================================
# DETECTION
# ============================================================

def match_predictions(
    predictions: Mapping[str, Sequence[ScoredBox]],
    ground_truth: Mapping[str, Sequence[Box]],
    iou_threshold: float = 0.5,
) -> list[bool]:
    """True-positive flags for pooled predictions in score order.

    Predictions are pooled across images and sorted by score descending
    (ties by image key, then coordinates). Each one claims the unmatched
    ground-truth box of its image with the highest IoU at or above the
    threshold; equal IoUs resolve to the earlier ground-truth box.
    """
    unknown = sorted(set(predictions) - set(ground_truth))
    if unknown:
        raise ValueError(f"predictions for images without ground truth: {unknown}")

    pooled = [
        (image_id, pred)
        for image_id, preds in predictions.items()
        for pred in preds
    ]
    pooled.sort(key=lambda item: (-item[1].score, item[0], *item[1].box.sort_key))

    gt_arrays = {k: as_array(list(v)) for k, v in ground_truth.items()}
    claimed = {k: np.zeros(len(v), dtype=bool) for k, v in gt_arrays.items()}

    flags: list[bool] = []
    for image_id, pred in pooled:
        gts = gt_arrays[image_id]
        if len(gts) == 0:
            flags.append(False)
            continue
        overlaps = iou_matrix(as_array([pred.box]), gts)[0]
        eligible = (~claimed[image_id]) & (overlaps >= iou_threshold)
        if not eligible.any():
            flags.append(False)
            continue
        best = int(np.argmax(np.where(eligible, overlaps, -1.0)))
        claimed[image_id][best] = True
        flags.append(True)
    return flags


def eleven_point_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Mean over recall levels 0, 0.1, ..., 1 of the best precision
    reached at or beyond that recall."""
    total = 0.0
    for level in RECALL_LEVELS:
        reached = recall >= level
        total += float(np.max(precision[reached])) if reached.any() else 0.0
    return total / len(RECALL_LEVELS)


def average_precision(
    predictions: Mapping[str, Sequence[ScoredBox]],
    ground_truth: Mapping[str, Sequence[Box]],
    iou_threshold: float = 0.5,
) -> float:
    """PASCAL VOC 2007 11-point interpolated AP."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    num_positive = sum(len(v) for v in ground_truth.values())
    if num_positive == 0:
        raise ValueError("average precision is undefined without ground-truth boxes")

    flags = match_predictions(predictions, ground_truth, iou_threshold)
    if not flags:
        return 0.0

    tp = np.cumsum(np.array(flags, dtype=np.float64))
    fp = np.cumsum(~np.array(flags, dtype=bool)).astype(np.float64)
    recall = tp / num_positive
    precision = tp / (tp + fp)
    return eleven_point_ap(recall, precision)


# ============================================================
# COUNTING
# ============================================================

def counting_errors(records: Sequence[CountingRecord]) -> tuple[float, float]:
    """(MAE, RMSE) over per-image count records."""
    if not records:
        raise ValueError("counting errors need at least one record")
    diff = np.array(
        [r.predicted_count - r.true_count for r in records], dtype=np.float64
    )
    mae = float(np.mean(np.abs(diff)))
    rmse = math.sqrt(float(np.mean(diff ** 2)))
    return mae, rmse


def count_at(predictions: Sequence[ScoredBox], threshold: float) -> int:
    return sum(1 for p in predictions if p.score >= threshold)


def select_counting_threshold(
    predictions: Mapping[str, Sequence[ScoredBox]],
    true_counts: Mapping[str, int],
    grid: Sequence[float],
    objective: Objective = Objective.MAE,
) -> tuple[float, float]:
    """Grid threshold with the lowest counting error (ties → smallest)."""
    if not grid:
        raise ValueError("threshold grid must not be empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("threshold grid must be strictly increasing")

    images = sorted(true_counts)
    best: tuple[float, float] | None = None
    for threshold in grid:
        records = [
            CountingRecord(count_at(predictions.get(k, ()), threshold), true_counts[k])
            for k in images
        ]
        mae, rmse = counting_errors(records)
        value = mae if objective is Objective.MAE else rmse
        if best is None or value < best[1]:
            best = (float(threshold), value)
    assert best is not None
    return best


# ============================================================
# PROPAGATION QUALITY
# ============================================================

def correct_flags(
    boxes: Sequence[Box],
    ground_truth: Sequence[Box],
    iou_threshold: float = 0.3,
) -> list[bool]:
    """Per box: does it overlap some ground-truth box beyond the threshold?

    One ground-truth box may validate several boxes.
    """
    if not boxes:
        return []
    if not ground_truth:
        return [False] * len(boxes)
    overlaps = iou_matrix(as_array(list(boxes)), as_array(list(ground_truth)))
    return [bool(row.max() > iou_threshold) for row in overlaps]


def propagation_quality(
    label_set: LabelSet,
    full_ground_truth: Sequence[Box] | None,
    iou_threshold: float = 0.3,
) -> PropagationQuality:
    """Count expanded boxes and the ones matching full ground truth."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    correct = None
    if full_ground_truth is not None:
        correct = sum(
            correct_flags(label_set.plain_boxes, full_ground_truth, iou_threshold)
        )
    return PropagationQuality(
        stage=label_set.stage,
        expanded=len(label_set),
        correct=correct,
        image_id=label_set.image_id,
    )


# ============================================================
# REPORT
# ============================================================

def evaluate(
    predictions: Mapping[str, Sequence[ScoredBox]],
    ground_truth: Mapping[str, Sequence[Box]],
    config: EvalConfig | None = None,
) -> EvalReport:
    """mAP plus best-threshold MAE and RMSE over the test images."""
    config = config or EvalConfig()
    true_counts = {k: len(v) for k, v in ground_truth.items()}
    mae_threshold, mae = select_counting_threshold(
        predictions, true_counts, config.count_grid, Objective.MAE
    )
    rmse_threshold, rmse = select_counting_threshold(
        predictions, true_counts, config.count_grid, Objective.RMSE
    )
    return EvalReport(
        map_at_50=average_precision(predictions, ground_truth, config.map_iou),
        mae=mae,
        rmse=rmse,
        mae_threshold=mae_threshold,
        rmse_threshold=rmse_threshold,
        num_images=len(ground_truth),
    )
