"""Grid detector: patch features, per-cell objectiveness and box regression.

Every grid cell u reads the R×R patch centred on the cell centre
(zero-padded at the borders, normalised to zero mean and unit standard
deviation, plus a trailing bias 1). An optional tanh hidden layer feeds
two affine heads:

  score  f(u) = sigmoid(z)
  centre      = cell origin + sigmoid(tx, ty) · stride
  size        = anchor · exp(tw, th), limited to [1/8, 8] × anchor

Checkpoints are a single binary file: magic, shape header, then
little-endian float64 arrays each prefixed by its length.
"""

from __future__ import annotations

import hashlib
import math
import struct
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, logit

from propcount.augment import resize_to_area
from propcount.geometry import nms, score_order
from propcount.models import (
    Box,
    DataError,
    DetectorConfig,
    GridAssignment,
    GridModel,
    LabelSet,
    ObjectivenessMap,
    ScoredBox,
)

MAGIC = b"PROPCNT1"
_HEADER = struct.Struct("<IIIIdd")
_LENGTH = struct.Struct("<Q")

MAX_SIZE_RATIO = 8.0
_LOG_MAX_RATIO = math.log(MAX_SIZE_RATIO)
# Regression targets clip the centre offset away from the cell edges
# so the logit stays finite.
_OFFSET_EPS = 1e-12


# ============================================================
# FEATURES
# ============================================================

def _as_channels(pixels: np.ndarray) -> np.ndarray:
    return pixels[:, :, None] if pixels.ndim == 2 else pixels


def _normalise(patches: np.ndarray) -> np.ndarray:
    """Row-wise zero mean / unit std; constant rows become zeros."""
    centred = patches - patches.mean(axis=1, keepdims=True)
    std = centred.std(axis=1, keepdims=True)
    safe = np.where(std > 0, std, 1.0)
    return np.where(std > 0, centred / safe, 0.0)


def _patch_origin(model: GridModel) -> int:
    """Offset of a patch's top-left corner from its cell's top-left corner."""
    return (model.stride - model.receptive_field) // 2


def extract_patch(pixels: np.ndarray, cell: tuple[int, int], model: GridModel) -> np.ndarray:
    """Feature vector of one cell: normalised R·R·C patch plus bias 1."""
    arr = _as_channels(pixels)
    height, width, channels = arr.shape
    rows, cols = model.grid_shape(height, width)
    row, col = cell
    if not (0 <= row < rows and 0 <= col < cols):
        raise ValueError(f"cell {cell} outside the {rows}x{cols} grid")

    r = model.receptive_field
    top = row * model.stride + _patch_origin(model)
    left = col * model.stride + _patch_origin(model)
    patch = np.zeros((r, r, channels))
    y0, y1 = max(top, 0), min(top + r, height)
    x0, x1 = max(left, 0), min(left + r, width)
    patch[y0 - top:y1 - top, x0 - left:x1 - left] = arr[y0:y1, x0:x1]
    flat = _normalise(patch.reshape(1, -1))[0]
    return np.append(flat, 1.0)


def extract_features(pixels: np.ndarray, model: GridModel) -> np.ndarray:
    """Feature matrix of every cell, rows in row-major grid order."""
    arr = _as_channels(pixels)
    height, width, channels = arr.shape
    if channels != model.channels:
        raise ValueError(f"model expects {model.channels} channels, image has {channels}")
    rows, cols = model.grid_shape(height, width)
    if rows == 0 or cols == 0:
        raise ValueError(f"image {height}x{width} is smaller than one cell")

    r, s = model.receptive_field, model.stride
    padded = np.pad(arr, ((r, r), (r, r), (0, 0)))
    windows = sliding_window_view(padded, (r, r), axis=(0, 1))
    start = r + _patch_origin(model)
    picked = windows[start:start + rows * s:s, start:start + cols * s:s]
    # (rows, cols, C, R, R) -> (rows * cols, R * R * C)
    patches = picked.transpose(0, 1, 3, 4, 2).reshape(rows * cols, -1)
    features = _normalise(patches)
    return np.hstack([features, np.ones((rows * cols, 1))])


# ============================================================
# HEADS
# ============================================================

class HeadOutputs(NamedTuple):
    inputs: np.ndarray
    hidden: np.ndarray | None
    logits: np.ndarray
    regression: np.ndarray


def evaluate_heads(features: np.ndarray, model: GridModel) -> HeadOutputs:
    """Objectiveness logits (G,) and raw regression outputs (G, 4)."""
    hidden = None
    inputs = features
    if model.hidden_units:
        hidden = np.tanh(features @ model.hidden)
        inputs = np.hstack([hidden, np.ones((len(features), 1))])
    return HeadOutputs(
        inputs, hidden, inputs @ model.objectness, inputs @ model.regression,
    )


def decode(raw: np.ndarray, model: GridModel, rows: int, cols: int) -> np.ndarray:
    """Raw (rows*cols, 4) regression outputs to (rows, cols, 4) x, y, w, h."""
    raw = raw.reshape(rows, cols, 4)
    s = model.stride
    grid_y, grid_x = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    cx = (grid_x + expit(raw[..., 0])) * s
    cy = (grid_y + expit(raw[..., 1])) * s
    w = model.anchor[0] * np.exp(np.clip(raw[..., 2], -_LOG_MAX_RATIO, _LOG_MAX_RATIO))
    h = model.anchor[1] * np.exp(np.clip(raw[..., 3], -_LOG_MAX_RATIO, _LOG_MAX_RATIO))
    return np.stack([cx - w / 2, cy - h / 2, w, h], axis=-1)


def forward(pixels: np.ndarray, model: GridModel) -> ObjectivenessMap:
    """Score and decode every grid cell."""
    rows, cols = model.grid_shape(*pixels.shape[:2])
    heads = evaluate_heads(extract_features(pixels, model), model)
    return ObjectivenessMap(
        scores=expit(heads.logits).reshape(rows, cols),
        boxes=decode(heads.regression, model, rows, cols),
        stride=model.stride,
    )


# ============================================================
# TARGETS
# ============================================================

def assign_targets(
    labels: LabelSet, image_size: tuple[int, int], model: GridModel,
) -> GridAssignment:
    """Mark the cell holding each label centre positive.

    ``image_size`` is (height, width). Cells are half-open, so a centre on
    a boundary belongs to the cell right/below it; when two centres share
    a cell the larger box wins.
    """
    rows, cols = model.grid_shape(*image_size)
    targets = np.zeros((rows, cols), dtype=np.int8)
    regression = np.zeros((rows, cols, 4))
    owner_area = np.zeros((rows, cols))
    s = model.stride

    for box in labels.plain_boxes:
        cx, cy = box.center
        col, row = math.floor(cx / s), math.floor(cy / s)
        if not (0 <= row < rows and 0 <= col < cols):
            continue
        if targets[row, col] == 1 and owner_area[row, col] >= box.area:
            continue
        fx = min(max(cx / s - col, _OFFSET_EPS), 1 - _OFFSET_EPS)
        fy = min(max(cy / s - row, _OFFSET_EPS), 1 - _OFFSET_EPS)
        targets[row, col] = 1
        owner_area[row, col] = box.area
        regression[row, col] = (
            logit(fx), logit(fy),
            math.log(box.w / model.anchor[0]), math.log(box.h / model.anchor[1]),
        )
    return GridAssignment(targets, regression)


# ============================================================
# PREDICTION
# ============================================================

def predict(
    pixels: np.ndarray,
    model: GridModel,
    score_floor: float = 0.0,
    nms_iou: float = 0.2,
    test_area: int | None = None,
) -> list[ScoredBox]:
    """Cells scoring at least ``score_floor``, NMS-filtered, best first.

    The floor is compared in logit space, so a floor of 1 keeps nothing
    for any finite model. With ``test_area`` the image is resized to
    about test_area² pixels and boxes are mapped back.
    """
    if not 0.0 <= score_floor <= 1.0:
        raise ValueError(f"score_floor must lie in [0, 1], got {score_floor}")
    sx = sy = 1.0
    if test_area is not None:
        pixels, sx, sy = resize_to_area(pixels, test_area)

    rows, cols = model.grid_shape(*pixels.shape[:2])
    heads = evaluate_heads(extract_features(pixels, model), model)
    keep = np.flatnonzero(heads.logits >= logit(score_floor))
    if keep.size == 0:
        return []
    scores = expit(heads.logits)
    boxes = decode(heads.regression, model, rows, cols).reshape(-1, 4)
    candidates = []
    for idx in keep:
        x, y, w, h = boxes[idx]
        box = Box(float(x / sx), float(y / sy), float(w / sx), float(h / sy))
        candidates.append(ScoredBox(box, float(scores[idx])))
    return score_order(nms(candidates, nms_iou))


# ============================================================
# INITIALISATION
# ============================================================

def anchor_from_labels(label_sets: list[LabelSet]) -> tuple[float, float]:
    """Median (w, h) over every labeled box."""
    boxes = [b for labels in label_sets for b in labels.plain_boxes]
    if not boxes:
        raise ValueError("cannot derive an anchor without labeled boxes")
    return (
        float(np.median([b.w for b in boxes])),
        float(np.median([b.h for b in boxes])),
    )


def init_model(
    config: DetectorConfig,
    channels: int,
    anchor: tuple[float, float],
    rng: np.random.Generator,
) -> GridModel:
    """Small uniform weights; objectiveness bias set low so early scores
    favour background."""
    feature_dim = config.receptive_field ** 2 * channels + 1
    k = config.hidden_units
    head_dim = k + 1 if k else feature_dim
    lim = config.init_range

    hidden = rng.uniform(-lim, lim, (feature_dim, k))
    if k:
        hidden[-1] = 0.0
    objectness = rng.uniform(-lim, lim, head_dim)
    objectness[-1] = config.objectness_bias
    regression = rng.uniform(-lim, lim, (head_dim, 4))
    regression[-1] = 0.0
    return GridModel(
        stride=config.stride,
        receptive_field=config.receptive_field,
        channels=channels,
        anchor=(float(anchor[0]), float(anchor[1])),
        hidden=hidden,
        objectness=objectness,
        regression=regression,
    )


def zero_model(
    stride: int, receptive_field: int, anchor: tuple[float, float],
    channels: int = 1, hidden_units: int = 0,
) -> GridModel:
    """All-zero weights: every cell scores 0.5 and decodes to the anchor."""
    feature_dim = receptive_field ** 2 * channels + 1
    head_dim = hidden_units + 1 if hidden_units else feature_dim
    return GridModel(
        stride=stride,
        receptive_field=receptive_field,
        channels=channels,
        anchor=anchor,
        hidden=np.zeros((feature_dim, hidden_units)),
        objectness=np.zeros(head_dim),
        regression=np.zeros((head_dim, 4)),
    )


# ============================================================
# CHECKPOINTS
# ============================================================

def model_bytes(model: GridModel) -> bytes:
    parts = [
        MAGIC,
        _HEADER.pack(
            model.stride, model.receptive_field, model.channels,
            model.hidden_units, model.anchor[0], model.anchor[1],
        ),
    ]
    for arr in (model.hidden, model.objectness, model.regression):
        flat = np.ascontiguousarray(arr, dtype="<f8").ravel()
        parts.append(_LENGTH.pack(flat.size))
        parts.append(flat.tobytes())
    return b"".join(parts)


def model_checksum(model: GridModel) -> str:
    return hashlib.sha256(model_bytes(model)).hexdigest()


def save_model(path: str | Path, model: GridModel) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(model_bytes(model))
    return path


def load_model(path: str | Path) -> GridModel:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if not data.startswith(MAGIC):
        raise DataError(f"{path}: not a propcount checkpoint")

    pos = len(MAGIC)
    try:
        stride, field, channels, k, anchor_w, anchor_h = _HEADER.unpack_from(data, pos)
        pos += _HEADER.size
        arrays = []
        for _ in range(3):
            (n,) = _LENGTH.unpack_from(data, pos)
            pos += _LENGTH.size
            arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=pos).copy())
            pos += 8 * n
    except (struct.error, ValueError) as e:
        raise DataError(f"{path}: truncated checkpoint") from e

    feature_dim = field * field * channels + 1
    head_dim = k + 1 if k else feature_dim
    try:
        return GridModel(
            stride=stride,
            receptive_field=field,
            channels=channels,
            anchor=(anchor_w, anchor_h),
            hidden=arrays[0].reshape(feature_dim, k),
            objectness=arrays[1].reshape(head_dim),
            regression=arrays[2].reshape(head_dim, 4),
        )
    except ValueError as e:
        raise DataError(f"{path}: inconsistent checkpoint ({e})") from e
