"""Training-time augmentation: rotation, resize, aspect distortion, crop,
then intensity jitter.

Geometric steps are folded into one affine map so each sample is
resampled once. Exact multiples of 90 degrees use ``np.rot90`` so they
stay lossless and invertible. Boxes follow the same map; a rotated box
becomes the axis-aligned hull of its corners.

Rotation angles are counter-clockwise as seen on screen (y down), the
direction ``np.rot90`` turns an array.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
from scipy import ndimage

from propcount.models import AugmentConfig, Box, ImageRecord, LabeledBox, LabelSet

RIGHT_ANGLES = (90.0, 180.0, 270.0)


# ============================================================
# ROTATION SAMPLER
# ============================================================

def draw_rotation(rng: np.random.Generator) -> tuple[int, float]:
    """(bucket, angle in degrees) with four equally likely buckets:

      0: no rotation
      1: 90, 180 or 270
      2: within ±10 degrees of a random right angle
      3: any angle in [0, 360)
    """
    bucket = int(rng.integers(4))
    if bucket == 0:
        return bucket, 0.0
    if bucket == 1:
        return bucket, float(rng.choice(RIGHT_ANGLES))
    if bucket == 2:
        jitter = float(rng.uniform(-10.0, 10.0))
        base = float(rng.choice((0.0, *RIGHT_ANGLES)))
        return bucket, (base + jitter) % 360.0
    return bucket, float(rng.uniform(0.0, 360.0))


def sample_rotation(rng: np.random.Generator) -> float:
    return draw_rotation(rng)[1]


# ============================================================
# BOX TRANSFORMS
# ============================================================

def rot90_box(box: Box, width: float) -> Box:
    """Box after one counter-clockwise quarter turn of a ``width``-wide image."""
    return Box(box.y, width - box.x - box.w, box.h, box.w)


def rotation_matrix(angle: float, width: float, height: float) -> np.ndarray:
    """Counter-clockwise rotation about the image centre, canvas unchanged."""
    theta = math.radians(angle)
    c, s = math.cos(theta), math.sin(theta)
    cx, cy = width / 2, height / 2
    return np.array([
        [c, s, cx - c * cx - s * cy],
        [-s, c, cy + s * cx - c * cy],
        [0.0, 0.0, 1.0],
    ])


def transform_box(box: Box, matrix: np.ndarray) -> tuple[float, float, float, float]:
    """Corners of the axis-aligned hull of ``box`` under ``matrix``."""
    corners = np.array([
        [box.x, box.y, 1.0], [box.x2, box.y, 1.0],
        [box.x, box.y2, 1.0], [box.x2, box.y2, 1.0],
    ])
    mapped = corners @ matrix.T
    return (
        float(mapped[:, 0].min()), float(mapped[:, 1].min()),
        float(mapped[:, 0].max()), float(mapped[:, 1].max()),
    )


def clip_box(
    corners: tuple[float, float, float, float],
    width: float,
    height: float,
    min_fraction: float,
) -> Box | None:
    """Clip to the canvas; None if less than ``min_fraction`` of the area remains."""
    x1, y1, x2, y2 = corners
    full = (x2 - x1) * (y2 - y1)
    cx1, cy1 = max(x1, 0.0), max(y1, 0.0)
    cx2, cy2 = min(x2, float(width)), min(y2, float(height))
    if cx2 <= cx1 or cy2 <= cy1 or full <= 0:
        return None
    if (cx2 - cx1) * (cy2 - cy1) < min_fraction * full:
        return None
    return Box.from_corners(cx1, cy1, cx2, cy2)


# ============================================================
# PIXEL TRANSFORMS
# ============================================================

def warp(
    pixels: np.ndarray,
    matrix: np.ndarray,
    out_shape: tuple[int, int],
    fill: float,
) -> np.ndarray:
    """Resample so that output point p shows input point ``matrix⁻¹ p``.

    ``matrix`` acts on continuous (x, y) coordinates where pixel (r, c)
    covers [c, c+1] × [r, r+1].
    """
    inv = np.linalg.inv(matrix)
    a, b = inv[:2, :2], inv[:2, 2]
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    index_matrix = swap @ a @ swap
    index_offset = swap @ (a @ np.array([0.5, 0.5]) + b) - 0.5

    def one(channel: np.ndarray) -> np.ndarray:
        return ndimage.affine_transform(
            channel, index_matrix, offset=index_offset, output_shape=out_shape,
            order=1, mode="constant", cval=fill,
        )

    if pixels.ndim == 2:
        return one(pixels)
    return np.stack([one(pixels[:, :, k]) for k in range(pixels.shape[2])], axis=2)


def resize_to_area(
    pixels: np.ndarray, target_side: int,
) -> tuple[np.ndarray, float, float]:
    """Resize so width·height ≈ target_side², keeping the aspect ratio.

    Returns the resized array and the (x, y) scale factors actually used.
    """
    height, width = pixels.shape[:2]
    factor = math.sqrt(target_side * target_side / (width * height))
    new_w = max(1, round(width * factor))
    new_h = max(1, round(height * factor))
    if (new_w, new_h) == (width, height):
        return pixels, 1.0, 1.0
    sx, sy = new_w / width, new_h / height
    matrix = np.diag([sx, sy, 1.0])
    resized = warp(pixels, matrix, (new_h, new_w), float(pixels.mean()))
    return resized, sx, sy


def rotate(
    pixels: np.ndarray, boxes: list[Box], angle: float,
) -> tuple[np.ndarray, list[Box], np.ndarray]:
    """Rotate by ``angle`` degrees counter-clockwise.

    Right angles are applied to the array and boxes directly (returned
    matrix is the identity); any other angle is returned as a matrix for
    the caller to fold into its single resampling pass.
    """
    angle = angle % 360.0
    if angle in RIGHT_ANGLES:
        for _ in range(int(angle // 90)):
            boxes = [rot90_box(b, pixels.shape[1]) for b in boxes]
            pixels = np.rot90(pixels)
        return pixels, boxes, np.eye(3)
    if angle == 0.0:
        return pixels, boxes, np.eye(3)
    height, width = pixels.shape[:2]
    return pixels, boxes, rotation_matrix(angle, width, height)


# ============================================================
# AUGMENT
# ============================================================

def augment(
    record: ImageRecord,
    labels: LabelSet,
    config: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, LabelSet]:
    """One randomly augmented training sample and its transformed labels."""
    if labels.image_id != record.image_id:
        raise ValueError(
            f"labels for {labels.image_id} do not belong to {record.image_id}"
        )
    pixels = record.pixels
    fill = float(pixels.mean())
    boxes = [lb.box for lb in labels.boxes]
    height, width = pixels.shape[:2]
    matrix = np.eye(3)

    if config.rotation_enabled:
        pixels, boxes, matrix = rotate(pixels, boxes, sample_rotation(rng))
        height, width = pixels.shape[:2]

    # resize + aspect distortion
    out_w, out_h = float(width), float(height)
    if config.scale_long_side is not None:
        scale = rng.uniform(*config.scale_long_side) / max(width, height)
        ratio = rng.uniform(*config.aspect_jitter)
        sx, sy = scale * math.sqrt(ratio), scale / math.sqrt(ratio)
        matrix = np.diag([sx, sy, 1.0]) @ matrix
        out_w, out_h = width * sx, height * sy

    # crop (pads with the image mean when the crop is larger)
    out_shape = (max(1, round(out_h)), max(1, round(out_w)))
    if config.crop_size is not None:
        crop = config.crop_size
        ox = _crop_offset(rng, out_shape[1], crop)
        oy = _crop_offset(rng, out_shape[0], crop)
        matrix = np.array([[1.0, 0.0, -ox], [0.0, 1.0, -oy], [0.0, 0.0, 1.0]]) @ matrix
        out_shape = (crop, crop)

    if not (np.array_equal(matrix, np.eye(3)) and out_shape == pixels.shape[:2]):
        pixels = warp(pixels, matrix, out_shape, fill)

    # intensity jitter
    contrast = rng.uniform(*config.contrast_jitter)
    brightness = rng.uniform(*config.brightness_jitter)
    if contrast != 1.0 or brightness != 0.0:
        pixels = np.clip(pixels * contrast + brightness, 0.0, 1.0)

    identity = np.array_equal(matrix, np.eye(3))
    kept: list[LabeledBox] = []
    for labeled, box in zip(labels.boxes, boxes):
        if identity and box.inside(out_shape[1], out_shape[0]):
            kept.append(replace(labeled, box=box))
            continue
        clipped = clip_box(
            transform_box(box, matrix), out_shape[1], out_shape[0],
            config.min_box_fraction,
        )
        if clipped is not None:
            kept.append(replace(labeled, box=clipped))
    return pixels, replace(labels, boxes=tuple(kept))


def _crop_offset(rng: np.random.Generator, size: int, crop: int) -> int:
    if size >= crop:
        return int(rng.integers(0, size - crop + 1))
    return int(rng.integers(size - crop, 1))
