"""Annotations, incomplete-label subsampling, and synthetic scenes.

Annotation files are JSON Lines, one image per line:

    {"image": "images/scene_0000.pgm", "width": 256, "height": 256,
     "boxes": [{"x": 10, "y": 20, "w": 22, "h": 24}], "split": "train"}

``split`` is optional; the generator writes it so a single file can hold
training, background and test images.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Iterator, Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np

from propcount.geometry import iou
from propcount.models import (
    Box,
    ConfigError,
    DataError,
    ImageRecord,
    LabelSet,
    SceneSpec,
    ScoredBox,
    SubsampleSpec,
)
from propcount.pnm import read_pnm, write_pnm

logger = logging.getLogger(__name__)

# Stream ids keep scene, background and test draws independent per seed.
SCENE_STREAM = 0
BACKGROUND_STREAM = 1
TEST_STREAM = 2

_PLACEMENT_ATTEMPTS_PER_OBJECT = 500
_RIM = 2


# ============================================================
# JSON LINES
# ============================================================

def read_jsonl(path: str | Path) -> Iterator[tuple[int, dict[str, Any]]]:
    """Yield (line number, object) for every non-blank line."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{lineno}: malformed JSON ({e.msg})") from e
        if not isinstance(obj, dict):
            raise DataError(f"{path}:{lineno}: expected a JSON object")
        yield lineno, obj


def write_jsonl(path: str | Path, rows: Iterable[dict[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return path


# ============================================================
# ANNOTATIONS
# ============================================================

def _parse_entry(
    entry: dict[str, Any], lineno: int, path: Path,
) -> tuple[str, int, int, list[Box]]:
    try:
        image = str(entry["image"])
        width = int(entry["width"])
        height = int(entry["height"])
        raw_boxes = entry.get("boxes", [])
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}:{lineno}: missing or invalid field {e}") from e
    boxes: list[Box] = []
    for raw in raw_boxes:
        try:
            boxes.append(Box.from_dict(raw))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path}:{lineno}: invalid box in {image}: {e}") from e
    return image, width, height, boxes


def load_annotations(path: str | Path, split: str | None = None) -> list[ImageRecord]:
    """Load every annotated image, optionally only one split.

    Image paths resolve relative to the annotation file.
    """
    path = Path(path)
    records: list[ImageRecord] = []
    for lineno, entry in read_jsonl(path):
        entry_split = str(entry.get("split", ""))
        if split is not None and entry_split != split:
            continue
        image, width, height, boxes = _parse_entry(entry, lineno, path)
        image_path = path.parent / image
        if not image_path.exists():
            raise DataError(f"{path}:{lineno}: image file not found: {image_path}")
        record = ImageRecord(
            image_id=image,
            width=width,
            height=height,
            pixels=read_pnm(image_path),
            boxes=boxes,
            split=entry_split,
        )
        record.validate()
        records.append(record)
    logger.debug("Loaded %d records from %s", len(records), path)
    return records


def load_ground_truth(path: str | Path, split: str | None = None) -> dict[str, list[Box]]:
    """Boxes per image id without reading any pixels."""
    path = Path(path)
    truth: dict[str, list[Box]] = {}
    for lineno, entry in read_jsonl(path):
        if split is not None and str(entry.get("split", "")) != split:
            continue
        image, _, _, boxes = _parse_entry(entry, lineno, path)
        truth[image] = boxes
    return truth


def write_dataset(
    out_dir: str | Path,
    records: Sequence[ImageRecord],
    annotation_name: str = "annotations.jsonl",
) -> Path:
    """Write each record as ``images/<id>.pgm`` plus one annotation file."""
    out_dir = Path(out_dir)
    entries = []
    for record in records:
        rel = f"images/{record.image_id}.pgm"
        write_pnm(out_dir / rel, record.pixels)
        entries.append(record.annotation(rel))
    return write_jsonl(out_dir / annotation_name, entries)


# ============================================================
# SUBSAMPLING
# ============================================================

def subsample(
    records: Sequence[ImageRecord],
    spec: SubsampleSpec,
) -> tuple[list[tuple[ImageRecord, LabelSet]], list[ImageRecord]]:
    """Pick ``num_images`` images and at most ``boxes_per_image`` seeds on each.

    Records are sorted by image_id first, so the draw depends only on the
    seed. Unselected images are returned separately and never trained on.
    """
    ordered = sorted(records, key=lambda r: r.image_id)
    rng = np.random.default_rng(spec.rng_seed)

    if spec.num_images is None:
        chosen = set(range(len(ordered)))
    else:
        if spec.num_images > len(ordered):
            raise ConfigError(
                f"subsample.num_images={spec.num_images} but only "
                f"{len(ordered)} training images are available"
            )
        chosen = {
            int(i) for i in rng.choice(len(ordered), spec.num_images, replace=False)
        }

    train: list[tuple[ImageRecord, LabelSet]] = []
    discarded: list[ImageRecord] = []
    for i, record in enumerate(ordered):
        if i not in chosen:
            discarded.append(record)
            continue
        if spec.boxes_per_image is None or spec.boxes_per_image >= len(record.boxes):
            seeds = list(record.boxes)
        else:
            picks = rng.choice(len(record.boxes), spec.boxes_per_image, replace=False)
            seeds = [record.boxes[int(j)] for j in sorted(picks)]
        train.append((record, LabelSet.from_seeds(record.image_id, seeds)))
    return train, discarded


# ============================================================
# SYNTHETIC SCENES
# ============================================================

def _stream(spec: SceneSpec, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.rng_seed, stream]))


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    level = rng.uniform(*spec.background_level)
    return level + rng.normal(0.0, spec.background_noise, (size, size))


def _int_range(lo: float, hi: float) -> tuple[int, int]:
    return int(np.ceil(lo)), int(np.floor(hi))


def _place(
    spec: SceneSpec,
    rng: np.random.Generator,
    count: int,
    size_range: tuple[int, int],
    occupied: list[Box],
    max_iou: float,
    image_id: str,
) -> list[Box]:
    """Rejection-sample ``count`` integer boxes fully inside the image."""
    placed: list[Box] = []
    attempts = 0
    budget = _PLACEMENT_ATTEMPTS_PER_OBJECT * max(count, 1)
    while len(placed) < count:
        if attempts >= budget:
            raise DataError(
                f"{image_id}: placed only {len(placed)} of {count} objects after "
                f"{budget} attempts; lower objects_per_image or object_size"
            )
        attempts += 1
        w = int(rng.integers(size_range[0], size_range[1] + 1))
        h = int(rng.integers(size_range[0], size_range[1] + 1))
        x = int(rng.integers(0, spec.image_size - w + 1))
        y = int(rng.integers(0, spec.image_size - h + 1))
        cand = Box(x, y, w, h)
        if all(iou(cand, other) <= max_iou for other in occupied + placed):
            placed.append(cand)
    return placed


def _paint_object(canvas: np.ndarray, box: Box, intensity: float,
                  rng: np.random.Generator) -> None:
    x, y, w, h = int(box.x), int(box.y), int(box.w), int(box.h)
    patch = intensity + rng.normal(0.0, 0.02, (h, w))
    rim = min(_RIM, w // 4, h // 4)
    if rim:
        patch[:rim, :] *= 0.75
        patch[-rim:, :] *= 0.75
        patch[:, :rim] *= 0.75
        patch[:, -rim:] *= 0.75
    canvas[y:y + h, x:x + w] = patch


def _scene(
    spec: SceneSpec, rng: np.random.Generator, image_id: str, with_objects: bool,
) -> ImageRecord:
    canvas = _background(spec, rng)
    boxes: list[Box] = []
    if with_objects:
        n = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
        boxes = _place(
            spec, rng, n, _int_range(*spec.object_size), [],
            spec.max_pairwise_iou, image_id,
        )
        for box in boxes:
            _paint_object(canvas, box, rng.uniform(*spec.object_intensity), rng)

    n_clutter = int(rng.integers(spec.clutter_per_image[0], spec.clutter_per_image[1] + 1))
    if n_clutter:
        lo = max(2, int(spec.object_size[0]) // 6)
        hi = max(lo, int(spec.object_size[0]) // 3)
        for blob in _place(spec, rng, n_clutter, (lo, hi), boxes, 0.0, image_id):
            _paint_object(canvas, blob, rng.uniform(*spec.object_intensity), rng)

    return ImageRecord(
        image_id=image_id,
        width=spec.image_size,
        height=spec.image_size,
        pixels=np.clip(canvas, 0.0, 1.0),
        boxes=boxes,
    )


def generate_scenes(
    spec: SceneSpec,
    count: int,
    prefix: str = "scene",
    stream: int = SCENE_STREAM,
    split: str = "",
) -> list[ImageRecord]:
    """Rendered scenes of near-identical rim-shaded rectangles on noise."""
    if count < 0:
        raise ValueError("count must be non-negative")
    rng = _stream(spec, stream)
    records = []
    for i in range(count):
        record = _scene(spec, rng, f"{prefix}_{i:04d}", with_objects=True)
        record.split = split
        records.append(record)
    return records


def generate_background_pool(
    spec: SceneSpec, count: int, split: str = "background",
) -> list[ImageRecord]:
    """Object-free images; their cells are always negatives in training."""
    if count < 0:
        raise ValueError("count must be non-negative")
    rng = _stream(spec, BACKGROUND_STREAM)
    records = []
    for i in range(count):
        record = _scene(spec, rng, f"background_{i:04d}", with_objects=False)
        record.split = split
        records.append(record)
    return records


# ============================================================
# LABEL SNAPSHOTS AND PREDICTIONS
# ============================================================

def write_label_snapshot(
    path: str | Path,
    label_sets: Sequence[LabelSet],
    records: Mapping[str, ImageRecord],
) -> Path:
    """Label sets in the annotation layout plus provenance and stage."""
    rows = []
    for labels in label_sets:
        record = records[labels.image_id]
        rows.append({
            **labels.to_dict(),
            "width": record.width,
            "height": record.height,
        })
    return write_jsonl(path, rows)


def load_label_snapshot(path: str | Path) -> list[LabelSet]:
    labels = []
    for lineno, row in read_jsonl(path):
        try:
            labels.append(LabelSet.from_dict(row))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path}:{lineno}: invalid label set ({e})") from e
    return labels


def write_predictions(
    path: str | Path, predictions: Mapping[str, Sequence[ScoredBox]],
) -> Path:
    return write_jsonl(path, (
        {"image": image_id, "boxes": [p.to_dict() for p in preds]}
        for image_id, preds in sorted(predictions.items())
    ))


def load_predictions(path: str | Path) -> dict[str, list[ScoredBox]]:
    predictions: dict[str, list[ScoredBox]] = {}
    for lineno, row in read_jsonl(path):
        try:
            predictions[str(row["image"])] = [
                ScoredBox.from_dict(b) for b in row.get("boxes", [])
            ]
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path}:{lineno}: invalid prediction ({e})") from e
    return predictions
