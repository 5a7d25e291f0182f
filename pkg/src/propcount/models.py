"""Data models for the propcount label-propagation toolkit.

All data structures are centralized here to prevent circular imports:
boxes and label sets, image records, the grid model snapshot, training
state, evaluation reports, and the configuration sections every other
module reads.

Dependency: this module has ZERO internal imports; everything else
imports from here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Any

import numpy as np


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class PropcountError(Exception):
    """Base class for errors the CLI maps to exit codes."""
    exit_code = 1


class ConfigError(PropcountError):
    """Invalid or inconsistent run configuration."""
    exit_code = 2


class DataError(PropcountError):
    """Malformed annotations, images or generator requests."""
    exit_code = 3


class DivergenceError(PropcountError):
    """Training produced a non-finite loss."""
    exit_code = 4

    def __init__(self, iteration: int, message: str = "") -> None:
        self.iteration = iteration
        super().__init__(
            f"iteration {iteration}: {message}" if message
            else f"loss became non-finite at iteration {iteration}"
        )


# ---------------------------------------------------------------------------
# Enums
# ---------------------------------------------------------------------------

class Provenance(Enum):
    """Where a label-set box came from."""
    SEED = "seed"
    PROPAGATED = "propagated"


class TrainMode(Enum):
    """Pipeline variant run by the CLI."""
    OD = "od"
    PFOD = "pfod"


class Objective(Enum):
    """Counting error used to pick the score threshold."""
    MAE = "mae"
    RMSE = "rmse"


# Grid target value for cells excluded from the objectiveness loss.
IGNORE = -1

DEFAULT_COUNT_GRID: tuple[float, ...] = tuple(
    round(0.05 * k, 2) for k in range(1, 15)
)


# ---------------------------------------------------------------------------
# Geometry values
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle, origin top-left, y grows downward."""
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        coords = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in coords):
            raise ValueError(f"box coordinates must be finite: {coords}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box width and height must be positive: {coords}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2, self.y + self.h / 2)

    @property
    def sort_key(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    def inside(self, width: float, height: float) -> bool:
        return (
            self.x >= 0 and self.y >= 0
            and self.x2 <= width and self.y2 <= height
        )

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> Box:
        return cls(x1, y1, x2 - x1, y2 - y1)

    def to_dict(self) -> dict[str, Any]:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Box:
        return cls(
            float(data["x"]), float(data["y"]),
            float(data["w"]), float(data["h"]),
        )


@dataclass(frozen=True)
class ScoredBox:
    """A predicted box with its objectiveness score."""
    box: Box
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    def to_dict(self) -> dict[str, Any]:
        return {**self.box.to_dict(), "score": self.score}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ScoredBox:
        return cls(Box.from_dict(data), float(data["score"]))


@dataclass(frozen=True)
class LabeledBox:
    """A label-set member: seed boxes come from annotations, the rest
    were propagated at ``stage``."""
    box: Box
    provenance: Provenance = Provenance.SEED
    stage: int = 1

    def to_dict(self) -> dict[str, Any]:
        return {
            **self.box.to_dict(),
            "provenance": self.provenance.value,
            "stage": self.stage,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> LabeledBox:
        return cls(
            Box.from_dict(data),
            Provenance(data.get("provenance", Provenance.SEED.value)),
            int(data.get("stage", 1)),
        )


@dataclass(frozen=True)
class LabelSet:
    """The known-positive boxes of one image at stage ``stage``.

    Seed boxes are never removed; later stages only append.
    """
    image_id: str
    boxes: tuple[LabeledBox, ...] = ()
    stage: int = 1

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def plain_boxes(self) -> list[Box]:
        return [lb.box for lb in self.boxes]

    @property
    def seeds(self) -> list[Box]:
        return [lb.box for lb in self.boxes if lb.provenance is Provenance.SEED]

    @property
    def propagated(self) -> list[LabeledBox]:
        return [
            lb for lb in self.boxes if lb.provenance is Provenance.PROPAGATED
        ]

    @classmethod
    def from_seeds(cls, image_id: str, boxes: list[Box]) -> LabelSet:
        return cls(image_id, tuple(LabeledBox(b) for b in boxes), stage=1)

    def to_dict(self) -> dict[str, Any]:
        return {
            "image": self.image_id,
            "stage": self.stage,
            "boxes": [lb.to_dict() for lb in self.boxes],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> LabelSet:
        return cls(
            image_id=str(data["image"]),
            boxes=tuple(LabeledBox.from_dict(b) for b in data.get("boxes", [])),
            stage=int(data.get("stage", 1)),
        )


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ImageRecord:
    """One image with its full ground truth (possibly empty).

    ``pixels`` is float64 in [0, 1], shaped (H, W) or (H, W, 3).
    """
    image_id: str
    width: int
    height: int
    pixels: np.ndarray
    boxes: list[Box] = field(default_factory=list)
    split: str = ""

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else int(self.pixels.shape[2])

    def validate(self) -> None:
        """Raise DataError when pixels or boxes disagree with the size."""
        if self.pixels.shape[:2] != (self.height, self.width):
            raise DataError(
                f"{self.image_id}: pixel array {self.pixels.shape[:2]} does not "
                f"match declared size {self.height}x{self.width}"
            )
        for box in self.boxes:
            if not box.inside(self.width, self.height):
                raise DataError(
                    f"{self.image_id}: box {box.to_dict()} lies outside "
                    f"{self.width}x{self.height}"
                )

    def annotation(self, image_path: str) -> dict[str, Any]:
        """JSON Lines annotation entry for this record."""
        entry: dict[str, Any] = {
            "image": image_path,
            "width": self.width,
            "height": self.height,
            "boxes": [b.to_dict() for b in self.boxes],
        }
        if self.split:
            entry["split"] = self.split
        return entry


# ---------------------------------------------------------------------------
# Configuration sections
# ---------------------------------------------------------------------------

def _checked(cls: type, data: dict[str, Any], section: str) -> dict[str, Any]:
    """Reject keys the dataclass does not declare."""
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")
    return dict(data)


def _pair(value: Any) -> tuple[float, float] | None:
    if value is None:
        return None
    lo, hi = value
    return (float(lo), float(hi))


def _count_or_all(value: Any) -> int | None:
    if value is None or (isinstance(value, str) and value.upper() == "ALL"):
        return None
    return int(value)


@dataclass
class SubsampleSpec:
    """How many images and seed boxes per image to keep; ``None`` means ALL."""
    num_images: int | None = None
    boxes_per_image: int | None = None
    rng_seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "num_images": "ALL" if self.num_images is None else self.num_images,
            "boxes_per_image": (
                "ALL" if self.boxes_per_image is None else self.boxes_per_image
            ),
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SubsampleSpec:
        d = _checked(cls, data, "subsample")
        return cls(
            num_images=_count_or_all(d.get("num_images")),
            boxes_per_image=_count_or_all(d.get("boxes_per_image")),
            rng_seed=int(d.get("rng_seed", 0)),
        )


@dataclass
class SceneSpec:
    """Synthetic scene generator parameters (all sizes in pixels)."""
    image_size: int = 256
    objects_per_image: tuple[int, int] = (18, 22)
    object_size: tuple[float, float] = (18.0, 26.0)
    object_intensity: tuple[float, float] = (0.65, 0.9)
    background_level: tuple[float, float] = (0.15, 0.35)
    background_noise: float = 0.05
    max_pairwise_iou: float = 0.0
    clutter_per_image: tuple[int, int] = (0, 0)
    rng_seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "image_size": self.image_size,
            "objects_per_image": list(self.objects_per_image),
            "object_size": list(self.object_size),
            "object_intensity": list(self.object_intensity),
            "background_level": list(self.background_level),
            "background_noise": self.background_noise,
            "max_pairwise_iou": self.max_pairwise_iou,
            "clutter_per_image": list(self.clutter_per_image),
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SceneSpec:
        d = _checked(cls, data, "scene")
        for key in ("objects_per_image", "clutter_per_image"):
            if key in d:
                lo, hi = d[key]
                d[key] = (int(lo), int(hi))
        for key in ("object_size", "object_intensity", "background_level"):
            if key in d:
                d[key] = _pair(d[key])
        return cls(**d)


@dataclass
class AugmentConfig:
    """Training-time augmentation. ``None`` ranges disable that step."""
    scale_long_side: tuple[float, float] | None = (832.0, 1664.0)
    crop_size: int | None = 416
    aspect_jitter: tuple[float, float] = (0.8, 1.25)
    brightness_jitter: tuple[float, float] = (-0.1, 0.1)
    contrast_jitter: tuple[float, float] = (0.8, 1.2)
    rotation_enabled: bool = True
    min_box_fraction: float = 0.3
    rng_seed: int = 0

    @classmethod
    def identity(cls) -> AugmentConfig:
        return cls(
            scale_long_side=None, crop_size=None, aspect_jitter=(1.0, 1.0),
            brightness_jitter=(0.0, 0.0), contrast_jitter=(1.0, 1.0),
            rotation_enabled=False,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "scale_long_side": (
                list(self.scale_long_side) if self.scale_long_side else None
            ),
            "crop_size": self.crop_size,
            "aspect_jitter": list(self.aspect_jitter),
            "brightness_jitter": list(self.brightness_jitter),
            "contrast_jitter": list(self.contrast_jitter),
            "rotation_enabled": self.rotation_enabled,
            "min_box_fraction": self.min_box_fraction,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> AugmentConfig:
        d = _checked(cls, data, "augment")
        for key in (
            "scale_long_side", "aspect_jitter",
            "brightness_jitter", "contrast_jitter",
        ):
            if key in d:
                d[key] = _pair(d[key])
        return cls(**d)


@dataclass
class DetectorConfig:
    """Grid model shape and initialisation."""
    stride: int = 16
    receptive_field: int = 32
    hidden_units: int = 0
    init_range: float = 0.01
    objectness_bias: float = -2.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "stride": self.stride,
            "receptive_field": self.receptive_field,
            "hidden_units": self.hidden_units,
            "init_range": self.init_range,
            "objectness_bias": self.objectness_bias,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DetectorConfig:
        return cls(**_checked(cls, data, "detector"))


@dataclass
class TrainConfig:
    """SGD hyper-parameters for one training run.

    ``T`` is the gate horizon: after ``T`` iterations, unlabeled cells of
    target-domain images stop acting as negatives. ``T = None`` never
    closes the gate (plain detector loss).
    """
    lr_schedule: list[tuple[int, float]] = field(
        default_factory=lambda: [
            (10, 1e-5), (490, 1e-4), (400, 1e-5), (100, 1e-6),
        ]
    )
    iterations: int | None = None
    batch_size: int = 64
    background_slots: int = 16
    T: int | None = 200
    weight_decay: float = 0.0005
    noobj_weight: float = 0.5
    coord_weight: float = 5.0
    rng_seed: int = 0
    log_every: int = 100

    @property
    def total_iterations(self) -> int:
        if self.iterations is not None:
            return self.iterations
        return sum(n for n, _ in self.lr_schedule)

    def learning_rate(self, t: int) -> float:
        """Rate for 1-based iteration ``t``; the last phase extends."""
        if not self.lr_schedule:
            return 0.0
        boundary = 0
        for n, lr in self.lr_schedule:
            boundary += n
            if t <= boundary:
                return lr
        return self.lr_schedule[-1][1]

    def to_dict(self) -> dict[str, Any]:
        return {
            "lr_schedule": [[n, lr] for n, lr in self.lr_schedule],
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "background_slots": self.background_slots,
            "T": self.T,
            "weight_decay": self.weight_decay,
            "noobj_weight": self.noobj_weight,
            "coord_weight": self.coord_weight,
            "rng_seed": self.rng_seed,
            "log_every": self.log_every,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrainConfig:
        d = _checked(cls, data, "training")
        if "lr_schedule" in d:
            d["lr_schedule"] = [(int(n), float(lr)) for n, lr in d["lr_schedule"]]
        return cls(**d)


@dataclass
class StageSchedule:
    """How many PFOD stages to run and how predictions are merged."""
    num_stages: int = 9
    merge_score: float = 0.9
    merge_iou: float = 0.2
    warm_start: bool = False
    stage_training: TrainConfig = field(default_factory=TrainConfig)
    final_training: TrainConfig = field(
        default_factory=lambda: TrainConfig(T=None)
    )

    def to_dict(self) -> dict[str, Any]:
        return {
            "num_stages": self.num_stages,
            "merge_score": self.merge_score,
            "merge_iou": self.merge_iou,
            "warm_start": self.warm_start,
            "stage_training": self.stage_training.to_dict(),
            "final_training": self.final_training.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> StageSchedule:
        d = _checked(cls, data, "schedule")
        if "stage_training" in d:
            d["stage_training"] = TrainConfig.from_dict(d["stage_training"])
        if "final_training" in d:
            final = dict(d["final_training"])
            final.setdefault("T", None)
            d["final_training"] = TrainConfig.from_dict(final)
        return cls(**d)


@dataclass
class EvalConfig:
    """Prediction and scoring settings for evaluation and counting."""
    score_floor: float = 0.01
    nms_iou: float = 0.2
    map_iou: float = 0.5
    quality_iou: float = 0.3
    count_grid: tuple[float, ...] = DEFAULT_COUNT_GRID
    test_area: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "score_floor": self.score_floor,
            "nms_iou": self.nms_iou,
            "map_iou": self.map_iou,
            "quality_iou": self.quality_iou,
            "count_grid": list(self.count_grid),
            "test_area": self.test_area,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> EvalConfig:
        d = _checked(cls, data, "evaluation")
        if "count_grid" in d:
            d["count_grid"] = tuple(float(v) for v in d["count_grid"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Detector values
# ---------------------------------------------------------------------------

def _frozen_array(values: Any) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GridModel:
    """Detector parameters θ: an optional tanh hidden layer, then an
    objectiveness head and four regression heads over patch features.

    Feature dimension is ``R * R * channels + 1`` (trailing bias). With
    ``hidden_units = K > 0`` the heads read ``K + 1`` inputs instead.
    """
    stride: int
    receptive_field: int
    channels: int
    anchor: tuple[float, float]
    hidden: np.ndarray
    objectness: np.ndarray
    regression: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", _frozen_array(self.hidden))
        object.__setattr__(self, "objectness", _frozen_array(self.objectness))
        object.__setattr__(self, "regression", _frozen_array(self.regression))
        if self.receptive_field < self.stride:
            raise ValueError("receptive_field must be >= stride")
        if (self.receptive_field - self.stride) % 2:
            raise ValueError("receptive_field - stride must be even")
        if self.hidden.shape[0] != self.feature_dim:
            raise ValueError(
                f"hidden weights have {self.hidden.shape[0]} rows, "
                f"expected {self.feature_dim}"
            )
        if self.objectness.shape != (self.head_dim,):
            raise ValueError(f"objectness weights must have length {self.head_dim}")
        if self.regression.shape != (self.head_dim, 4):
            raise ValueError(f"regression weights must be {self.head_dim}x4")
        for arr in (self.hidden, self.objectness, self.regression):
            if not np.all(np.isfinite(arr)):
                raise ValueError("model weights must be finite")

    @property
    def feature_dim(self) -> int:
        return self.receptive_field * self.receptive_field * self.channels + 1

    @property
    def hidden_units(self) -> int:
        return int(self.hidden.shape[1])

    @property
    def head_dim(self) -> int:
        return self.hidden_units + 1 if self.hidden_units else self.feature_dim

    def weights(self) -> dict[str, np.ndarray]:
        return {
            "hidden": self.hidden,
            "objectness": self.objectness,
            "regression": self.regression,
        }

    def with_weights(self, **arrays: np.ndarray) -> GridModel:
        return replace(self, **arrays)

    def grid_shape(self, height: int, width: int) -> tuple[int, int]:
        return (height // self.stride, width // self.stride)


@dataclass(eq=False)
class GridAssignment:
    """Per-cell objectiveness targets (1, 0 or IGNORE) and regression
    targets (tx, ty, tw, th) on positive cells."""
    targets: np.ndarray
    regression: np.ndarray

    @property
    def negative(self) -> np.ndarray:
        return self.targets == 0

    def with_ignored_negatives(self) -> GridAssignment:
        targets = self.targets.copy()
        targets[targets == 0] = IGNORE
        return GridAssignment(targets, self.regression)


@dataclass(eq=False)
class ObjectivenessMap:
    """Forward output: per-cell scores in [0, 1] and decoded boxes
    as (x, y, w, h) rows."""
    scores: np.ndarray
    boxes: np.ndarray
    stride: int


# ---------------------------------------------------------------------------
# Training values
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    """Mutable SGD state: iteration counter and current snapshot θ."""
    config: TrainConfig
    theta: GridModel
    t: int = 0
    gate_activations: int = 0

    @property
    def T(self) -> int | None:
        return self.config.T

    @property
    def gate_closed(self) -> bool:
        """True once unlabeled target-domain cells are ignored."""
        return self.config.T is not None and self.t > self.config.T


@dataclass
class LossBreakdown:
    """Loss parts for one image (or a sum over a batch)."""
    objectiveness_positive: float = 0.0
    objectiveness_negative: float = 0.0
    coordinate: float = 0.0

    @property
    def total(self) -> float:
        return (
            self.objectiveness_positive
            + self.objectiveness_negative
            + self.coordinate
        )

    def __add__(self, other: LossBreakdown) -> LossBreakdown:
        return LossBreakdown(
            self.objectiveness_positive + other.objectiveness_positive,
            self.objectiveness_negative + other.objectiveness_negative,
            self.coordinate + other.coordinate,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "objectiveness_positive": self.objectiveness_positive,
            "objectiveness_negative": self.objectiveness_negative,
            "coordinate": self.coordinate,
            "total": self.total,
        }


# ---------------------------------------------------------------------------
# Evaluation values
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CountingRecord:
    """Predicted count n_i against true count n_i' for one image."""
    predicted_count: int
    true_count: int

    def __post_init__(self) -> None:
        if self.predicted_count < 0 or self.true_count < 0:
            raise ValueError("counts must be non-negative")


@dataclass
class EvalReport:
    """Detection and counting accuracy over a test set."""
    map_at_50: float
    mae: float
    rmse: float
    mae_threshold: float
    rmse_threshold: float
    num_images: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "map_at_50": self.map_at_50,
            "mae": self.mae,
            "rmse": self.rmse,
            "mae_threshold": self.mae_threshold,
            "rmse_threshold": self.rmse_threshold,
            "num_images": self.num_images,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> EvalReport:
        return cls(
            map_at_50=float(data["map_at_50"]),
            mae=float(data["mae"]),
            rmse=float(data["rmse"]),
            mae_threshold=float(data["mae_threshold"]),
            rmse_threshold=float(data["rmse_threshold"]),
            num_images=int(data["num_images"]),
        )


@dataclass
class PropagationQuality:
    """Expanded and correctly expanded box counts for one image.

    ``correct`` is None when the image has no full ground truth.
    """
    stage: int
    expanded: int
    correct: int | None = None
    image_id: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "stage": self.stage,
            "image": self.image_id,
            "expanded": self.expanded,
            "correct": self.correct,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PropagationQuality:
        correct = data.get("correct")
        return cls(
            stage=int(data["stage"]),
            expanded=int(data["expanded"]),
            correct=None if correct is None else int(correct),
            image_id=str(data.get("image", "")),
        )


@dataclass
class StageLog:
    """State of the label sets at the end of one propagation stage."""
    stage: int
    qualities: list[PropagationQuality] = field(default_factory=list)
    model_checksum: str = ""
    boxes_added: int = 0

    @property
    def total_expanded(self) -> int:
        return sum(q.expanded for q in self.qualities)

    @property
    def median_correct(self) -> float | None:
        values = [q.correct for q in self.qualities if q.correct is not None]
        if not values:
            return None
        return float(np.median(values))

    def to_dict(self) -> dict[str, Any]:
        return {
            "stage": self.stage,
            "model_checksum": self.model_checksum,
            "boxes_added": self.boxes_added,
            "total_expanded": self.total_expanded,
            "median_correct": self.median_correct,
        }
