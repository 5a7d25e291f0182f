"""Run configuration: one JSON file, dotted overrides, validation, presets.

    {
      "paths": {"train_annotations": "data/annotations.jsonl", ...},
      "subsample": {"num_images": 20, "boxes_per_image": 5, "rng_seed": 0},
      "schedule": {"num_stages": 3, "stage_training": {"T": 20}},
      ...
    }

Relative paths resolve against the config file's directory. Sections left
out take the desk-scale defaults below.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from propcount.models import (
    AugmentConfig,
    ConfigError,
    DetectorConfig,
    EvalConfig,
    SceneSpec,
    StageSchedule,
    SubsampleSpec,
    TrainConfig,
)

OUTPUT_ROOT_ENV = "PROPCOUNT_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"

# Iterations and learning rates of the full-scale schedule.
REFERENCE_SCHEDULE: tuple[tuple[int, float], ...] = (
    (100, 1e-4), (4900, 1e-3), (4000, 1e-4), (1000, 1e-5),
)
REFERENCE_T = 200
# Desk rates are the reference rates × DESK_LR_SCALE, trained with
# coord_weight DESK_COORD_WEIGHT.
DESK_LR_SCALE = 0.3
DESK_COORD_WEIGHT = 1.0


# ============================================================
# PRESETS
# ============================================================

def reference_lr_schedule(
    scale: float = 0.1, lr_scale: float = DESK_LR_SCALE,
) -> list[tuple[int, float]]:
    """Four-phase schedule with iterations × ``scale`` and rates × ``lr_scale``."""
    if scale <= 0 or lr_scale < 0:
        raise ValueError("scale must be positive and lr_scale non-negative")
    return [(max(1, round(n * scale)), lr * lr_scale) for n, lr in REFERENCE_SCHEDULE]


def desk_training(scale: float = 0.1, final: bool = False) -> TrainConfig:
    """Scaled schedule; the gate horizon shrinks with it. ``final`` never gates.

    Batches are half the reference size with the same 1:3 background to
    target ratio.
    """
    return TrainConfig(
        lr_schedule=reference_lr_schedule(scale),
        T=None if final else max(0, round(REFERENCE_T * scale)),
        batch_size=32,
        background_slots=8,
        coord_weight=DESK_COORD_WEIGHT,
    )


def desk_augment_config() -> AugmentConfig:
    """Full-scale ranges rescaled to 256-pixel synthetic scenes."""
    return AugmentConfig(
        scale_long_side=(171.0, 341.0),
        crop_size=96,
        aspect_jitter=(0.9, 1.1),
        brightness_jitter=(-0.05, 0.05),
        contrast_jitter=(0.9, 1.1),
    )


def desk_schedule() -> StageSchedule:
    return StageSchedule(
        stage_training=desk_training(),
        final_training=desk_training(final=True),
    )


# ============================================================
# OVERRIDES
# ============================================================

def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b.c=value`` → (["a", "b", "c"], value); JSON values, else raw string."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Return a copy of ``data`` with every dotted override applied."""
    data = json.loads(json.dumps(data))
    for text in overrides:
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {text!r}: {part} is not a section")
            node = child
        node[path[-1]] = value
    return data


# ============================================================
# CONFIG
# ============================================================

@dataclass
class DataPaths:
    train_annotations: str | None = None
    test_annotations: str | None = None
    background_annotations: str | None = None
    background_count: int = 0
    train_split: str | None = "train"
    test_split: str | None = "test"
    background_split: str | None = "background"
    output_dir: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DataPaths:
        if not isinstance(data, dict):
            raise ConfigError("paths: expected an object")
        unknown = sorted(set(data) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"paths: unknown keys {unknown}")
        return cls(**data)


@dataclass
class RunConfig:
    """Everything one ``run`` needs."""
    paths: DataPaths = field(default_factory=DataPaths)
    subsample: SubsampleSpec = field(default_factory=SubsampleSpec)
    scene: SceneSpec = field(default_factory=SceneSpec)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    augment: AugmentConfig = field(default_factory=desk_augment_config)
    schedule: StageSchedule = field(default_factory=desk_schedule)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    rng_seed: int = 0
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    _SECTIONS = {
        "subsample": SubsampleSpec,
        "scene": SceneSpec,
        "detector": DetectorConfig,
        "augment": AugmentConfig,
        "evaluation": EvalConfig,
    }

    def to_dict(self) -> dict[str, Any]:
        return {
            "paths": self.paths.to_dict(),
            "subsample": self.subsample.to_dict(),
            "scene": self.scene.to_dict(),
            "detector": self.detector.to_dict(),
            "augment": self.augment.to_dict(),
            "schedule": self.schedule.to_dict(),
            "evaluation": self.evaluation.to_dict(),
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], base_dir: Path | None = None) -> RunConfig:
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {"paths", "schedule", "rng_seed", *cls._SECTIONS}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config sections {unknown}")

        kwargs: dict[str, Any] = {}
        try:
            if "paths" in data:
                kwargs["paths"] = DataPaths.from_dict(data["paths"])
            for name, section in cls._SECTIONS.items():
                if name in data:
                    kwargs[name] = section.from_dict(data[name])
            if "schedule" in data:
                kwargs["schedule"] = _schedule(data["schedule"])
            if "rng_seed" in data:
                kwargs["rng_seed"] = int(data["rng_seed"])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid config value: {e}") from e
        return cls(**kwargs, base_dir=base_dir or Path("."))

    @classmethod
    def load(cls, path: str | Path, overrides: list[str] | None = None) -> RunConfig:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: malformed JSON ({e.msg})") from e
        if overrides:
            data = apply_overrides(data, overrides)
        return cls.from_dict(data, base_dir=path.parent)

    # -- paths -----------------------------------------------------------

    def resolve(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def output_root(self) -> Path:
        if self.paths.output_dir is not None:
            return self.resolve(self.paths.output_dir)  # type: ignore[return-value]
        return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))

    # -- validation ------------------------------------------------------

    def problems(self) -> list[str]:
        """Every configuration problem found, in a stable order."""
        found: list[str] = []
        p = self.paths

        for key in ("train_annotations", "test_annotations"):
            value = getattr(p, key)
            if value is None:
                found.append(f"paths.{key} is required")
            elif not self.resolve(value).exists():
                found.append(f"paths.{key} does not exist: {self.resolve(value)}")
        if p.background_annotations is not None:
            bg = self.resolve(p.background_annotations)
            if not bg.exists():
                found.append(f"paths.background_annotations does not exist: {bg}")
        if p.background_count < 0:
            found.append("paths.background_count must be >= 0")
        found.extend(scene_problems(self.scene))

        s = self.subsample
        for key in ("num_images", "boxes_per_image"):
            value = getattr(s, key)
            if value is not None and value < 0:
                found.append(f"subsample.{key} must be >= 0 or ALL")

        d = self.detector
        if d.stride < 1:
            found.append("detector.stride must be >= 1")
        if d.receptive_field < d.stride:
            found.append("detector.receptive_field must be >= detector.stride")
        elif (d.receptive_field - d.stride) % 2:
            found.append("detector.receptive_field - detector.stride must be even")
        if d.hidden_units < 0:
            found.append("detector.hidden_units must be >= 0")
        if d.init_range < 0:
            found.append("detector.init_range must be >= 0")

        a = self.augment
        if a.crop_size is not None and a.crop_size < d.stride:
            found.append("augment.crop_size must be at least one detector cell")
        if not 0.0 <= a.min_box_fraction <= 1.0:
            found.append("augment.min_box_fraction must lie in [0, 1]")
        for key in ("scale_long_side", "aspect_jitter", "brightness_jitter", "contrast_jitter"):
            rng = getattr(a, key)
            if rng is not None and rng[0] > rng[1]:
                found.append(f"augment.{key} must be an increasing [lo, hi] pair")

        sch = self.schedule
        if sch.num_stages < 0:
            found.append("schedule.num_stages must be >= 0")
        if not 0.0 < sch.merge_score <= 1.0:
            found.append("schedule.merge_score must lie in (0, 1]")
        if not 0.0 < sch.merge_iou <= 1.0:
            found.append("schedule.merge_iou must lie in (0, 1]")
        for name in ("stage_training", "final_training"):
            found.extend(_training_problems(f"schedule.{name}", getattr(sch, name)))

        e = self.evaluation
        if not 0.0 <= e.score_floor <= 1.0:
            found.append("evaluation.score_floor must lie in [0, 1]")
        for key in ("nms_iou", "map_iou", "quality_iou"):
            if not 0.0 < getattr(e, key) <= 1.0:
                found.append(f"evaluation.{key} must lie in (0, 1]")
        grid = e.count_grid
        if not grid:
            found.append("evaluation.count_grid must not be empty")
        elif any(b <= a for a, b in zip(grid, grid[1:])) or not 0 <= grid[0] <= grid[-1] <= 1:
            found.append("evaluation.count_grid must increase strictly within [0, 1]")
        if e.test_area is not None and e.test_area < d.stride:
            found.append("evaluation.test_area must be at least one detector cell")
        return found

    def validate(self) -> None:
        found = self.problems()
        if found:
            listing = "\n  - ".join(found)
            raise ConfigError(f"{len(found)} config problem(s):\n  - {listing}")


def scene_problems(spec: SceneSpec, prefix: str = "scene") -> list[str]:
    """Problems that would stop the scene generator."""
    found: list[str] = []
    if spec.image_size < 1:
        found.append(f"{prefix}.image_size must be >= 1")
    for key in ("objects_per_image", "clutter_per_image"):
        lo, hi = getattr(spec, key)
        if not 0 <= lo <= hi:
            found.append(f"{prefix}.{key} must be an increasing [lo, hi] pair >= 0")
    lo, hi = spec.object_size
    if not 1 <= lo <= hi <= spec.image_size:
        found.append(f"{prefix}.object_size must satisfy 1 <= lo <= hi <= image_size")
    for key in ("object_intensity", "background_level"):
        lo, hi = getattr(spec, key)
        if lo > hi:
            found.append(f"{prefix}.{key} must be an increasing [lo, hi] pair")
    if spec.background_noise < 0:
        found.append(f"{prefix}.background_noise must be >= 0")
    if not 0.0 <= spec.max_pairwise_iou <= 1.0:
        found.append(f"{prefix}.max_pairwise_iou must lie in [0, 1]")
    return found


def _schedule(data: dict[str, Any]) -> StageSchedule:
    """StageSchedule whose omitted training sections keep the desk presets."""
    if not isinstance(data, dict):
        raise ConfigError("schedule: expected an object")
    data = dict(data)
    base = desk_schedule()
    for name, preset in (
        ("stage_training", base.stage_training),
        ("final_training", base.final_training),
    ):
        data[name] = {**preset.to_dict(), **data.get(name, {})}
    return StageSchedule.from_dict(data)


def _training_problems(prefix: str, config: TrainConfig) -> list[str]:
    found = []
    if config.batch_size < 1:
        found.append(f"{prefix}.batch_size must be >= 1")
    if not 0 <= config.background_slots <= config.batch_size:
        found.append(f"{prefix}.background_slots must lie in [0, batch_size]")
    if config.T is not None and config.T < 0:
        found.append(f"{prefix}.T must be >= 0 or null")
    if config.iterations is not None and config.iterations < 0:
        found.append(f"{prefix}.iterations must be >= 0")
    if any(n < 0 or lr < 0 for n, lr in config.lr_schedule):
        found.append(f"{prefix}.lr_schedule needs non-negative iterations and rates")
    if config.weight_decay < 0:
        found.append(f"{prefix}.weight_decay must be >= 0")
    for key in ("noobj_weight", "coord_weight"):
        if getattr(config, key) < 0:
            found.append(f"{prefix}.{key} must be >= 0")
    return found
