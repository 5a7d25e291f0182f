"""Shared fixtures: small scenes, tiny detectors and fast training configs.

Sizes are chosen so every non-slow test runs in well under a second:
64-pixel scenes, 8-pixel cells and 12-pixel patches.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from propcount.dataset import generate_background_pool, generate_scenes
from propcount.detector import zero_model
from propcount.models import (
    AugmentConfig,
    Box,
    ImageRecord,
    LabelSet,
    SceneSpec,
    TrainConfig,
)


# ============================================================
# RANDOMNESS AND BOXES
# ============================================================

@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def random_box(rng: np.random.Generator, canvas: float = 40.0,
               min_side: float = 1.0, max_side: float = 15.0) -> Box:
    w = float(rng.uniform(min_side, max_side))
    h = float(rng.uniform(min_side, max_side))
    return Box(float(rng.uniform(0, canvas)), float(rng.uniform(0, canvas)), w, h)


def labels_for(image_id: str, boxes: list[Box]) -> LabelSet:
    return LabelSet.from_seeds(image_id, boxes)


def flat_record(image_id: str = "flat", size: int = 32, value: float = 0.5,
                boxes: list[Box] | None = None) -> ImageRecord:
    return ImageRecord(
        image_id=image_id, width=size, height=size,
        pixels=np.full((size, size), value), boxes=boxes or [],
    )


# ============================================================
# SCENES
# ============================================================

@pytest.fixture
def small_scene_spec() -> SceneSpec:
    return SceneSpec(
        image_size=64,
        objects_per_image=(3, 4),
        object_size=(8.0, 12.0),
        rng_seed=3,
    )


@pytest.fixture
def small_records(small_scene_spec) -> list[ImageRecord]:
    return generate_scenes(small_scene_spec, 4, split="train")


@pytest.fixture
def small_pool(small_scene_spec) -> list[ImageRecord]:
    return generate_background_pool(small_scene_spec, 2)


# ============================================================
# DETECTOR AND TRAINING
# ============================================================

@pytest.fixture
def tiny_zero_model():
    return zero_model(stride=8, receptive_field=12, anchor=(10.0, 10.0))


@pytest.fixture
def fast_train_config() -> TrainConfig:
    return TrainConfig(
        lr_schedule=[(3, 1e-3)],
        batch_size=4,
        background_slots=1,
        T=1,
        log_every=0,
    )


@pytest.fixture
def small_augment() -> AugmentConfig:
    return AugmentConfig(
        scale_long_side=(48.0, 80.0),
        crop_size=32,
        aspect_jitter=(0.9, 1.1),
        brightness_jitter=(-0.05, 0.05),
        contrast_jitter=(0.9, 1.1),
    )


# ============================================================
# ON-DISK BENCHMARK AND RUN CONFIG
# ============================================================

@pytest.fixture
def benchmark_dir(tmp_path, small_scene_spec) -> Path:
    from propcount.run import generate_benchmark

    out = tmp_path / "data"
    generate_benchmark(small_scene_spec, out, count=4, background_count=2, test_count=2)
    return out


@pytest.fixture
def run_config_path(tmp_path, benchmark_dir, small_scene_spec) -> Path:
    """Run config for the tiny on-disk benchmark; trains a few iterations."""
    fast = {
        "lr_schedule": [[3, 1e-3]],
        "batch_size": 4,
        "background_slots": 1,
        "log_every": 0,
    }
    config = {
        "paths": {
            "train_annotations": "data/annotations.jsonl",
            "test_annotations": "data/annotations.jsonl",
            "background_annotations": "data/annotations.jsonl",
            "output_dir": "runs",
        },
        "subsample": {"num_images": 3, "boxes_per_image": 2, "rng_seed": 0},
        "scene": small_scene_spec.to_dict(),
        "detector": {"stride": 8, "receptive_field": 12},
        "augment": {
            "scale_long_side": [48, 80],
            "crop_size": 32,
            "aspect_jitter": [0.9, 1.1],
        },
        "schedule": {
            "num_stages": 2,
            "merge_score": 0.5,
            "stage_training": {**fast, "T": 1},
            "final_training": fast,
        },
        "rng_seed": 5,
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(config))
    return path
