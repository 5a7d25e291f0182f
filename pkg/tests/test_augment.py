"""Tests for training-time augmentation."""

from dataclasses import replace

import numpy as np
import pytest

from propcount.augment import (
    RIGHT_ANGLES,
    augment,
    clip_box,
    draw_rotation,
    resize_to_area,
    rot90_box,
    rotate,
    transform_box,
    warp,
)
from propcount.models import AugmentConfig, Box, LabeledBox, LabelSet, Provenance

from tests.conftest import flat_record, labels_for


def _marked(size=32, box=Box(4, 6, 8, 5)):
    """Dark image with one bright rectangle."""
    pixels = np.zeros((size, size))
    pixels[int(box.y):int(box.y2), int(box.x):int(box.x2)] = 1.0
    return pixels, box


class TestRotationSampler:
    def test_bucket_frequencies(self):
        rng = np.random.default_rng(0)
        n = 100_000
        counts = np.zeros(4)
        for _ in range(n):
            bucket, _ = draw_rotation(rng)
            counts[bucket] += 1
        np.testing.assert_allclose(counts / n, 0.25, atol=0.01)

    def test_bucket_angles(self):
        rng = np.random.default_rng(1)
        for _ in range(5_000):
            bucket, angle = draw_rotation(rng)
            assert 0.0 <= angle < 360.0
            if bucket == 0:
                assert angle == 0.0
            elif bucket == 1:
                assert angle in RIGHT_ANGLES
            elif bucket == 2:
                nearest = min(abs(angle - a) for a in (0.0, *RIGHT_ANGLES, 360.0))
                assert nearest <= 10.0


class TestRightAngles:
    def test_rot90_formula(self):
        assert rot90_box(Box(4, 6, 8, 5), 32) == Box(6, 20, 5, 8)

    def test_rot90_follows_pixels(self):
        pixels, box = _marked()
        rotated, [moved], matrix = rotate(pixels, [box], 90.0)
        np.testing.assert_array_equal(matrix, np.eye(3))
        inside = rotated[int(moved.y):int(moved.y2), int(moved.x):int(moved.x2)]
        assert inside.min() == 1.0
        assert rotated.sum() == pixels.sum()

    def test_centered_box_survives_180(self):
        box = Box(10, 10, 12, 12)
        _, [moved], _ = rotate(np.zeros((32, 32)), [box], 180.0)
        assert moved == box

    def test_four_quarter_turns_are_identity(self):
        pixels, box = _marked()
        out, boxes = pixels, [box]
        for _ in range(4):
            out, boxes, _ = rotate(out, boxes, 90.0)
        np.testing.assert_array_equal(out, pixels)
        assert boxes == [box]

    def test_non_right_angle_returns_matrix(self):
        pixels = np.zeros((10, 20))
        out, _, matrix = rotate(pixels, [], 30.0)
        assert out is pixels
        assert not np.allclose(matrix, np.eye(3))


class TestBoxes:
    def test_transform_scale(self):
        assert transform_box(Box(2, 2, 4, 4), np.diag([2.0, 2.0, 1.0])) == (4, 4, 12, 12)

    def test_clip_keeps_enough(self):
        assert clip_box((-5, 0, 5, 10), 32, 32, 0.3) == Box(0, 0, 5, 10)

    def test_clip_drops_small_remainder(self):
        assert clip_box((-8, 0, 2, 10), 32, 32, 0.3) is None

    def test_clip_drops_outside(self):
        assert clip_box((40, 40, 50, 50), 32, 32, 0.3) is None


class TestWarp:
    def test_identity(self):
        pixels = np.random.default_rng(2).uniform(size=(9, 7))
        out = warp(pixels, np.eye(3), (9, 7), 0.0)
        np.testing.assert_allclose(out, pixels, atol=1e-12)

    def test_resize_to_area(self):
        out, sx, sy = resize_to_area(np.zeros((32, 32)), 64)
        assert out.shape == (64, 64)
        assert (sx, sy) == (2.0, 2.0)

    def test_resize_noop(self):
        pixels = np.zeros((16, 64))
        out, sx, sy = resize_to_area(pixels, 32)
        assert out is pixels
        assert (sx, sy) == (1.0, 1.0)


class TestAugment:
    def test_identity_config(self):
        pixels, box = _marked()
        record = flat_record("m", boxes=[box])
        record.pixels = pixels
        out, labels = augment(record, labels_for("m", [box]), AugmentConfig.identity(),
                              np.random.default_rng(0))
        np.testing.assert_array_equal(out, pixels)
        assert labels.seeds == [box]

    def test_boxes_stay_in_bounds(self, small_records, small_augment):
        rng = np.random.default_rng(3)
        record = small_records[0]
        labels = labels_for(record.image_id, record.boxes)
        for _ in range(50):
            out, moved = augment(record, labels, small_augment, rng)
            assert out.shape == (32, 32)
            assert 0.0 <= out.min() and out.max() <= 1.0
            assert len(moved) <= len(labels)
            for lb in moved.boxes:
                assert lb.box.x >= 0 and lb.box.y >= 0
                assert lb.box.x2 <= 32 + 1e-9 and lb.box.y2 <= 32 + 1e-9

    def test_provenance_preserved(self, small_records):
        record = small_records[0]
        seed, *rest = record.boxes
        labels = LabelSet(record.image_id, (
            LabeledBox(seed),
            *(LabeledBox(b, Provenance.PROPAGATED, 1) for b in rest),
        ), stage=2)
        # pure rescale keeps every box
        config = replace(AugmentConfig.identity(), scale_long_side=(48.0, 48.0))
        _, moved = augment(record, labels, config, np.random.default_rng(4))
        assert [lb.provenance for lb in moved.boxes] == [lb.provenance for lb in labels.boxes]
        assert moved.stage == 2
        assert moved.boxes[0].box.w == pytest.approx(seed.w * 0.75)

    def test_crop_larger_than_image_pads_with_mean(self):
        record = flat_record("f", size=16, value=0.4)
        config = replace(AugmentConfig.identity(), crop_size=32)
        out, _ = augment(record, labels_for("f", []), config, np.random.default_rng(5))
        assert out.shape == (32, 32)
        np.testing.assert_allclose(out, 0.4)

    def test_deterministic_for_seed(self, small_records, small_augment):
        record = small_records[1]
        labels = labels_for(record.image_id, record.boxes)
        a = augment(record, labels, small_augment, np.random.default_rng(9))
        b = augment(record, labels, small_augment, np.random.default_rng(9))
        np.testing.assert_array_equal(a[0], b[0])
        assert a[1] == b[1]

    def test_rejects_foreign_labels(self, small_records):
        with pytest.raises(ValueError):
            augment(small_records[0], labels_for("other", []),
                    AugmentConfig.identity(), np.random.default_rng(0))
