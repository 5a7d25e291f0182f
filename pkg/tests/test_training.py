"""Tests for the gated loss, its gradient, and the SGD trainer."""

import logging

import numpy as np
import pytest

from propcount.detector import assign_targets, forward, init_model, model_checksum
from propcount.models import (
    Box,
    DetectorConfig,
    DivergenceError,
    LabelSet,
    TrainConfig,
    TrainState,
)
from propcount.training import (
    Trainer,
    image_loss,
    loss_and_gradient,
    objectiveness_loss,
    sgd_step,
    train,
)

from tests.conftest import labels_for

LABELS = [Box(3, 4, 9, 7), Box(13, 12, 6, 10)]


def _state(T=None, t=0, **kw):
    config = TrainConfig(T=T, **kw)
    return TrainState(config, theta=None, t=t)


def _model(seed, hidden_units=0):
    config = DetectorConfig(stride=8, receptive_field=12, hidden_units=hidden_units,
                            init_range=0.3, objectness_bias=0.0)
    return init_model(config, 1, (8.0, 8.0), np.random.default_rng(seed))


def _numeric_gradient(pixels, assignment, model, state, is_target, name, index, eps=1e-6):
    def loss_with(delta):
        arr = np.array(model.weights()[name])
        arr.flat[index] += delta
        perturbed = model.with_weights(**{name: arr})
        return image_loss(pixels, assignment, perturbed, state, is_target).total

    return (loss_with(eps) - loss_with(-eps)) / (2 * eps)


class TestObjectivenessLoss:
    def test_positive_at_one(self):
        assert objectiveness_loss(1.0, 1, True, 0, 10) == 0.0

    def test_negative_before_gate(self):
        assert objectiveness_loss(0.3, 0, True, 5, 10) == pytest.approx(0.09)

    def test_negative_after_gate(self):
        assert objectiveness_loss(0.3, 0, True, 11, 10) == 0.0

    def test_gate_boundary_still_penalises(self):
        assert objectiveness_loss(0.3, 0, True, 10, 10) == pytest.approx(0.09)

    def test_background_always_penalised(self):
        assert objectiveness_loss(0.3, 0, False, 10**6, 10) == pytest.approx(0.09)

    def test_no_horizon(self):
        assert objectiveness_loss(0.3, 0, True, 10**6, None) == pytest.approx(0.09)

    def test_positive_ignores_gate(self):
        assert objectiveness_loss(0.5, 1, True, 50, 10) == pytest.approx(0.25)

    @pytest.mark.parametrize("f,f_hat", [(1.2, 1), (-0.1, 0), (0.5, 2)])
    def test_rejects(self, f, f_hat):
        with pytest.raises(ValueError):
            objectiveness_loss(f, f_hat, True, 0, 10)


class TestImageLoss:
    def test_closed_form_for_zero_model(self, tiny_zero_model):
        # one anchor-sized box centred on cell (1, 1): no regression error
        labels = labels_for("a", [Box(7, 7, 10, 10)])
        assignment = assign_targets(labels, (32, 32), tiny_zero_model)
        loss = image_loss(np.zeros((32, 32)), assignment, tiny_zero_model, _state())
        assert loss.objectiveness_positive == pytest.approx(0.25)
        assert loss.objectiveness_negative == pytest.approx(0.5 * 15 * 0.25)
        assert loss.coordinate == pytest.approx(0.0, abs=1e-20)

    def test_centre_offsets_compare_after_sigmoid(self, tiny_zero_model):
        # centre (14, 17): cell (2, 1) at offsets (0.75, 0.125); height twice the anchor
        labels = labels_for("a", [Box(9, 7, 10, 20)])
        assignment = assign_targets(labels, (32, 32), tiny_zero_model)
        loss = image_loss(np.zeros((32, 32)), assignment, tiny_zero_model, _state())
        expected = 5.0 * ((0.5 - 0.75) ** 2 + (0.5 - 0.125) ** 2 + np.log(2.0) ** 2)
        assert loss.coordinate == pytest.approx(expected)

    def test_closed_gate_drops_target_negatives(self, tiny_zero_model):
        labels = labels_for("a", [Box(7, 7, 10, 10)])
        assignment = assign_targets(labels, (32, 32), tiny_zero_model)
        loss = image_loss(np.zeros((32, 32)), assignment, tiny_zero_model,
                          _state(T=3, t=4))
        assert loss.objectiveness_negative == 0.0
        assert loss.total == pytest.approx(0.25)

    def test_background_penalised_after_gate(self, tiny_zero_model):
        assignment = assign_targets(LabelSet("bg", ()), (32, 32), tiny_zero_model)
        loss = image_loss(np.zeros((32, 32)), assignment, tiny_zero_model,
                          _state(T=3, t=4), is_target_domain=False)
        assert loss.objectiveness_negative == pytest.approx(0.5 * 16 * 0.25)

    @pytest.mark.parametrize("T,t,is_target", [
        (None, 0, True), (5, 5, True), (5, 6, True), (5, 6, False),
    ])
    def test_sums_cell_losses(self, T, t, is_target):
        model = _model(7)
        pixels = np.random.default_rng(7).uniform(size=(24, 24))
        labels = labels_for("a", LABELS if is_target else [])
        assignment = assign_targets(labels, pixels.shape, model)
        state = _state(T=T, t=t, noobj_weight=0.3)
        scores = forward(pixels, model).scores.ravel()

        expected_pos = expected_neg = 0.0
        for f, f_hat in zip(scores, assignment.targets.ravel()):
            if f_hat == 1:
                expected_pos += objectiveness_loss(float(f), 1, is_target, t, T)
            elif f_hat == 0:
                expected_neg += 0.3 * objectiveness_loss(float(f), 0, is_target, t, T)

        loss = image_loss(pixels, assignment, model, state, is_target)
        assert loss.objectiveness_positive == pytest.approx(expected_pos, rel=1e-12)
        assert loss.objectiveness_negative == pytest.approx(expected_neg, rel=1e-12, abs=1e-15)

    def test_grid_mismatch(self, tiny_zero_model):
        assignment = assign_targets(LabelSet("a", ()), (16, 16), tiny_zero_model)
        with pytest.raises(ValueError, match="cells"):
            image_loss(np.zeros((32, 32)), assignment, tiny_zero_model, _state())


class TestGradient:
    CASES = [
        # (hidden units, T, t, target domain)
        (0, None, 0, True),
        (0, 5, 1, True),
        (0, 5, 10, True),
        (0, 5, 10, False),
        (4, 5, 1, True),
    ]

    @pytest.mark.parametrize("hidden_units,T,t,is_target", CASES)
    @pytest.mark.parametrize("seed", [0, 1])
    def test_matches_finite_differences(self, hidden_units, T, t, is_target, seed):
        rng = np.random.default_rng(100 + seed)
        pixels = rng.uniform(size=(24, 24))
        model = _model(seed, hidden_units)
        state = _state(T=T, t=t)
        labels = labels_for("a", LABELS if is_target else [])
        assignment = assign_targets(labels, pixels.shape, model)

        _, grads = loss_and_gradient(pixels, assignment, model, state, is_target)
        checked = 0
        for name, w in model.weights().items():
            if w.size == 0:
                continue
            for index in rng.choice(w.size, size=min(w.size, 60), replace=False):
                numeric = _numeric_gradient(
                    pixels, assignment, model, state, is_target, name, int(index),
                )
                analytic = grads[name].flat[int(index)]
                scale = max(abs(numeric), abs(analytic))
                assert abs(numeric - analytic) <= 1e-5 * scale + 1e-9, (name, index)
                checked += 1
        assert checked >= 80

    def test_closed_gate_zeroes_unlabeled_image(self):
        model = _model(3)
        pixels = np.random.default_rng(3).uniform(size=(24, 24))
        assignment = assign_targets(LabelSet("a", ()), pixels.shape, model)
        loss, grads = loss_and_gradient(pixels, assignment, model, _state(T=2, t=3))
        assert loss.total == 0.0
        for g in grads.values():
            np.testing.assert_array_equal(g, 0.0)

    def test_open_gate_penalises_unlabeled_image(self):
        model = _model(3)
        pixels = np.random.default_rng(3).uniform(size=(24, 24))
        assignment = assign_targets(LabelSet("a", ()), pixels.shape, model)
        loss, grads = loss_and_gradient(pixels, assignment, model, _state(T=2, t=2))
        assert loss.objectiveness_negative > 0
        assert np.abs(grads["objectness"]).max() > 0


class TestSGD:
    def test_zero_rate_is_identity(self):
        model = _model(0)
        grads = {name: np.ones_like(w) for name, w in model.weights().items()}
        updated = sgd_step(model, grads, 0.0, 0.1)
        assert model_checksum(updated) == model_checksum(model)

    def test_decay_skips_bias_row(self):
        model = _model(0)
        grads = {name: np.zeros_like(w) for name, w in model.weights().items()}
        updated = sgd_step(model, grads, 1.0, 0.5)
        np.testing.assert_allclose(updated.objectness[:-1], 0.5 * model.objectness[:-1])
        assert updated.objectness[-1] == model.objectness[-1]

    def test_descends(self):
        model = _model(0)
        grads = {name: np.ones_like(w) for name, w in model.weights().items()}
        updated = sgd_step(model, grads, 0.1, 0.0)
        np.testing.assert_allclose(updated.regression, model.regression - 0.1)


class TestTrainer:
    def _train_set(self, small_records, boxes=2):
        return [
            (r, labels_for(r.image_id, r.boxes[:boxes])) for r in small_records
        ]

    def _state(self, config, seed=0):
        return TrainState(config, _model(seed))

    def test_zero_iterations(self, small_records, small_pool):
        state = self._state(TrainConfig(lr_schedule=[], log_every=0))
        before = state.theta
        assert train(self._train_set(small_records), small_pool, state) is before
        assert state.t == 0

    def test_zero_rate_keeps_weights(self, small_records, small_pool):
        config = TrainConfig(lr_schedule=[(3, 0.0)], batch_size=4, background_slots=1,
                             weight_decay=0.0, log_every=0)
        state = self._state(config)
        before = model_checksum(state.theta)
        train(self._train_set(small_records), small_pool, state)
        assert state.t == 3
        assert model_checksum(state.theta) == before

    def test_loss_history(self, small_records, small_pool, fast_train_config):
        state = self._state(fast_train_config)
        trainer = Trainer(self._train_set(small_records), small_pool, state)
        trainer.run()
        assert len(trainer.history) == 3
        assert all(np.isfinite(h.total) for h in trainer.history)

    def test_gate_activations(self, small_records, small_pool, fast_train_config):
        # T = 1: iterations 2 and 3 each see three target images
        state = self._state(fast_train_config)
        train(self._train_set(small_records), small_pool, state)
        assert state.gate_activations == 6

    def test_no_gate_without_horizon(self, small_records, small_pool):
        config = TrainConfig(lr_schedule=[(3, 1e-3)], batch_size=4, background_slots=1,
                             T=None, log_every=0)
        state = self._state(config)
        train(self._train_set(small_records), small_pool, state)
        assert state.gate_activations == 0

    def test_deterministic(self, small_records, small_pool, fast_train_config, small_augment):
        checksums = []
        for _ in range(2):
            state = self._state(fast_train_config)
            train(self._train_set(small_records), small_pool, state, small_augment)
            checksums.append(model_checksum(state.theta))
        assert checksums[0] == checksums[1]

    def test_learns_something(self, small_records, small_pool, fast_train_config):
        state = self._state(fast_train_config)
        before = model_checksum(state.theta)
        train(self._train_set(small_records), small_pool, state)
        assert model_checksum(state.theta) != before

    def test_divergence(self, small_records, small_pool):
        config = TrainConfig(lr_schedule=[(5, 1e300)], batch_size=4, background_slots=1,
                             T=None, log_every=0)
        state = self._state(config)
        with pytest.raises(DivergenceError) as info:
            train(self._train_set(small_records), small_pool, state)
        assert 1 <= info.value.iteration <= 5

    def test_empty_pool_warns(self, small_records, fast_train_config, caplog):
        state = self._state(fast_train_config)
        with caplog.at_level(logging.WARNING, logger="propcount.training"):
            trainer = Trainer(self._train_set(small_records), [], state)
        assert "Background pool is empty" in caplog.text
        assert trainer.pool_slots == 0
        assert all(is_target for _, _, is_target in trainer._batch())

    def test_batch_composition(self, small_records, small_pool, fast_train_config):
        trainer = Trainer(self._train_set(small_records), small_pool,
                          self._state(fast_train_config))
        flags = [is_target for _, _, is_target in trainer._batch()]
        assert flags == [True, True, True, False]

    def test_rejects_empty_train_set(self, small_pool, fast_train_config):
        with pytest.raises(ValueError):
            Trainer([], small_pool, self._state(fast_train_config))

    def test_logs_progress(self, small_records, small_pool, caplog):
        config = TrainConfig(lr_schedule=[(2, 1e-3)], batch_size=2, background_slots=1,
                             log_every=1)
        with caplog.at_level(logging.INFO, logger="propcount.training"):
            train(self._train_set(small_records), small_pool, self._state(config))
        assert "iter 2/2" in caplog.text
