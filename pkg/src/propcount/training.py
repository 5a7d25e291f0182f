"""SGD training of the grid detector under the gated objectiveness loss.

Per cell u with score f = f(u) and label f̂:

    f̂ = 1                          (f - 1)²
    f̂ = 0, background-pool image    f²            always
    f̂ = 0, target-domain image      f²  while t <= T, 0 afterwards

Negative cells are weighted by ``noobj_weight``; positive cells add
``coord_weight`` times the squared regression error. Once the gate
closes, the negatives of target-domain images are marked IGNORE and
contribute neither loss nor gradient. ``T = None`` keeps the gate open
for the whole run, which is the plain detector loss.

Gradients are averaged over the batch before each update.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence

import numpy as np
from scipy.special import expit

from propcount.augment import augment
from propcount.detector import (
    HeadOutputs,
    assign_targets,
    evaluate_heads,
    extract_features,
)
from propcount.models import (
    AugmentConfig,
    DivergenceError,
    GridAssignment,
    GridModel,
    ImageRecord,
    LabelSet,
    LossBreakdown,
    TrainConfig,
    TrainState,
)

logger = logging.getLogger(__name__)

Gradients = dict[str, np.ndarray]


# ============================================================
# LOSS
# ============================================================

def objectiveness_loss(
    f: float, f_hat: int, is_target_domain: bool, t: int, T: int | None,
) -> float:
    """Loss of one cell's objectiveness score."""
    if not 0.0 <= f <= 1.0:
        raise ValueError(f"score must lie in [0, 1], got {f}")
    if f_hat == 1:
        return (f - 1.0) ** 2
    if f_hat != 0:
        raise ValueError(f"f_hat must be 0 or 1, got {f_hat}")
    if is_target_domain and T is not None and t > T:
        return 0.0
    return f * f


def gated_assignment(
    assignment: GridAssignment, state: TrainState, is_target_domain: bool,
) -> GridAssignment:
    if is_target_domain and state.gate_closed:
        return assignment.with_ignored_negatives()
    return assignment


def _head_terms(
    heads: HeadOutputs, assignment: GridAssignment, config: TrainConfig,
) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Loss parts and their derivatives w.r.t. logits and raw regression."""
    targets = assignment.targets.ravel()
    if targets.size != heads.logits.size:
        raise ValueError(
            f"assignment has {targets.size} cells, image grid has {heads.logits.size}"
        )
    pos = targets == 1
    neg = targets == 0
    lam, coord_w = config.noobj_weight, config.coord_weight

    f = expit(heads.logits)
    slope = f * (1.0 - f)
    d_logits = np.zeros_like(f)
    d_logits[pos] = 2.0 * (f[pos] - 1.0) * slope[pos]
    d_logits[neg] = 2.0 * lam * f[neg] * slope[neg]

    out = heads.regression[pos]
    tgt = assignment.regression.reshape(-1, 4)[pos]
    # centre offsets compare in sigmoid space, sizes in log space
    sq_out = expit(out[:, :2])
    diff = np.hstack([sq_out - expit(tgt[:, :2]), out[:, 2:] - tgt[:, 2:]])
    d_pos = 2.0 * coord_w * diff
    d_pos[:, :2] *= sq_out * (1.0 - sq_out)
    d_regression = np.zeros_like(heads.regression)
    d_regression[pos] = d_pos

    breakdown = LossBreakdown(
        objectiveness_positive=float(np.sum((f[pos] - 1.0) ** 2)),
        objectiveness_negative=lam * float(np.sum(f[neg] ** 2)),
        coordinate=coord_w * float(np.sum(diff ** 2)),
    )
    return breakdown, d_logits, d_regression


def backprop(
    features: np.ndarray,
    heads: HeadOutputs,
    d_logits: np.ndarray,
    d_regression: np.ndarray,
    model: GridModel,
) -> Gradients:
    """Weight gradients from output derivatives."""
    grads = {
        "objectness": heads.inputs.T @ d_logits,
        "regression": heads.inputs.T @ d_regression,
    }
    if model.hidden_units:
        d_inputs = np.outer(d_logits, model.objectness) + d_regression @ model.regression.T
        d_pre = d_inputs[:, :-1] * (1.0 - heads.hidden ** 2)
        grads["hidden"] = features.T @ d_pre
    else:
        grads["hidden"] = np.zeros_like(model.hidden)
    return grads


def image_loss(
    pixels: np.ndarray,
    assignment: GridAssignment,
    model: GridModel,
    state: TrainState,
    is_target_domain: bool = True,
) -> LossBreakdown:
    heads = evaluate_heads(extract_features(pixels, model), model)
    gated = gated_assignment(assignment, state, is_target_domain)
    return _head_terms(heads, gated, state.config)[0]


def loss_and_gradient(
    pixels: np.ndarray,
    assignment: GridAssignment,
    model: GridModel,
    state: TrainState,
    is_target_domain: bool = True,
) -> tuple[LossBreakdown, Gradients]:
    """Loss of one image and its analytic gradient w.r.t. every weight."""
    features = extract_features(pixels, model)
    heads = evaluate_heads(features, model)
    gated = gated_assignment(assignment, state, is_target_domain)
    breakdown, d_logits, d_regression = _head_terms(heads, gated, state.config)
    return breakdown, backprop(features, heads, d_logits, d_regression, model)


# ============================================================
# OPTIMISER
# ============================================================

def sgd_step(
    model: GridModel, grads: Gradients, lr: float, weight_decay: float,
) -> GridModel:
    """w <- w - lr * (g + weight_decay * w); bias rows are not decayed."""
    updated = {}
    for name, w in model.weights().items():
        decay = weight_decay * w
        if len(decay):
            decay[-1] = 0.0
        updated[name] = w - lr * (grads[name] + decay)
    return model.with_weights(**updated)


# ============================================================
# TRAINER
# ============================================================

class Trainer:
    """Mini-batch SGD over target-domain images plus a background pool.

    Usage:
        state = TrainState(config, init_model(...))
        model = Trainer(train_set, pool, state, augment_config).run()
    """

    def __init__(
        self,
        train_set: Sequence[tuple[ImageRecord, LabelSet]],
        background_pool: Sequence[ImageRecord],
        state: TrainState,
        augment_config: AugmentConfig | None = None,
    ) -> None:
        if not train_set:
            raise ValueError("training needs at least one target-domain image")
        config = state.config
        if not 0 <= config.background_slots <= config.batch_size:
            raise ValueError("background_slots must lie in [0, batch_size]")
        self.train_set = list(train_set)
        self.background_pool = list(background_pool)
        self.state = state
        self.augment_config = augment_config or AugmentConfig.identity()
        self.history: list[LossBreakdown] = []

        self.pool_slots = config.background_slots if self.background_pool else 0
        if config.background_slots and not self.background_pool:
            logger.warning(
                "Background pool is empty; all %d batch slots use training images",
                config.batch_size,
            )
        self._sample_rng = np.random.default_rng(config.rng_seed)
        self._augment_rng = np.random.default_rng(
            np.random.SeedSequence([config.rng_seed, self.augment_config.rng_seed])
        )

    def _batch(self) -> list[tuple[ImageRecord, LabelSet, bool]]:
        n_target = self.state.config.batch_size - self.pool_slots
        batch = []
        for i in self._sample_rng.integers(len(self.train_set), size=n_target):
            record, labels = self.train_set[int(i)]
            batch.append((record, labels, True))
        if self.pool_slots:
            picks = self._sample_rng.integers(len(self.background_pool), size=self.pool_slots)
            for i in picks:
                record = self.background_pool[int(i)]
                batch.append((record, LabelSet(record.image_id, ()), False))
        return batch

    def step(self) -> LossBreakdown:
        """One SGD iteration; advances ``state.t``."""
        state = self.state
        config = state.config
        state.t += 1
        model = state.theta

        total = LossBreakdown()
        summed = {name: np.zeros_like(w) for name, w in model.weights().items()}
        batch = self._batch()
        for record, labels, is_target in batch:
            pixels, augmented = augment(
                record, labels, self.augment_config, self._augment_rng,
            )
            assignment = assign_targets(augmented, pixels.shape[:2], model)
            if is_target and state.gate_closed:
                state.gate_activations += 1
            loss, grads = loss_and_gradient(pixels, assignment, model, state, is_target)
            total = total + loss
            for name in summed:
                summed[name] += grads[name]

        n = len(batch)
        mean = LossBreakdown(
            total.objectiveness_positive / n,
            total.objectiveness_negative / n,
            total.coordinate / n,
        )
        if not np.isfinite(mean.total) or not all(
            np.all(np.isfinite(g)) for g in summed.values()
        ):
            raise DivergenceError(state.t, f"loss {mean.total}")

        lr = config.learning_rate(state.t)
        grads = {name: g / n for name, g in summed.items()}
        try:
            state.theta = sgd_step(model, grads, lr, config.weight_decay)
        except ValueError as e:
            raise DivergenceError(state.t, str(e)) from e

        self.history.append(mean)
        if config.log_every and state.t % config.log_every == 0:
            logger.info(
                "iter %d/%d lr=%g loss=%.4f (pos %.4f, neg %.4f, coord %.4f)",
                state.t, config.total_iterations, lr, mean.total,
                mean.objectiveness_positive, mean.objectiveness_negative,
                mean.coordinate,
            )
        return mean

    def run(self) -> GridModel:
        total = self.state.config.total_iterations
        logger.debug(
            "Training %d iterations on %d images (+%d background), T=%s",
            total, len(self.train_set), len(self.background_pool), self.state.T,
        )
        while self.state.t < total:
            self.step()
        return self.state.theta


def train(
    train_set: Sequence[tuple[ImageRecord, LabelSet]],
    background_pool: Sequence[ImageRecord],
    state: TrainState,
    augment_config: AugmentConfig | None = None,
) -> GridModel:
    """Run every scheduled iteration and return the final model."""
    return Trainer(train_set, background_pool, state, augment_config).run()
