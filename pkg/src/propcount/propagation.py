"""Stage-wise label propagation.

Stage s trains the detector on the current labels under the gated loss,
predicts on the un-augmented training images, and merges confident
predictions into the next label set. After the last stage a plain detector is trained on the
expanded labels.

Persisted per run directory (when one is given):

  labels_stage_<k>.jsonl   label set k, k = 1 .. S+1 (1 is the seeds)
  model_stage_<s>.bin      model trained in stage s
  stage_log.jsonl          one row per (label stage, image): expanded / correct
"""

from __future__ import annotations

import logging
import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from propcount.dataset import load_label_snapshot, read_jsonl, write_jsonl, write_label_snapshot
from propcount.detector import (
    anchor_from_labels,
    init_model,
    load_model,
    model_checksum,
    predict,
    save_model,
)
from propcount.geometry import as_array, iou_matrix, score_order
from propcount.metrics import propagation_quality
from propcount.models import (
    AugmentConfig,
    Box,
    DataError,
    DetectorConfig,
    GridModel,
    ImageRecord,
    LabeledBox,
    LabelSet,
    PropagationQuality,
    Provenance,
    ScoredBox,
    StageLog,
    StageSchedule,
    TrainConfig,
    TrainState,
)
from propcount.training import Trainer

logger = logging.getLogger(__name__)

STAGE_LOG = "stage_log.jsonl"
_LABELS_RE = re.compile(r"labels_stage_(\d+)\.jsonl$")
_MODEL_RE = re.compile(r"model_stage_(\d+)\.bin$")
# Stage s seeds its fresh weights with stream s; the final detector uses 0,
# so the final training does not depend on how many stages ran.
FINAL_SEED_STREAM = 0


def labels_path(output_dir: Path, stage: int) -> Path:
    return output_dir / f"labels_stage_{stage}.jsonl"


def stage_model_path(output_dir: Path, stage: int) -> Path:
    return output_dir / f"model_stage_{stage}.bin"


# ============================================================
# MERGE
# ============================================================

def merge_labels(
    current: LabelSet,
    predictions: Sequence[ScoredBox],
    merge_score: float = 0.9,
    merge_iou: float = 0.2,
) -> LabelSet:
    """Next label set: ``current`` plus the confident, non-overlapping predictions.

    Predictions are visited best first. One is accepted when its score is
    at least ``merge_score`` and its IoU with every box of ``current`` and
    with every prediction accepted so far is at most ``merge_iou``.
    """
    if not 0.0 < merge_score <= 1.0:
        raise ValueError(f"merge_score must lie in (0, 1], got {merge_score}")
    if not 0.0 < merge_iou <= 1.0:
        raise ValueError(f"merge_iou must lie in (0, 1], got {merge_iou}")

    existing = as_array(current.plain_boxes)
    accepted: list[Box] = []
    for pred in score_order(predictions):
        if pred.score < merge_score:
            break
        candidate = as_array([pred.box])
        if len(existing) and iou_matrix(candidate, existing).max() > merge_iou:
            continue
        if accepted and iou_matrix(candidate, as_array(accepted)).max() > merge_iou:
            continue
        accepted.append(pred.box)

    added = tuple(
        LabeledBox(box, Provenance.PROPAGATED, current.stage) for box in accepted
    )
    return LabelSet(current.image_id, current.boxes + added, current.stage + 1)


# ============================================================
# TRAINING HELPERS
# ============================================================

def fit_detector(
    train_set: Sequence[tuple[ImageRecord, LabelSet]],
    background_pool: Sequence[ImageRecord],
    config: TrainConfig,
    detector_config: DetectorConfig,
    augment_config: AugmentConfig,
    init_seed: Sequence[int],
    initial: GridModel | None = None,
) -> tuple[GridModel, TrainState]:
    """Train one detector; fresh weights unless ``initial`` is given."""
    if initial is None:
        anchor = anchor_from_labels([labels for _, labels in train_set])
        channels = train_set[0][0].channels
        rng = np.random.default_rng(np.random.SeedSequence(list(init_seed)))
        initial = init_model(detector_config, channels, anchor, rng)
    state = TrainState(config=config, theta=initial)
    model = Trainer(train_set, background_pool, state, augment_config).run()
    return model, state


def count_image(
    pixels: np.ndarray,
    model: GridModel,
    threshold: float,
    nms_iou: float = 0.2,
    test_area: int | None = None,
) -> tuple[int, list[ScoredBox]]:
    """Number of predictions scoring at least ``threshold`` after NMS."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    boxes = predict(pixels, model, threshold, nms_iou, test_area)
    return len(boxes), boxes


# ============================================================
# ENGINE
# ============================================================

@dataclass
class PropagationResult:
    model: GridModel
    labels: list[LabelSet]
    logs: list[StageLog] = field(default_factory=list)
    gate_activations: int = 0


class PropagationEngine:
    """Runs propagation stages one at a time and keeps their history.

    Usage:
        engine = PropagationEngine(train_set, pool, schedule, output_dir=out)
        while engine.current_stage < schedule.num_stages:
            log = engine.run_stage()
        result = engine.finish()
    """

    def __init__(
        self,
        train_set: Sequence[tuple[ImageRecord, LabelSet]],
        background_pool: Sequence[ImageRecord],
        schedule: StageSchedule,
        detector_config: DetectorConfig | None = None,
        augment_config: AugmentConfig | None = None,
        ground_truth: Mapping[str, Sequence[Box]] | None = None,
        output_dir: str | Path | None = None,
        rng_seed: int = 0,
        nms_iou: float = 0.2,
        quality_iou: float = 0.3,
        test_area: int | None = None,
    ) -> None:
        if not train_set:
            raise DataError("no training images selected")
        if not any(len(labels) for _, labels in train_set):
            raise DataError("no seed boxes in any training image")
        self.records = {record.image_id: record for record, _ in train_set}
        self.labels: dict[str, LabelSet] = {
            record.image_id: labels for record, labels in train_set
        }
        self.background_pool = list(background_pool)
        self.schedule = schedule
        self.detector_config = detector_config or DetectorConfig()
        self.augment_config = augment_config or AugmentConfig.identity()
        self.ground_truth = ground_truth
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.rng_seed = rng_seed
        self.nms_iou = nms_iou
        self.quality_iou = quality_iou
        self.test_area = test_area

        self.current_stage = 0
        self.stage_history: list[StageLog] = []
        self.gate_activations = 0
        self.model: GridModel | None = None

    # -- persistence -----------------------------------------------------

    def _quality(self, labels: LabelSet) -> PropagationQuality:
        gt = None
        if self.ground_truth is not None:
            gt = self.ground_truth.get(labels.image_id)
        return propagation_quality(labels, gt, self.quality_iou)

    def _persist_labels(self, qualities: list[PropagationQuality]) -> None:
        if self.output_dir is None:
            return
        label_sets = [self.labels[k] for k in sorted(self.labels)]
        write_label_snapshot(
            labels_path(self.output_dir, label_sets[0].stage), label_sets, self.records,
        )
        log_path = self.output_dir / STAGE_LOG
        rows = [row for _, row in read_jsonl(log_path)] if log_path.exists() else []
        write_jsonl(log_path, rows + [q.to_dict() for q in qualities])

    def start(self) -> list[PropagationQuality]:
        """Record the seed labels as label set 1."""
        qualities = [self._quality(self.labels[k]) for k in sorted(self.labels)]
        if self.output_dir is not None:
            stale = [
                *self.output_dir.glob("labels_stage_*.jsonl"),
                *self.output_dir.glob("model_stage_*.bin"),
                self.output_dir / STAGE_LOG,
            ]
            for path in stale:
                path.unlink(missing_ok=True)
        self._persist_labels(qualities)
        return qualities

    def resume(self) -> int:
        """Reload the newest persisted label stage; returns the stages done."""
        if self.output_dir is None:
            raise ValueError("resume needs an output directory")
        found = sorted(
            int(m.group(1))
            for p in self.output_dir.glob("labels_stage_*.jsonl")
            if (m := _LABELS_RE.search(p.name))
        )
        if not found:
            self.start()
            return 0
        newest = min(found[-1], self.schedule.num_stages + 1)
        # label set k comes from stage model k - 1; drop what lies past newest
        for pattern, regex, first_stale in (
            ("labels_stage_*.jsonl", _LABELS_RE, newest + 1),
            ("model_stage_*.bin", _MODEL_RE, newest),
        ):
            for path in self.output_dir.glob(pattern):
                if (m := regex.search(path.name)) and int(m.group(1)) >= first_stale:
                    path.unlink()
        for labels in load_label_snapshot(labels_path(self.output_dir, newest)):
            if labels.image_id not in self.labels:
                raise DataError(f"snapshot names unknown image {labels.image_id}")
            self.labels[labels.image_id] = labels
        self.current_stage = newest - 1

        log_path = self.output_dir / STAGE_LOG
        rows = [row for _, row in read_jsonl(log_path)] if log_path.exists() else []
        rows = [r for r in rows if int(r["stage"]) <= newest]
        write_jsonl(log_path, rows)
        for s in range(1, newest):
            qualities = [
                PropagationQuality.from_dict(r) for r in rows if int(r["stage"]) == s + 1
            ]
            checksum = ""
            path = stage_model_path(self.output_dir, s)
            if path.exists():
                self.model = load_model(path)
                checksum = model_checksum(self.model)
            before = sum(int(r["expanded"]) for r in rows if int(r["stage"]) == s)
            added = sum(q.expanded for q in qualities) - before
            self.stage_history.append(StageLog(s, qualities, checksum, added))
        logger.info("Resuming after stage %d", self.current_stage)
        return self.current_stage

    # -- stages ----------------------------------------------------------

    def _train_set(self) -> list[tuple[ImageRecord, LabelSet]]:
        return [(self.records[k], self.labels[k]) for k in sorted(self.labels)]

    def run_stage(self) -> StageLog:
        """Train on the current labels, predict, merge into the next set."""
        stage = self.current_stage + 1
        initial = self.model if self.schedule.warm_start else None
        model, state = fit_detector(
            self._train_set(),
            self.background_pool,
            self.schedule.stage_training,
            self.detector_config,
            self.augment_config,
            (self.rng_seed, stage),
            initial,
        )
        self.gate_activations += state.gate_activations

        added = 0
        for image_id in sorted(self.labels):
            current = self.labels[image_id]
            predictions = predict(
                self.records[image_id].pixels, model,
                self.schedule.merge_score, self.nms_iou, self.test_area,
            )
            merged = merge_labels(
                current, predictions,
                self.schedule.merge_score, self.schedule.merge_iou,
            )
            added += len(merged) - len(current)
            self.labels[image_id] = merged

        qualities = [self._quality(self.labels[k]) for k in sorted(self.labels)]
        self._persist_labels(qualities)
        if self.output_dir is not None:
            save_model(stage_model_path(self.output_dir, stage), model)

        log = StageLog(stage, qualities, model_checksum(model), added)
        if added == 0:
            logger.warning("Stage %d added no boxes", stage)
        logger.info(
            "Stage %d: +%d boxes, %d labeled, median correct %s",
            stage, added, log.total_expanded, log.median_correct,
        )
        self.model = model
        self.current_stage = stage
        self.stage_history.append(log)
        return log

    def finish(self) -> PropagationResult:
        """Train the plain detector on the expanded labels."""
        initial = self.model if self.schedule.warm_start else None
        model, state = fit_detector(
            self._train_set(),
            self.background_pool,
            self.schedule.final_training,
            self.detector_config,
            self.augment_config,
            (self.rng_seed, FINAL_SEED_STREAM),
            initial,
        )
        self.gate_activations += state.gate_activations
        self.model = model
        return PropagationResult(
            model=model,
            labels=[self.labels[k] for k in sorted(self.labels)],
            logs=list(self.stage_history),
            gate_activations=self.gate_activations,
        )

    def run(self, resume: bool = False) -> PropagationResult:
        if resume:
            self.resume()
        else:
            self.start()
        while self.current_stage < self.schedule.num_stages:
            self.run_stage()
        return self.finish()

    def report(self) -> str:
        lines = [f"{'Stage':>6} {'Added':>7} {'Labels':>8} {'Median ok':>10}"]
        for log in self.stage_history:
            median = "-" if log.median_correct is None else f"{log.median_correct:.1f}"
            lines.append(
                f"{log.stage:>6} {log.boxes_added:>7} {log.total_expanded:>8} {median:>10}"
            )
        return "\n".join(lines)


def run_propagation(
    train_set: Sequence[tuple[ImageRecord, LabelSet]],
    background_pool: Sequence[ImageRecord],
    schedule: StageSchedule,
    **kwargs,
) -> tuple[GridModel, list[LabelSet], list[StageLog]]:
    """All stages plus the final training; see ``PropagationEngine``."""
    result = PropagationEngine(train_set, background_pool, schedule, **kwargs).run()
    return result.model, result.labels, result.logs
