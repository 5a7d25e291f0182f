"""propcount: object counting from incomplete box labels.

A grid detector is trained with a loss that stops penalising unlabeled
regions after a warm-up, its confident detections are merged back into
the label set, and the cycle repeats before a final detector is trained
on the expanded labels.
"""

__version__ = "0.1.0"

from propcount.models import (
    Box,
    ConfigError,
    DataError,
    DivergenceError,
    EvalReport,
    GridModel,
    ImageRecord,
    LabeledBox,
    LabelSet,
    PropcountError,
    Provenance,
    ScoredBox,
    StageLog,
    StageSchedule,
    TrainConfig,
    TrainMode,
)

__all__ = [
    "Box",
    "ConfigError",
    "DataError",
    "DivergenceError",
    "EvalReport",
    "GridModel",
    "ImageRecord",
    "LabeledBox",
    "LabelSet",
    "PropcountError",
    "Provenance",
    "ScoredBox",
    "StageLog",
    "StageSchedule",
    "TrainConfig",
    "TrainMode",
]
