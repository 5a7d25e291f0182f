"""CLI entry point for propcount.

Usage:
    propcount generate --spec scene.json --out data --count 20 \\
        --background-count 10 --test-count 25
    propcount run --config run.json --mode pfod -v
    propcount evaluate --predictions runs/pfod/predictions.jsonl \\
        --annotations data/annotations.jsonl
    propcount visualize --model runs/pfod/model.bin --annotations data/annotations.jsonl \\
        --threshold 0.3 --out overlays

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any

import numpy as np

from propcount.config import RunConfig, scene_problems
from propcount.dataset import (
    SCENE_STREAM,
    TEST_STREAM,
    generate_background_pool,
    generate_scenes,
    load_annotations,
    load_ground_truth,
    load_predictions,
    subsample,
    write_dataset,
    write_label_snapshot,
    write_predictions,
)
from propcount.detector import load_model, model_checksum, predict, save_model
from propcount.metrics import correct_flags, evaluate
from propcount.models import (
    Box,
    ConfigError,
    DataError,
    EvalReport,
    GridModel,
    ImageRecord,
    PropcountError,
    SceneSpec,
    TrainMode,
)
from propcount.pnm import to_rgb, write_pnm
from propcount.propagation import (
    FINAL_SEED_STREAM,
    PropagationEngine,
    count_image,
    fit_detector,
)

logger = logging.getLogger("propcount")

CORRECT_COLOR = (0.0, 1.0, 0.0)
WRONG_COLOR = (1.0, 0.0, 0.0)


def _write_json(path: Path, data: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


# ============================================================
# GENERATE
# ============================================================

def generate_benchmark(
    spec: SceneSpec,
    out_dir: str | Path,
    count: int,
    background_count: int,
    test_count: int = 0,
) -> Path:
    """Write a synthetic benchmark; returns the annotation file."""
    found = scene_problems(spec)
    for name, value in (("count", count), ("background_count", background_count),
                        ("test_count", test_count)):
        if value < 0:
            found.append(f"{name} must be >= 0, got {value}")
    if found:
        raise ConfigError("; ".join(found))
    records = (
        generate_scenes(spec, count, "scene", SCENE_STREAM, split="train")
        + generate_background_pool(spec, background_count)
        + generate_scenes(spec, test_count, "test", TEST_STREAM, split="test")
    )
    try:
        return write_dataset(out_dir, records)
    except OSError as e:
        raise DataError(f"cannot write benchmark to {out_dir}: {e}") from e


# ============================================================
# RUN
# ============================================================

def load_background(config: RunConfig) -> list[ImageRecord]:
    paths = config.paths
    pool: list[ImageRecord] = []
    if paths.background_annotations is not None:
        pool += load_annotations(
            config.resolve(paths.background_annotations), paths.background_split,
        )
    if paths.background_count:
        pool += generate_background_pool(config.scene, paths.background_count)
    for record in pool:
        if record.boxes:
            raise DataError(f"background image {record.image_id} has annotated boxes")
    return pool


def predict_all(
    records: list[ImageRecord], model: GridModel, config: RunConfig,
) -> dict[str, list]:
    e = config.evaluation
    return {
        r.image_id: predict(r.pixels, model, e.score_floor, e.nms_iou, e.test_area)
        for r in records
    }


def write_manifest(out_dir: Path) -> Path:
    """SHA-256 of every file under ``out_dir`` except the manifest itself."""
    entries = []
    for path in sorted(p for p in out_dir.rglob("*") if p.is_file()):
        rel = path.relative_to(out_dir).as_posix()
        if rel == "manifest.json":
            continue
        entries.append({
            "path": rel,
            "sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
        })
    return _write_json(out_dir / "manifest.json", {"files": entries})


def run_experiment(
    config: RunConfig, mode: TrainMode, resume: bool = False,
) -> dict[str, Any]:
    """Train (od) or propagate then train (pfod), evaluate, write artifacts.

    Returns the run summary that is also written to run_summary.json.
    """
    config.validate()
    paths = config.paths
    out_dir = config.output_root() / mode.value
    out_dir.mkdir(parents=True, exist_ok=True)

    records = load_annotations(config.resolve(paths.train_annotations), paths.train_split)
    if not records:
        raise DataError("no training images in the annotation file")
    pool = load_background(config)
    train_set, discarded = subsample(records, config.subsample)
    full_truth = {r.image_id: r.boxes for r in records}
    logger.info(
        "%d training images (%d discarded), %d background images",
        len(train_set), len(discarded), len(pool),
    )

    if mode is TrainMode.PFOD:
        engine = PropagationEngine(
            train_set, pool, config.schedule,
            detector_config=config.detector,
            augment_config=config.augment,
            ground_truth=full_truth,
            output_dir=out_dir,
            rng_seed=config.rng_seed,
            nms_iou=config.evaluation.nms_iou,
            quality_iou=config.evaluation.quality_iou,
            test_area=config.evaluation.test_area,
        )
        result = engine.run(resume=resume)
        model, labels, logs = result.model, result.labels, result.logs
        gate_activations = result.gate_activations
        logger.info("Propagation:\n%s", engine.report())
    else:
        if not any(len(lab) for _, lab in train_set):
            raise DataError("no seed boxes in any training image")
        model, state = fit_detector(
            train_set, pool, config.schedule.final_training,
            config.detector, config.augment, (config.rng_seed, FINAL_SEED_STREAM),
        )
        labels = [lab for _, lab in train_set]
        logs = []
        gate_activations = state.gate_activations
        write_label_snapshot(
            out_dir / "labels_stage_1.jsonl", labels,
            {r.image_id: r for r, _ in train_set},
        )

    save_model(out_dir / "model.bin", model)

    test_records = load_annotations(config.resolve(paths.test_annotations), paths.test_split)
    if not test_records:
        raise DataError("no test images in the annotation file")
    predictions = predict_all(test_records, model, config)
    write_predictions(out_dir / "predictions.jsonl", predictions)
    try:
        report = evaluate(
            predictions, {r.image_id: r.boxes for r in test_records}, config.evaluation,
        )
    except ValueError as e:
        raise DataError(f"cannot evaluate: {e}") from e
    _write_json(out_dir / "eval_report.json", report.to_dict())

    summary = {
        "mode": mode.value,
        "model_checksum": model_checksum(model),
        "gate_activations": gate_activations,
        "training_images": len(train_set),
        "background_images": len(pool),
        "final_labels": sum(len(lab) for lab in labels),
        "stages": [log.to_dict() for log in logs],
        "eval": report.to_dict(),
        "config": config.to_dict(),
    }
    _write_json(out_dir / "run_summary.json", summary)
    write_manifest(out_dir)
    logger.info(
        "mAP@0.5 %.4f  MAE %.3f (t=%.2f)  RMSE %.3f (t=%.2f)  -> %s",
        report.map_at_50, report.mae, report.mae_threshold,
        report.rmse, report.rmse_threshold, out_dir,
    )
    return summary


# ============================================================
# EVALUATE / VISUALIZE
# ============================================================

def evaluate_files(
    predictions_path: str | Path,
    annotations_path: str | Path,
    split: str | None = None,
    config: RunConfig | None = None,
) -> EvalReport:
    config = config or RunConfig()
    predictions = load_predictions(predictions_path)
    truth = load_ground_truth(annotations_path, split)
    try:
        return evaluate(predictions, truth, config.evaluation)
    except ValueError as e:
        raise DataError(str(e)) from e


def draw_outline(rgb: np.ndarray, box: Box, color: tuple[float, float, float]) -> None:
    """One-pixel rectangle outline, clipped to the image (in place)."""
    height, width = rgb.shape[:2]
    x1 = min(max(int(round(box.x)), 0), width - 1)
    y1 = min(max(int(round(box.y)), 0), height - 1)
    x2 = min(max(int(round(box.x2)) - 1, 0), width - 1)
    y2 = min(max(int(round(box.y2)) - 1, 0), height - 1)
    rgb[y1, x1:x2 + 1] = color
    rgb[y2, x1:x2 + 1] = color
    rgb[y1:y2 + 1, x1] = color
    rgb[y1:y2 + 1, x2] = color


def visualize(
    model_path: str | Path,
    annotations_path: str | Path,
    threshold: float,
    out_dir: str | Path,
    split: str | None = None,
    quality_iou: float = 0.3,
) -> list[tuple[str, int, int]]:
    """Overlay kept predictions on each image; returns (image, pred, gt)."""
    model = load_model(model_path)
    out_dir = Path(out_dir)
    counts = []
    for record in load_annotations(annotations_path, split):
        count, boxes = count_image(record.pixels, model, threshold)
        flags = correct_flags([b.box for b in boxes], record.boxes, quality_iou)
        rgb = to_rgb(record.pixels)
        for scored, ok in zip(boxes, flags):
            draw_outline(rgb, scored.box, CORRECT_COLOR if ok else WRONG_COLOR)
        stem = Path(record.image_id).stem
        write_pnm(out_dir / f"{stem}.ppm", rgb)
        (out_dir / f"{stem}.txt").write_text(f"pred={count}, gt={len(record.boxes)}\n")
        counts.append((record.image_id, count, len(record.boxes)))
    return counts


# ============================================================
# MAIN
# ============================================================

def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(
        level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _cmd_generate(args: argparse.Namespace) -> None:
    try:
        data = json.loads(Path(args.spec).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read scene spec {args.spec}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{args.spec}: malformed JSON ({e.msg})") from e
    spec = SceneSpec.from_dict(data)
    path = generate_benchmark(
        spec, args.out, args.count, args.background_count, args.test_count,
    )
    logger.info("Wrote %s", path)


def _cmd_run(args: argparse.Namespace) -> None:
    config = RunConfig.load(args.config, args.set)
    summary = run_experiment(config, TrainMode(args.mode), resume=args.resume)
    print(json.dumps(summary["eval"], indent=2, sort_keys=True))


def _cmd_evaluate(args: argparse.Namespace) -> None:
    report = evaluate_files(args.predictions, args.annotations, args.split)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        _write_json(Path(args.out), report.to_dict())
        logger.info("Wrote %s", args.out)
    else:
        print(text)


def _cmd_visualize(args: argparse.Namespace) -> None:
    if not 0.0 <= args.threshold <= 1.0:
        raise ConfigError("--threshold must lie in [0, 1]")
    for image_id, pred, gt in visualize(
        args.model, args.annotations, args.threshold, args.out, args.split,
    ):
        logger.info("%s: pred=%d, gt=%d", image_id, pred, gt)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--verbose", "-v", action="count", default=0,
        help="-v for progress, -vv for debug output",
    )

    parser = argparse.ArgumentParser(
        description="propcount: object counting from a few labeled boxes per image",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", parents=[common], help="Write a synthetic benchmark")
    gen.add_argument("--spec", required=True, help="Scene spec JSON")
    gen.add_argument("--out", required=True, help="Output directory")
    gen.add_argument("--count", type=int, required=True, help="Training scenes")
    gen.add_argument(
        "--background-count", type=int, required=True, help="Object-free images",
    )
    gen.add_argument("--test-count", type=int, default=0, help="Test scenes")
    gen.set_defaults(handler=_cmd_generate)

    run = sub.add_parser("run", parents=[common], help="Train and evaluate")
    run.add_argument("--config", required=True, help="Run config JSON")
    run.add_argument("--mode", choices=[m.value for m in TrainMode], required=True)
    run.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="Override a config key by dotted path (repeatable)",
    )
    run.add_argument(
        "--resume", action="store_true",
        help="Continue after the last persisted propagation stage",
    )
    run.set_defaults(handler=_cmd_run)

    ev = sub.add_parser("evaluate", parents=[common], help="Score saved predictions")
    ev.add_argument("--predictions", required=True)
    ev.add_argument("--annotations", required=True)
    ev.add_argument("--split", default=None)
    ev.add_argument("--out", default=None, help="Write the report here (JSON)")
    ev.set_defaults(handler=_cmd_evaluate)

    vis = sub.add_parser("visualize", parents=[common], help="Overlay predictions")
    vis.add_argument("--model", required=True)
    vis.add_argument("--annotations", required=True)
    vis.add_argument("--threshold", type=float, required=True)
    vis.add_argument("--out", required=True)
    vis.add_argument("--split", default=None)
    vis.set_defaults(handler=_cmd_visualize)
    return parser


def main(argv: list[str] | None = None) -> int:
    """CLI entry point."""
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        args.handler(args)
    except PropcountError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
