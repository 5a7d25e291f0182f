"""End-to-end runs on the synthetic counting benchmark.

Twenty 256-pixel training scenes with five seed boxes each, ten object-free
background images and 25 test scenes. Slow: six trainings of 1000
iterations. Run with ``pytest -m slow``.
"""

import json
import statistics

import pytest

from propcount.config import RunConfig
from propcount.dataset import load_ground_truth, load_label_snapshot, read_jsonl
from propcount.models import SceneSpec, TrainMode
from propcount.propagation import STAGE_LOG, labels_path
from propcount.run import generate_benchmark, run_experiment

pytestmark = pytest.mark.slow

SCENE = SceneSpec(image_size=256, objects_per_image=(18, 22), rng_seed=11)
NUM_STAGES = 3
SEEDS_PER_IMAGE = 5

# Frozen on rng_seed 7 of this benchmark.
FULL_MAP_MIN = 0.80
MAE_FRACTION_MAX = 0.25


@pytest.fixture(scope="module")
def synth_count(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate_benchmark(SCENE, root / "data", count=20, background_count=10, test_count=25)
    return root


def _config(root, name, **subsample):
    data = {
        "paths": {
            "train_annotations": "data/annotations.jsonl",
            "test_annotations": "data/annotations.jsonl",
            "background_annotations": "data/annotations.jsonl",
            "output_dir": f"runs/{name}",
        },
        "subsample": {"rng_seed": 0, **subsample},
        "scene": SCENE.to_dict(),
        "schedule": {"num_stages": NUM_STAGES},
        "rng_seed": 7,
    }
    path = root / f"{name}.json"
    path.write_text(json.dumps(data))
    return RunConfig.load(path)


@pytest.fixture(scope="module")
def results(synth_count):
    full = run_experiment(
        _config(synth_count, "full", num_images="ALL", boxes_per_image="ALL"), TrainMode.OD,
    )
    seeds = _config(synth_count, "seeds", num_images="ALL", boxes_per_image=SEEDS_PER_IMAGE)
    return full, run_experiment(seeds, TrainMode.OD), run_experiment(seeds, TrainMode.PFOD)


@pytest.fixture(scope="module")
def median_correct(synth_count, results):
    """Median per-image correct-label count of label sets 1..S+1."""
    rows = [row for _, row in read_jsonl(synth_count / "runs" / "seeds" / "pfod" / STAGE_LOG)]
    return [
        statistics.median(int(r["correct"]) for r in rows if int(r["stage"]) == k)
        for k in range(1, NUM_STAGES + 2)
    ]


class TestAcceptance:
    def test_ordering(self, results):
        full, seeds_od, seeds_pfod = (r["eval"]["map_at_50"] for r in results)
        assert full > seeds_pfod > seeds_od

    def test_full_labels_map(self, results):
        assert results[0]["eval"]["map_at_50"] >= FULL_MAP_MIN

    def test_propagated_count_error(self, synth_count, results):
        truth = load_ground_truth(synth_count / "data" / "annotations.jsonl", "test")
        mean_count = sum(len(boxes) for boxes in truth.values()) / len(truth)
        assert results[2]["eval"]["mae"] <= MAE_FRACTION_MAX * mean_count

    def test_full_labels_never_gate(self, results):
        assert results[0]["gate_activations"] == 0

    def test_propagation_gates(self, results):
        assert results[2]["gate_activations"] > 0


class TestLabelGrowth:
    def test_seed_labels_all_correct(self, median_correct):
        assert median_correct[0] == SEEDS_PER_IMAGE

    def test_median_correct_grows(self, median_correct):
        assert median_correct[NUM_STAGES - 1] > median_correct[0]
        assert median_correct == sorted(median_correct)

    def test_totals_only_grow(self, synth_count, results):
        out = synth_count / "runs" / "seeds" / "pfod"
        totals = [
            sum(len(lab) for lab in load_label_snapshot(labels_path(out, k)))
            for k in range(1, NUM_STAGES + 2)
        ]
        assert totals[0] == 20 * SEEDS_PER_IMAGE
        assert totals == sorted(totals)
        assert results[2]["final_labels"] == totals[-1] > totals[0]
