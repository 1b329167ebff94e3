"""Tests for AUC / AP and the benchmark evaluation."""
import csv
import itertools

import numpy as np
import pytest

from rcnf_monitor.const import (
    ANOMALY_GRIPPER_OPEN,
    ANOMALY_GRIPPER_SLIPPAGE,
    ANOMALY_NONE,
    ANOMALY_SPATIAL_MISALIGNMENT,
)
from rcnf_monitor.exceptions import NoPositivesError, SingleClassError
from rcnf_monitor.metrics import (
    ScoredFrame,
    auc,
    auc_scores,
    average_precision,
    average_precision_scores,
    evaluate_benchmark,
    save_bench_report,
    score_episode,
    write_score_curves,
)
from rcnf_monitor.monitor import ThresholdProfile
from rcnf_monitor.scene_sim import generate_episode

TASKS = ["task_00", "task_01", "task_02"]


def _brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def _brute_ap(scores, labels):
    ranked = sorted(zip(scores, labels), key=lambda pair: -pair[0])
    hits = total = 0.0
    for rank, (_, label) in enumerate(ranked, start=1):
        if label:
            hits += 1
            total += hits / rank
    return total / sum(labels)


def _episode(task_id, kind, seed, index):
    return generate_episode(
        task_id, kind, seed, 16, window=4, num_points=2, mask_size=64, joints=2,
        task_ids=TASKS, episode_id=f"{kind}-{task_id}-{index:03d}",
    )


class TestAuc:

    def test_worked_example(self):
        scored = [
            ScoredFrame(0.1, 0), ScoredFrame(0.4, 0), ScoredFrame(0.35, 1), ScoredFrame(0.8, 1),
        ]
        assert auc(scored) == pytest.approx(0.75)

    def test_ties_count_half(self):
        assert auc_scores([0.5, 0.5], [0, 1]) == pytest.approx(0.5)

    @pytest.mark.parametrize("n", [2, 3, 5, 8])
    def test_matches_brute_force(self, n):
        # integer scores produce plenty of ties
        scores = np.random.default_rng(n).integers(0, 4, size=n).astype(float)
        for labels in itertools.product([0, 1], repeat=n):
            if 0 < sum(labels) < n:
                assert auc_scores(scores, labels) == pytest.approx(_brute_auc(scores, labels), abs=1e-12)

    def test_negated_scores_complement(self):
        rng = np.random.default_rng(0)
        scores = rng.normal(size=20)
        labels = rng.integers(0, 2, size=20)
        labels[:2] = [0, 1]
        assert auc_scores(scores, labels) + auc_scores(-scores, labels) == pytest.approx(1.0)

    @pytest.mark.parametrize("labels", [[0, 0, 0], [1, 1]])
    def test_single_class(self, labels):
        with pytest.raises(SingleClassError):
            auc_scores(np.arange(len(labels), dtype=float), labels)


class TestAveragePrecision:

    def test_worked_example(self):
        scored = [
            ScoredFrame(0.8, 1), ScoredFrame(0.4, 0), ScoredFrame(0.35, 1), ScoredFrame(0.1, 0),
        ]
        assert average_precision(scored) == pytest.approx((1 + 2 / 3) / 2)

    @pytest.mark.parametrize("n", [1, 4, 8])
    def test_matches_brute_force(self, n):
        scores = np.random.default_rng(10 + n).permutation(n).astype(float)
        for labels in itertools.product([0, 1], repeat=n):
            if sum(labels):
                assert average_precision_scores(scores, labels) == pytest.approx(_brute_ap(scores, labels), abs=1e-12)

    def test_bounds(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            scores = rng.normal(size=12)
            labels = rng.integers(0, 2, size=12)
            labels[0] = 1
            ap = average_precision_scores(scores, labels)
            assert labels.sum() / 12 - 1e-12 <= ap <= 1.0

    def test_ties_in_input_order(self, caplog):
        assert average_precision_scores([0.5, 0.5], [1, 0]) == pytest.approx(1.0)
        assert average_precision_scores([0.5, 0.5], [0, 1]) == pytest.approx(0.5)
        assert "Tied scores" in caplog.text

    def test_no_positives(self):
        with pytest.raises(NoPositivesError):
            average_precision_scores([0.1, 0.2], [0, 0])


class TestEvaluateBenchmark:

    def setup_method(self):
        self.episodes = [
            _episode("task_00", ANOMALY_NONE, 1, 0),
            _episode("task_01", ANOMALY_NONE, 2, 0),
            _episode("task_00", ANOMALY_GRIPPER_OPEN, 3, 0),
            _episode("task_01", ANOMALY_GRIPPER_OPEN, 4, 0),
        ]
        # every score sits above this threshold
        self.profiles = {
            task_id: ThresholdProfile.build(task_id, -1e6, [0.0] * 9, 0.1) for task_id in TASKS
        }

    def test_score_episode_frames(self, tiny_model):
        episode = self.episodes[2]
        scored = score_episode(tiny_model, episode)
        assert [item.frame for item in scored] == list(range(3, 16))
        assert [item.label for item in scored] == [int(f >= episode.t_anomaly) for f in range(3, 16)]

    def test_class_pools(self, tiny_model):
        report = evaluate_benchmark(tiny_model, self.profiles, self.episodes)
        assert report.frames_scored == 4 * 13
        result = report.per_kind[ANOMALY_GRIPPER_OPEN]
        post = sum(16 - ep.t_anomaly for ep in self.episodes[2:])
        assert result["positives"] == post
        assert result["negatives"] == 4 * 13 - post
        assert 0.0 <= result["auc"] <= 1.0
        assert report.macro_auc == result["auc"]
        assert report.macro_ap == result["ap"]

    def test_missing_kinds(self, tiny_model):
        report = evaluate_benchmark(tiny_model, self.profiles, self.episodes)
        assert report.missing_kinds == [ANOMALY_GRIPPER_SLIPPAGE, ANOMALY_SPATIAL_MISALIGNMENT]
        assert set(report.per_kind) == {ANOMALY_GRIPPER_OPEN}

    def test_nothing_scoreable(self, tiny_model):
        report = evaluate_benchmark(tiny_model, self.profiles, self.episodes[:2])
        assert report.macro_auc is None
        assert len(report.missing_kinds) == 3

    def test_detection_and_false_alarms(self, tiny_model):
        report = evaluate_benchmark(tiny_model, self.profiles, self.episodes)
        detection = report.detection[ANOMALY_GRIPPER_OPEN]
        assert detection["episodes"] == 2
        assert detection["detected_fraction"] == 1.0
        assert detection["mean_delay_frames"] == 0.0
        assert report.nominal_false_alarm_rate == 1.0

    def test_per_task_breakdown(self, tiny_model):
        report = evaluate_benchmark(tiny_model, self.profiles, self.episodes)
        assert set(report.per_task) == {"task_00", "task_01"}
        assert report.per_task["task_00"][ANOMALY_GRIPPER_OPEN]["positives"] == 16 - self.episodes[2].t_anomaly

    def test_report_files(self, tiny_model, tmp_path):
        report = evaluate_benchmark(tiny_model, self.profiles, self.episodes)
        path = save_bench_report(report, tmp_path / "bench_report.json")
        assert "curves" not in path.read_text()
        paths = write_score_curves(report, tmp_path / "curves")
        assert sorted(p.name for p in paths) == sorted(f"{ep.episode_id}.csv" for ep in self.episodes)
        with open(paths[0], newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["frame", "score", "upper", "label"]
        assert len(rows) == 14
