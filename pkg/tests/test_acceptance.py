"""Long-running checks at full benchmark scale; run with --run-slow."""
import json

import numpy as np
import pytest

from rcnf_monitor.cli import main
from rcnf_monitor.const import (
    ANOMALY_GRIPPER_OPEN,
    ANOMALY_GRIPPER_SLIPPAGE,
    ANOMALY_SPATIAL_MISALIGNMENT,
    DEFAULT_WINDOW,
    EXIT_OK,
    TASK_IDS,
)
from rcnf_monitor.dataset import nominal_windows, stack_windows
from rcnf_monitor.flow import FlowConfig, RCNFlow
from rcnf_monitor.monitor import FrameMonitor, ThresholdProfile, summarize_latency
from rcnf_monitor.scene_sim import generate_episode
from rcnf_monitor.task_codec import optimize_codebook

pytestmark = pytest.mark.slow


def _step(*argv):
    assert main(list(argv)) == EXIT_OK, argv[0]


def _train_and_eval(root, name, *ablate):
    flags = [arg for kind in ablate for arg in ("--ablate", kind)]
    model = root / f"{name}.npz"
    reports = root / name
    _step("train", "--seed", "0", "--data-dir", str(root / "train"), "--codebook", str(root / "codebook.json"),
          "--out", str(model), *flags)
    _step("calibrate", "--seed", "0", "--checkpoint", str(model), "--data-dir", str(root / "holdout"),
          "--out", str(root / f"{name}-profiles.json"))
    _step("eval", "--seed", "0", "--checkpoint", str(model), "--profiles", str(root / f"{name}-profiles.json"),
          "--data-dir", str(root / "bench"), "--reports-dir", str(reports), "--no-curves")
    return json.loads((reports / "bench_report.json").read_text())


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    _step("encode-tasks", "--seed", "0", "--out", str(root / "codebook.json"))
    _step("gen-data", "--seed", "0", "--codebook", str(root / "codebook.json"), "--out-dir", str(root / "train"))
    _step("gen-data", "--seed", "1", "--codebook", str(root / "codebook.json"), "--out-dir", str(root / "holdout"),
          "--episodes-per-task", "10")
    _step("gen-data", "--seed", "2", "--codebook", str(root / "codebook.json"), "--out-dir", str(root / "bench"),
          "--anomaly", "none", "--anomaly", "all", "--episodes-per-task", "10")
    return root


@pytest.fixture(scope="module")
def full_report(benchmark):
    return _train_and_eval(benchmark, "full")


class TestBenchmark:

    def test_macro_targets(self, full_report):
        assert full_report["missing_kinds"] == []
        assert full_report["macro_auc"] >= 0.90
        assert full_report["macro_ap"] >= 0.90

    def test_per_kind_auc(self, full_report):
        for kind, result in full_report["per_kind"].items():
            assert result["auc"] >= 0.85, kind

    def test_slippage_detected_within_one_window(self, full_report):
        slippage = full_report["detection"][ANOMALY_GRIPPER_SLIPPAGE]
        assert slippage["detected_fraction"] >= 0.8
        assert slippage["mean_delay_frames"] <= DEFAULT_WINDOW


class TestAblations:

    def test_task_embedding_drives_misalignment(self, benchmark, full_report):
        ablated = _train_and_eval(benchmark, "no-task", "task_embedding")
        full = full_report["per_kind"][ANOMALY_SPATIAL_MISALIGNMENT]["auc"]
        assert full - ablated["per_kind"][ANOMALY_SPATIAL_MISALIGNMENT]["auc"] >= 0.05

    def test_robot_state_drives_gripper_open(self, benchmark, full_report):
        ablated = _train_and_eval(benchmark, "no-state", "robot_state")
        full = full_report["per_kind"][ANOMALY_GRIPPER_OPEN]["auc"]
        assert full - ablated["per_kind"][ANOMALY_GRIPPER_OPEN]["auc"] >= 0.05


class TestLatency:

    def test_steady_state_budget(self):
        config = FlowConfig()
        codebook = optimize_codebook(len(TASK_IDS), config.T, 5.0, 0, TASK_IDS)
        model = RCNFlow(config, codebook, seed=0)
        episodes = [generate_episode(TASK_IDS[i], "none", seed=i) for i in range(4)]
        x, s, task_ids = stack_windows(nominal_windows(episodes, config.T))
        model.initialize_actnorm(x, s, task_ids)

        profile = ThresholdProfile.build(TASK_IDS[0], 0.0, [1.0] * 19, 0.05)
        monitor = FrameMonitor(model, profile)
        verdicts = [monitor.process(frame) for frame in episodes[0].frames]
        # drop the first scored frames while torch warms its kernels
        steady = [v for v in verdicts if v is not None][5:]
        summary = summarize_latency(steady)
        assert summary["count"] > 20
        assert summary["p95_ms"] < 50.0
        assert np.isfinite([v.score for v in steady]).all()
