"""Tests for windowing, persistence and the balanced sampler."""
import numpy as np
import pytest

from rcnf_monitor.const import (
    ANOMALY_GRIPPER_OPEN,
    ANOMALY_NONE,
    LABEL_ANOMALOUS,
    LABEL_NORMAL,
)
from rcnf_monitor.dataset import (
    RobotStateNormalizer,
    SampleWeights,
    compute_balanced_weights,
    episode_from_dict,
    episode_to_dict,
    frame_from_dict,
    load_episode,
    load_episodes,
    nominal_windows,
    read_manifest,
    save_episode,
    split_by_episode,
    stack_windows,
    weighted_sample,
    windows_from_episode,
    write_manifest,
)
from rcnf_monitor.exceptions import EpisodeTooShortError, RCNFValidationError
from rcnf_monitor.scene_sim import Episode, EpisodeFrame, PointFrame, RobotStateFrame, generate_episode


def _frame(value, label=LABEL_NORMAL, joints=2, points=2):
    robot = RobotStateFrame(np.full(joints, value), 1.0, np.array([value, 0, 0, 1.0, 0, 0, 0]))
    return EpisodeFrame(robot, PointFrame(np.full((points, 2), value)), label)


def _episode(length, t_anomaly=None, episode_id="ep", task_id="task_00"):
    kind = ANOMALY_NONE if t_anomaly is None else ANOMALY_GRIPPER_OPEN
    frames = [
        _frame(float(t), LABEL_ANOMALOUS if t_anomaly is not None and t >= t_anomaly else LABEL_NORMAL)
        for t in range(length)
    ]
    return Episode(episode_id, task_id, kind, t_anomaly, frames)


class TestWindowing:

    def test_window_count(self):
        assert len(windows_from_episode(_episode(48), 12)) == 37

    def test_window_count_with_stride(self):
        assert len(windows_from_episode(_episode(48), 12, stride=4)) == 10

    def test_window_contents(self):
        window = windows_from_episode(_episode(10), 4)[3]
        assert window.x.shape == (4, 2, 2)
        assert window.s.shape == (4, 2 + 1 + 7)
        assert np.array_equal(window.x[:, 0, 0], [3.0, 4.0, 5.0, 6.0])
        assert window.source == ("ep", 3)

    def test_label_rule(self):
        windows = windows_from_episode(_episode(20, t_anomaly=10), 4)
        for window in windows:
            end = window.source[1] + 3
            assert window.is_anomalous == (end >= 10)

    def test_too_short(self):
        with pytest.raises(EpisodeTooShortError):
            windows_from_episode(_episode(3), 4)

    def test_nominal_windows_skip_anomalous_episodes(self):
        episodes = [_episode(8, episode_id="a"), _episode(8, t_anomaly=4, episode_id="b")]
        windows = nominal_windows(episodes, 4)
        assert {w.source[0] for w in windows} == {"a"}

    def test_stack(self):
        x, s, task_ids = stack_windows(windows_from_episode(_episode(8), 4))
        assert x.shape == (5, 4, 2, 2)
        assert s.shape == (5, 4, 10)
        assert task_ids == ["task_00"] * 5

    def test_stack_empty(self):
        with pytest.raises(RCNFValidationError):
            stack_windows([])


class TestSplit:

    def test_split_keeps_episodes_whole(self):
        windows = []
        for i in range(10):
            windows.extend(windows_from_episode(_episode(8, episode_id=f"e{i}"), 4))
        train, held = split_by_episode(windows, 0.2, seed=3)
        train_ids = {w.source[0] for w in train}
        held_ids = {w.source[0] for w in held}
        assert len(held_ids) == 2
        assert not train_ids & held_ids
        assert len(train) + len(held) == len(windows)

    def test_split_deterministic(self):
        windows = []
        for i in range(6):
            windows.extend(windows_from_episode(_episode(6, episode_id=f"e{i}"), 4))
        a = split_by_episode(windows, 0.5, seed=1)[1]
        b = split_by_episode(windows, 0.5, seed=1)[1]
        assert [w.source for w in a] == [w.source for w in b]

    def test_zero_fraction(self):
        windows = windows_from_episode(_episode(6), 4)
        train, held = split_by_episode(windows, 0.0, seed=0)
        assert len(train) == len(windows) and held == []


class TestBalancedWeights:

    def test_uniform_when_scores_equal(self):
        weights = compute_balanced_weights([1.0, 1.0, 1.0, 1.0])
        assert np.allclose(weights.weights, 0.25)

    def test_bin_mass_equalized(self):
        # nine scores in the lowest bin, one in the highest
        scores = [0.0] * 9 + [10.0]
        weights = compute_balanced_weights(scores, bins=10).weights
        assert weights.sum() == pytest.approx(1.0)
        assert weights[-1] == pytest.approx(0.5)
        assert np.allclose(weights[:9], 0.5 / 9)

    def test_three_populated_bins(self):
        scores = [0.0, 0.1, 5.0, 9.9, 10.0, 10.0]
        weights = compute_balanced_weights(scores, bins=10).weights
        # bins: {0.0, 0.1}, {5.0}, {9.9, 10.0, 10.0}
        assert weights[0] == pytest.approx(1 / 6)
        assert weights[2] == pytest.approx(1 / 3)
        assert weights[3] == pytest.approx(1 / 9)

    def test_rejects_non_finite(self):
        with pytest.raises(RCNFValidationError):
            compute_balanced_weights([0.0, np.nan])

    def test_weights_are_read_only(self):
        weights = SampleWeights(np.array([1.0, 3.0]))
        assert np.allclose(weights.weights, [0.25, 0.75])
        with pytest.raises(ValueError):
            weights.weights[0] = 1.0

    def test_weighted_sample_follows_weights(self):
        weights = SampleWeights(np.array([0.0, 1.0, 0.0]))
        assert set(weighted_sample(weights, 50, seed=0)) == {1}

    def test_weighted_sample_deterministic(self):
        weights = SampleWeights.uniform(5)
        assert weighted_sample(weights, 20, seed=4) == weighted_sample(weights, 20, seed=4)

    def test_uniform_sampling_stays_within_three_sigma(self):
        draws = 100_000
        counts = np.bincount(weighted_sample(SampleWeights.uniform(4), draws, seed=0), minlength=4)
        sigma = np.sqrt(draws * 0.25 * 0.75)
        assert np.all(np.abs(counts - draws / 4) <= 3 * sigma)

    def test_balanced_sampling_flattens_score_histogram(self):
        scores = np.random.default_rng(3).exponential(size=2000)
        edges = np.linspace(scores.min(), scores.max(), 11)
        before, _ = np.histogram(scores, bins=edges)
        occupied = before > 0
        picks = weighted_sample(compute_balanced_weights(scores, bins=10), 100_000, seed=0)
        after, _ = np.histogram(scores[picks], bins=edges)
        spread_before = np.std(before[occupied] / before.sum())
        spread_after = np.std(after[occupied] / after.sum())
        assert spread_after <= 0.6 * spread_before


class TestNormalizer:

    def test_fit_and_apply(self):
        states = np.random.default_rng(0).normal(3.0, 2.0, size=(50, 4, 3))
        normalizer = RobotStateNormalizer.fit(states)
        applied = normalizer.apply(states).reshape(-1, 3)
        assert np.allclose(applied.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(applied.std(axis=0), 1.0)

    def test_constant_dimension_passes_through(self):
        states = np.zeros((10, 2, 2))
        states[..., 0] = np.arange(20).reshape(10, 2)
        normalizer = RobotStateNormalizer.fit(states)
        assert normalizer.std[1] == 1.0

    def test_round_trip_dict(self):
        normalizer = RobotStateNormalizer(np.array([1.0, 2.0]), np.array([0.5, 4.0]))
        restored = RobotStateNormalizer.from_dict(normalizer.to_dict())
        assert np.array_equal(restored.mean, normalizer.mean)
        assert np.array_equal(restored.std, normalizer.std)


class TestPersistence:

    def test_episode_file_round_trip(self, tmp_path):
        episode = generate_episode("task_01", ANOMALY_GRIPPER_OPEN, 3, 24, window=12, num_points=8, mask_size=48)
        path = save_episode(episode, tmp_path / "ep.json")
        loaded = load_episode(path)
        assert loaded.t_anomaly == episode.t_anomaly
        assert loaded.labels == episode.labels
        assert loaded.initial_bbox == pytest.approx(episode.initial_bbox)
        for a, b in zip(loaded.frames, episode.frames):
            assert np.array_equal(a.points.points, b.points.points)
            assert np.array_equal(a.robot.as_vector(), b.robot.as_vector())

    def test_episode_dict_keys(self):
        document = episode_to_dict(_episode(4))
        assert set(document) == {"episode_id", "task_id", "anomaly_kind", "t_anomaly", "initial_bbox", "frames"}
        assert set(document["frames"][0]) == {"joints", "gripper", "pose", "points", "label"}

    def test_malformed_episode(self):
        with pytest.raises(RCNFValidationError):
            episode_from_dict({"episode_id": "x"})

    def test_frame_without_label_defaults_to_normal(self):
        record = {"joints": [0.0], "gripper": 0.5, "pose": [0, 0, 0, 1, 0, 0, 0], "points": [[0.1, 0.2]]}
        assert frame_from_dict(record).label == LABEL_NORMAL

    def test_malformed_frame(self):
        with pytest.raises(RCNFValidationError):
            frame_from_dict({"joints": [0.0], "gripper": 0.5})

    def test_manifest(self, tmp_path):
        save_episode(_episode(6, episode_id="a"), tmp_path / "none" / "a.json")
        save_episode(_episode(6, t_anomaly=3, episode_id="b"), tmp_path / "gripper_open" / "b.json")
        write_manifest(
            tmp_path, T=4, N=2, J=2, task_ids=["task_00"],
            episodes=[
                {"file": "none/a.json", "anomaly_kind": ANOMALY_NONE},
                {"file": "gripper_open/b.json", "anomaly_kind": ANOMALY_GRIPPER_OPEN},
            ],
            normalizer=RobotStateNormalizer.identity(10),
        )
        manifest = read_manifest(tmp_path)
        assert manifest["T"] == 4 and manifest["norm_stats"]["std"] == [1.0] * 10
        assert [e.episode_id for e in load_episodes(tmp_path)] == ["a", "b"]
        assert [e.episode_id for e in load_episodes(tmp_path, anomaly_kinds=[ANOMALY_NONE])] == ["a"]

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(RCNFValidationError):
            read_manifest(tmp_path)
