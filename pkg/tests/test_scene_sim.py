"""Tests for the synthetic benchmark and geometry helpers."""
import math

import numpy as np
import pytest

from rcnf_monitor.const import (
    ANOMALY_GRIPPER_OPEN,
    ANOMALY_GRIPPER_SLIPPAGE,
    ANOMALY_KINDS,
    ANOMALY_NONE,
    ANOMALY_SPATIAL_MISALIGNMENT,
    LABEL_ANOMALOUS,
    LABEL_NORMAL,
    TABLE_LINE,
)
from rcnf_monitor.exceptions import (
    EmptyMaskError,
    EmptyProjectionError,
    EpisodeTooShortError,
    RCNFValidationError,
    UnknownTaskError,
)
from rcnf_monitor.scene_sim import (
    CameraModel,
    Episode,
    EpisodeFrame,
    GeomBox,
    PointFrame,
    RobotStateFrame,
    bbox_of,
    generate_episode,
    grid_sample_mask,
    project_points,
    sample_geom_points,
    task_scripts,
    unproject_points,
)


def _identity_camera(size=2):
    return CameraModel.from_params(1.0, 1.0, 0.0, 0.0, size, size)


class TestGeometry:
    """Box sampling, pinhole projection, bbox."""

    # ── sample_geom_points ────────────────────────────────────────────

    def test_single_sample_is_center(self):
        box = GeomBox(np.zeros(3), np.eye(3), np.ones(3))
        assert np.allclose(sample_geom_points(box, 1), [[0.0, 0.0, 0.0]])

    def test_two_per_axis_gives_corners(self):
        box = GeomBox(np.array([1.0, 2.0, 3.0]), np.eye(3), np.array([2.0, 2.0, 2.0]))
        points = sample_geom_points(box, 2)
        expected = {(x, y, z) for x in (0.0, 2.0) for y in (1.0, 3.0) for z in (2.0, 4.0)}
        assert {tuple(np.round(p, 12)) for p in points} == expected

    def test_five_per_axis(self):
        box = GeomBox(np.zeros(3), np.eye(3), np.ones(3))
        assert sample_geom_points(box, 5).shape == (125, 3)

    def test_rotation_applied(self):
        rotation = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        box = GeomBox(np.zeros(3), rotation, np.array([2.0, 0.5, 0.5]))
        points = sample_geom_points(box, 2)
        # the long box axis now lies along world y
        assert np.ptp(points[:, 1]) == pytest.approx(2.0)
        assert np.ptp(points[:, 0]) == pytest.approx(0.5)

    def test_non_orthonormal_rotation_rejected(self):
        with pytest.raises(RCNFValidationError):
            GeomBox(np.zeros(3), np.eye(3) * 2.0, np.ones(3))

    # ── project_points ────────────────────────────────────────────────

    def test_pinhole_identity(self):
        pixels = project_points(_identity_camera(), np.array([[0.5, 0.25, 1.0]]))
        assert np.allclose(pixels, [[0.5, 0.25]])

    def test_behind_camera_filtered(self):
        assert len(project_points(_identity_camera(), np.array([[0.5, 0.25, -1.0]]))) == 0

    def test_half_open_bounds(self):
        pixels = project_points(_identity_camera(), np.array([[2.0, 0.5, 1.0], [0.0, 0.0, 1.0]]))
        assert np.allclose(pixels, [[0.0, 0.0]])

    def test_input_order_kept(self):
        world = np.array([[0.1, 0.1, 1.0], [5.0, 5.0, 1.0], [1.0, 0.2, 1.0]])
        assert np.allclose(project_points(_identity_camera(), world), [[0.1, 0.1], [1.0, 0.2]])

    def test_project_unproject_round_trip(self):
        rng = np.random.default_rng(0)
        camera = CameraModel.from_params(100.0, 120.0, 64.0, 48.0, 128, 96)
        cam_points = np.column_stack([rng.uniform(-0.2, 0.2, 20), rng.uniform(-0.2, 0.2, 20), rng.uniform(1.0, 3.0, 20)])
        pixels = project_points(camera, cam_points)
        assert len(pixels) == 20
        assert np.allclose(unproject_points(camera, pixels, cam_points[:, 2]), cam_points, atol=1e-9)

    def test_invalid_camera(self):
        with pytest.raises(RCNFValidationError):
            CameraModel.from_params(0.0, 1.0, 0.0, 0.0, 2, 2)

    # ── bbox_of ───────────────────────────────────────────────────────

    def test_bbox_singleton(self):
        assert bbox_of([(1.0, 2.0)]) == (1.0, 2.0, 1.0, 2.0)

    def test_bbox_extrema(self):
        assert bbox_of([(0, 0), (3, 1), (2, 4)]) == (0.0, 0.0, 3.0, 4.0)

    def test_bbox_permutation_invariant(self):
        pixels = np.random.default_rng(1).uniform(0, 10, size=(9, 2))
        assert bbox_of(pixels) == bbox_of(pixels[::-1])

    def test_bbox_of_projected_cube(self):
        box = GeomBox(np.array([0.0, 0.0, 2.0]), np.eye(3), np.ones(3))
        camera = CameraModel.from_params(1.0, 1.0, 1.0, 1.0, 2, 2)
        pixels = project_points(camera, sample_geom_points(box, 2))
        assert len(pixels) == 8
        # near face z = 1.5 gives the extreme pixels: 1 ± 0.5 / 1.5
        assert bbox_of(pixels) == pytest.approx((1 - 1 / 3, 1 - 1 / 3, 1 + 1 / 3, 1 + 1 / 3))

    def test_bbox_empty(self):
        with pytest.raises(EmptyProjectionError):
            bbox_of(np.zeros((0, 2)))


class TestGridSampleMask:

    def test_full_mask_gives_corners(self):
        frame = grid_sample_mask(np.ones((10, 10), dtype=bool), 4)
        got = {tuple(np.round(p, 12)) for p in frame.points}
        assert got == {(0.05, 0.05), (0.95, 0.05), (0.05, 0.95), (0.95, 0.95)}

    def test_single_pixel_padding(self):
        mask = np.zeros((10, 10), dtype=bool)
        mask[3, 7] = True
        frame = grid_sample_mask(mask, 3)
        assert np.allclose(frame.points, [[0.75, 0.35]] * 3)

    def test_circle_points_inside_and_centered(self):
        yy, xx = np.mgrid[0:100, 0:100]
        mask = (xx + 0.5 - 50.0) ** 2 + (yy + 0.5 - 50.0) ** 2 <= 20.0 ** 2
        frame = grid_sample_mask(mask, 32)
        assert frame.points.shape == (32, 2)
        pixels = frame.points * 100.0
        assert np.all(np.hypot(pixels[:, 0] - 50.0, pixels[:, 1] - 50.0) <= 21.0)
        assert np.hypot(*(pixels.mean(axis=0) - 50.0)) <= 1.0

    def test_translation_equivariant(self):
        mask = np.zeros((64, 64), dtype=bool)
        mask[10:22, 8:17] = True
        mask[14:18, 17:25] = True
        shifted = np.roll(np.roll(mask, 5, axis=0), 11, axis=1)
        a = grid_sample_mask(mask, 20).points
        b = grid_sample_mask(shifted, 20).points
        assert np.allclose(b - a, [11 / 64, 5 / 64], atol=1e-12)

    def test_exact_count_for_thin_mask(self):
        mask = np.zeros((32, 32), dtype=bool)
        mask[16, 4:28] = True
        assert grid_sample_mask(mask, 32).points.shape == (32, 2)

    def test_empty_mask(self):
        with pytest.raises(EmptyMaskError):
            grid_sample_mask(np.zeros((5, 5), dtype=bool), 4)


class TestFrameTypes:

    def test_quaternion_must_be_unit(self):
        with pytest.raises(RCNFValidationError):
            RobotStateFrame(np.zeros(7), 0.5, np.array([0, 0, 0, 2.0, 0, 0, 0]))

    def test_gripper_range(self):
        with pytest.raises(RCNFValidationError):
            RobotStateFrame(np.zeros(7), 1.5, np.array([0, 0, 0, 1.0, 0, 0, 0]))

    def test_state_vector_layout(self):
        robot = RobotStateFrame(np.arange(3.0), 0.25, np.array([1, 2, 3, 1.0, 0, 0, 0]))
        assert np.array_equal(robot.as_vector(), [0, 1, 2, 0.25, 1, 2, 3, 1, 0, 0, 0])

    def test_label_protocol_enforced(self):
        robot = RobotStateFrame(np.zeros(2), 1.0, np.array([0, 0, 0, 1.0, 0, 0, 0]))
        points = PointFrame(np.zeros((2, 2)))
        frames = [EpisodeFrame(robot, points, label) for label in (LABEL_NORMAL, LABEL_NORMAL, LABEL_NORMAL)]
        with pytest.raises(RCNFValidationError):
            Episode("e", "task_00", ANOMALY_GRIPPER_OPEN, 1, frames)
        with pytest.raises(RCNFValidationError):
            Episode("e", "task_00", ANOMALY_GRIPPER_OPEN, None, frames)


class TestGenerateEpisode:

    LENGTH = 48

    def _episode(self, kind, seed=5, task_id="task_03"):
        return generate_episode(task_id, kind, seed, self.LENGTH, mask_size=96)

    # ── Nominal ───────────────────────────────────────────────────────

    def test_nominal_labels_and_goal(self):
        episode = self._episode(ANOMALY_NONE)
        assert episode.t_anomaly is None
        assert set(episode.labels) == {LABEL_NORMAL}
        target = np.array(task_scripts()["task_03"].target)
        assert np.linalg.norm(episode.object_track()[-1] - target) < 0.04

    def test_frame_shapes(self):
        episode = generate_episode("task_00", ANOMALY_NONE, 1, 24, window=12, num_points=16, joints=5, mask_size=64)
        assert len(episode) == 24
        assert episode.frames[0].points.points.shape == (16, 2)
        assert episode.frames[0].robot.as_vector().shape == (5 + 1 + 7,)
        assert np.all((episode.frames[0].points.points >= 0) & (episode.frames[0].points.points <= 1))

    def test_initial_bbox_inside_image(self):
        episode = self._episode(ANOMALY_NONE)
        x_min, y_min, x_max, y_max = episode.initial_bbox
        assert 0 <= x_min < x_max < 96
        assert 0 <= y_min < y_max < 96

    def test_deterministic(self):
        a = self._episode(ANOMALY_GRIPPER_SLIPPAGE, seed=9)
        b = self._episode(ANOMALY_GRIPPER_SLIPPAGE, seed=9)
        assert a.t_anomaly == b.t_anomaly
        for fa, fb in zip(a.frames, b.frames):
            assert np.array_equal(fa.points.points, fb.points.points)
            assert np.array_equal(fa.robot.as_vector(), fb.robot.as_vector())

    # ── Anomalies ─────────────────────────────────────────────────────

    @pytest.mark.parametrize("kind", ANOMALY_KINDS)
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_label_protocol(self, kind, seed):
        episode = self._episode(kind, seed)
        lo, hi = math.ceil(0.2 * self.LENGTH), math.floor(0.8 * self.LENGTH) - 1
        assert lo <= episode.t_anomaly <= hi
        for t, label in enumerate(episode.labels):
            assert (label == LABEL_ANOMALOUS) == (t >= episode.t_anomaly)

    def test_gripper_open_object_stays_put(self):
        episode = self._episode(ANOMALY_GRIPPER_OPEN)
        track = episode.object_track()
        assert np.all(track == track[0])
        centroids = np.array([frame.points.centroid for frame in episode.frames])
        assert np.allclose(centroids, centroids[0])
        assert episode.frames[-1].robot.gripper == 1.0

    def test_slippage_object_falls(self):
        episode = self._episode(ANOMALY_GRIPPER_SLIPPAGE)
        heights = episode.object_track()[episode.t_anomaly:, 1]
        assert np.all(np.diff(heights) >= 0.0)
        assert heights[-1] > heights[0]
        assert np.all(heights <= TABLE_LINE)

    @pytest.mark.parametrize("task_id", ["task_00", "task_04", "task_07"])
    def test_slippage_starts_above_table(self, task_id):
        for seed in range(12):
            episode = self._episode(ANOMALY_GRIPPER_SLIPPAGE, seed, task_id)
            track = episode.object_track()
            held = track[episode.t_anomaly - 1, 1]
            assert held < TABLE_LINE, seed
            assert track[-1, 1] > held, seed

    def test_misalignment_ends_at_wrong_compartment(self):
        episode = self._episode(ANOMALY_SPATIAL_MISALIGNMENT)
        script = task_scripts()["task_03"]
        end = episode.object_track()[-1]
        assert np.linalg.norm(end - np.array(script.target)) > 0.08
        nearest = min(np.linalg.norm(end - np.array(alt)) for alt in script.alternates)
        assert nearest < 0.04

    # ── Errors ────────────────────────────────────────────────────────

    def test_unknown_task(self):
        with pytest.raises(UnknownTaskError):
            generate_episode("task_42", ANOMALY_NONE, 0)

    def test_too_short(self):
        with pytest.raises(EpisodeTooShortError):
            generate_episode("task_00", ANOMALY_NONE, 0, 20, window=12)
