"""Synthetic pick-and-place benchmark.

Episodes are scripted in the normalized image plane ([0, 1]², y grows
downward, the table surface is the line y = TABLE_LINE):

    approach → grasp (gripper closes) → carry along a task-specific arc
             → release at the task's target compartment

Three anomalies can be injected at t_anomaly:
  gripper_open          the gripper never closes, the object stays at rest
  gripper_slippage      the object decouples and falls to the table
  spatial_misalignment  the carry diverts to another compartment

The object is rendered as a disc or box mask and grid-sampled into a fixed
number of points, standing in for segmentation masks. The 3D geometry
helpers (box grid sampling, pinhole projection, bbox) compute the first-frame
bounding box of every episode.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .const import (
    ANOMALY_GRIPPER_OPEN,
    ANOMALY_GRIPPER_SLIPPAGE,
    ANOMALY_NONE,
    ANOMALY_SPATIAL_MISALIGNMENT,
    ANOMALY_WINDOW,
    ALL_EPISODE_KINDS,
    DEFAULT_EPISODE_LENGTH,
    DEFAULT_JOINTS,
    DEFAULT_MASK_SIZE,
    DEFAULT_POINTS,
    DEFAULT_WINDOW,
    DEPTH_EPSILON,
    FALL_ACCELERATION,
    GEOM_GRID,
    GEOMETRY_JITTER,
    JITTER_SIGMA,
    LABEL_ANOMALOUS,
    LABEL_NORMAL,
    NORM_TOLERANCE,
    POSE_DIM,
    SLIP_CLEARANCE,
    TABLE_LINE,
    TASK_IDS,
)
from .exceptions import (
    EmptyMaskError,
    EmptyProjectionError,
    EpisodeTooShortError,
    InvalidDimensionsError,
    RCNFValidationError,
    ShapeMismatchError,
    UnknownTaskError,
)

_LOGGER = logging.getLogger(__name__)

# meters of table per unit of normalized image coordinate
TABLE_SCALE = 0.8
CAMERA_HEIGHT = 1.0
EE_HOME = (0.5, 0.08)
CADDY_CENTER = (0.5, 0.35)
# back, left, front, right
COMPARTMENT_OFFSETS = ((0.0, -0.08), (-0.12, 0.0), (0.0, 0.08), (0.12, 0.0))
START_COLUMNS = 5


def _check_orthonormal(rotation: np.ndarray, what: str) -> None:
    if rotation.shape != (3, 3):
        raise ShapeMismatchError(f"{what} must be 3x3, got {rotation.shape}")
    if not np.allclose(rotation @ rotation.T, np.eye(3), atol=1e-6):
        raise RCNFValidationError(f"{what} is not orthonormal")


# ─────────────────────────────────────────────
# Frame types
# ─────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class RobotStateFrame:
    joints: np.ndarray
    gripper: float
    pose: np.ndarray

    def __post_init__(self) -> None:
        joints = np.asarray(self.joints, dtype=np.float64).reshape(-1)
        pose = np.asarray(self.pose, dtype=np.float64).reshape(-1)
        if pose.shape != (POSE_DIM,):
            raise ShapeMismatchError(f"pose must have {POSE_DIM} entries, got {pose.shape[0]}")
        if not (np.all(np.isfinite(joints)) and np.all(np.isfinite(pose))):
            raise RCNFValidationError("robot state contains non-finite values")
        if not 0.0 <= float(self.gripper) <= 1.0:
            raise RCNFValidationError(f"gripper {self.gripper} outside [0, 1]")
        if abs(np.linalg.norm(pose[3:]) - 1.0) > NORM_TOLERANCE:
            raise RCNFValidationError("pose quaternion is not unit norm")
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "pose", pose)
        object.__setattr__(self, "gripper", float(self.gripper))

    def as_vector(self) -> np.ndarray:
        """joints ⊕ gripper ⊕ pose."""
        return np.concatenate([self.joints, [self.gripper], self.pose])


@dataclass(frozen=True, eq=False)
class PointFrame:
    points: np.ndarray

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 1:
            raise ShapeMismatchError(f"points must be (N, 2), got {points.shape}")
        if not np.all(np.isfinite(points)):
            raise RCNFValidationError("point frame contains non-finite coordinates")
        object.__setattr__(self, "points", points)

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass(frozen=True, eq=False)
class EpisodeFrame:
    robot: RobotStateFrame
    points: PointFrame
    label: str
    object_center: tuple[float, float] | None = None


@dataclass(eq=False)
class Episode:
    episode_id: str
    task_id: str
    anomaly_kind: str
    t_anomaly: int | None
    frames: list[EpisodeFrame]
    initial_bbox: tuple[float, float, float, float] | None = None

    def __post_init__(self) -> None:
        if self.anomaly_kind not in ALL_EPISODE_KINDS:
            raise RCNFValidationError(f"Unknown anomaly kind {self.anomaly_kind!r}")
        labels = self.labels
        if self.anomaly_kind == ANOMALY_NONE:
            if self.t_anomaly is not None or LABEL_ANOMALOUS in labels:
                raise RCNFValidationError(
                    f"Nominal episode {self.episode_id} carries anomaly labels"
                )
            return
        if self.t_anomaly is None:
            raise RCNFValidationError(f"Anomalous episode {self.episode_id} lacks t_anomaly")
        expected = [
            LABEL_ANOMALOUS if t >= self.t_anomaly else LABEL_NORMAL
            for t in range(len(self.frames))
        ]
        if labels != expected:
            raise RCNFValidationError(
                f"Labels of episode {self.episode_id} do not switch at t_anomaly={self.t_anomaly}"
            )

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def labels(self) -> list[str]:
        return [frame.label for frame in self.frames]

    def object_track(self) -> np.ndarray:
        """(L, 2) simulated object centers."""
        return np.array([frame.object_center for frame in self.frames], dtype=np.float64)


# ─────────────────────────────────────────────
# Geometry utilities
# ─────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class CameraModel:
    intrinsics: np.ndarray
    extrinsic: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self) -> None:
        intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        extrinsic = np.asarray(self.extrinsic, dtype=np.float64)
        if intrinsics.shape != (3, 3) or extrinsic.shape != (4, 4):
            raise ShapeMismatchError("intrinsics must be 3x3 and extrinsic 4x4")
        if intrinsics[0, 0] <= 0 or intrinsics[1, 1] <= 0:
            raise RCNFValidationError("focal lengths must be positive")
        _check_orthonormal(extrinsic[:3, :3], "extrinsic rotation")
        object.__setattr__(self, "intrinsics", intrinsics)
        object.__setattr__(self, "extrinsic", extrinsic)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

    @classmethod
    def from_params(
        cls,
        fx: float,
        fy: float,
        cx: float,
        cy: float,
        width: int,
        height: int,
        extrinsic: np.ndarray | None = None,
    ) -> "CameraModel":
        intrinsics = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(intrinsics, np.eye(4) if extrinsic is None else extrinsic, (width, height))

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]


@dataclass(frozen=True, eq=False)
class GeomBox:
    geom_pos: np.ndarray
    rotation: np.ndarray
    geom_size: np.ndarray

    def __post_init__(self) -> None:
        pos = np.asarray(self.geom_pos, dtype=np.float64).reshape(3)
        rotation = np.asarray(self.rotation, dtype=np.float64)
        size = np.asarray(self.geom_size, dtype=np.float64).reshape(3)
        _check_orthonormal(rotation, "geometry rotation")
        if np.any(size <= 0):
            raise RCNFValidationError(f"geometry sizes must be positive, got {size}")
        object.__setattr__(self, "geom_pos", pos)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "geom_size", size)


def sample_geom_points(box: GeomBox, grid: int) -> np.ndarray:
    """grid³ world points, offsets evenly spaced over [-0.5, 0.5] per axis."""
    if grid < 1:
        raise InvalidDimensionsError(f"grid must be >= 1, got {grid}")
    steps = np.linspace(-0.5, 0.5, grid) if grid > 1 else np.zeros(1)
    dx, dy, dz = np.meshgrid(steps, steps, steps, indexing="ij")
    local_offset = np.stack([dx.ravel(), dy.ravel(), dz.ravel()], axis=1) * box.geom_size
    return box.geom_pos + local_offset @ box.rotation.T


def project_points(camera: CameraModel, world_points: np.ndarray) -> np.ndarray:
    """Pinhole projection; drops points behind the camera or off the image."""
    world_points = np.asarray(world_points, dtype=np.float64).reshape(-1, 3)
    if len(world_points) == 0:
        return np.zeros((0, 2))
    homogeneous = np.hstack([world_points, np.ones((len(world_points), 1))])
    cam = (homogeneous @ camera.extrinsic.T)[:, :3]
    in_front = cam[:, 2] > DEPTH_EPSILON
    cam = cam[in_front]
    image = cam @ camera.intrinsics.T
    pixels = image[:, :2] / image[:, 2:3]
    inside = (
        (pixels[:, 0] >= 0) & (pixels[:, 0] < camera.width)
        & (pixels[:, 1] >= 0) & (pixels[:, 1] < camera.height)
    )
    return pixels[inside]


def unproject_points(camera: CameraModel, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
    """Inverse of project_points for known camera-frame depths."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    depths = np.asarray(depths, dtype=np.float64).reshape(-1, 1)
    rays = np.hstack([pixels, np.ones((len(pixels), 1))]) @ np.linalg.inv(camera.intrinsics).T
    cam = rays * depths
    homogeneous = np.hstack([cam, np.ones((len(cam), 1))])
    return (homogeneous @ np.linalg.inv(camera.extrinsic).T)[:, :3]


def bbox_of(pixels) -> tuple[float, float, float, float]:
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if len(pixels) == 0:
        raise EmptyProjectionError("no valid projected pixels")
    x_min, y_min = pixels.min(axis=0)
    x_max, y_max = pixels.max(axis=0)
    return float(x_min), float(y_min), float(x_max), float(y_max)


def _symmetric_even_indices(count: int, n: int) -> np.ndarray:
    """``n`` indices spread evenly over range(count), mirror-symmetric."""
    idx = np.floor(np.linspace(0, count - 1, n) + 0.5).astype(int)
    half = n // 2
    if half:
        idx[n - half:] = (count - 1) - idx[:half][::-1]
    return idx


def grid_sample_mask(mask, N: int) -> PointFrame:
    """Sample exactly N points from a boolean mask on a lattice over its bbox.

    The lattice side starts at ⌈√N⌉ and grows until at least N lattice points
    land inside the mask. Lattice positions are computed relative to the
    bbox, so translating the mask translates the output exactly.
    """
    mask = np.asarray(mask, dtype=bool)
    if N < 1:
        raise InvalidDimensionsError(f"N must be >= 1, got {N}")
    if mask.ndim != 2:
        raise ShapeMismatchError(f"mask must be 2D, got shape {mask.shape}")
    if not mask.any():
        raise EmptyMaskError("mask has no foreground pixels")
    height, width = mask.shape
    rows, cols = np.nonzero(mask)
    row0, col0 = rows.min(), cols.min()
    span_y, span_x = rows.max() - row0, cols.max() - col0

    side = math.ceil(math.sqrt(N))
    side_cap = 4 * side
    while True:
        rel_x = np.linspace(0.0, float(span_x), side)
        rel_y = np.linspace(0.0, float(span_y), side)
        grid_x, grid_y = np.meshgrid(rel_x, rel_y)
        rel = np.stack([grid_x.ravel(), grid_y.ravel()], axis=1)
        pix_c = col0 + np.floor(rel[:, 0] + 0.5).astype(int)
        pix_r = row0 + np.floor(rel[:, 1] + 0.5).astype(int)
        inside = mask[np.clip(pix_r, 0, height - 1), np.clip(pix_c, 0, width - 1)]
        if inside.sum() >= N or side >= side_cap:
            break
        side += 1

    kept = rel[inside]
    if len(kept) >= N:
        chosen = kept[_symmetric_even_indices(len(kept), N)]
    else:
        # pad with the kept point nearest to each rejected lattice point
        padding = []
        rejected = rel[~inside]
        while len(kept) + len(padding) < N:
            for point in rejected:
                nearest = kept[np.argmin(np.sum((kept - point) ** 2, axis=1))]
                padding.append(nearest)
                if len(kept) + len(padding) == N:
                    break
            if len(rejected) == 0:
                padding.extend(kept[: N - len(kept) - len(padding)])
        chosen = np.vstack([kept, np.asarray(padding).reshape(-1, 2)])

    absolute = chosen + np.array([col0 + 0.5, row0 + 0.5])
    return PointFrame(absolute / np.array([width, height], dtype=np.float64))


# ─────────────────────────────────────────────
# Task scripts
# ─────────────────────────────────────────────

@dataclass(frozen=True)
class TaskScript:
    task_id: str
    object_start: tuple[float, float]
    target: tuple[float, float]
    alternates: tuple[tuple[float, float], ...]
    arc_height: float
    shape: str          # "disc" or "box"
    size: float         # radius / half-side, normalized units


def task_scripts(task_ids: Sequence[str] = TASK_IDS) -> dict[str, TaskScript]:
    """Deterministic start/target geometry per task.

    Tasks i and i + 5 share a start position but target different
    compartments, so only the task identity tells their carries apart.
    """
    columns = np.linspace(0.15, 0.85, START_COLUMNS)
    compartments = [
        (CADDY_CENTER[0] + dx, CADDY_CENTER[1] + dy) for dx, dy in COMPARTMENT_OFFSETS
    ]
    scripts = {}
    for i, task_id in enumerate(task_ids):
        slot = (i // START_COLUMNS) % len(compartments)
        scripts[task_id] = TaskScript(
            task_id=task_id,
            object_start=(float(columns[i % START_COLUMNS]), TABLE_LINE),
            target=compartments[slot],
            alternates=tuple(c for j, c in enumerate(compartments) if j != slot),
            arc_height=0.10 + 0.03 * (i % 3),
            shape="disc" if i % 2 == 0 else "box",
            size=0.04 + 0.008 * (i % 3),
        )
    return scripts


def default_camera(mask_size: int = DEFAULT_MASK_SIZE) -> CameraModel:
    """Top-down camera CAMERA_HEIGHT above the table, aligned with the image plane."""
    rotation = np.diag([1.0, -1.0, -1.0])
    extrinsic = np.eye(4)
    extrinsic[:3, :3] = rotation
    extrinsic[:3, 3] = -rotation @ np.array([0.0, 0.0, CAMERA_HEIGHT])
    focal = mask_size * CAMERA_HEIGHT / TABLE_SCALE
    return CameraModel.from_params(
        focal, focal, mask_size / 2.0, TABLE_LINE * mask_size, mask_size, mask_size, extrinsic
    )


def image_to_world(xy, height: float = 0.0) -> np.ndarray:
    x, y = xy
    return np.array([(x - 0.5) * TABLE_SCALE, (TABLE_LINE - y) * TABLE_SCALE, height])


def _render_mask(center, script: TaskScript, mask_size: int) -> np.ndarray:
    coords = (np.arange(mask_size) + 0.5) / mask_size
    grid_x, grid_y = np.meshgrid(coords, coords)
    dx, dy = grid_x - center[0], grid_y - center[1]
    if script.shape == "disc":
        mask = dx ** 2 + dy ** 2 <= script.size ** 2
    else:
        mask = (np.abs(dx) <= script.size) & (np.abs(dy) <= script.size * 0.6)
    if not mask.any():
        col = int(np.clip(center[0] * mask_size, 0, mask_size - 1))
        row = int(np.clip(center[1] * mask_size, 0, mask_size - 1))
        mask[row, col] = True
    return mask


_JOINT_MIX = np.random.default_rng(7).uniform(-1.0, 1.0, size=(16, 5))
_JOINT_BASE = np.array([0.0, -0.785, 0.0, -2.356, 0.0, 1.571, 0.785] + [0.0] * 9)


def _robot_frame(ee, lift: float, gripper: float, joints: int) -> RobotStateFrame:
    """Pseudo inverse kinematics: smooth deterministic map from the end effector."""
    position = image_to_world(ee, 0.02 + lift)
    yaw = 0.3 * (ee[0] - 0.5)
    features = np.array([position[0], position[1], position[2], math.sin(yaw), position[0] * position[1]])
    if joints > len(_JOINT_BASE):
        raise InvalidDimensionsError(f"at most {len(_JOINT_BASE)} joints supported")
    q = _JOINT_BASE[:joints] + _JOINT_MIX[:joints] @ features
    quaternion = [math.cos(yaw / 2.0), 0.0, 0.0, math.sin(yaw / 2.0)]
    return RobotStateFrame(q, float(np.clip(gripper, 0.0, 1.0)), np.concatenate([position, quaternion]))


def _smoothstep(u: float) -> float:
    u = min(max(u, 0.0), 1.0)
    return u * u * (3.0 - 2.0 * u)


def _carried_height(start, target, arc_height: float, t: int, carry_start: int, carry_frames: int) -> float:
    """Image y of the held object at carry frame t, without jitter."""
    u = _smoothstep((t - carry_start + 1) / carry_frames)
    return start[1] + (target[1] - start[1]) * u - arc_height * math.sin(math.pi * u)


def generate_episode(
    task_id: str,
    anomaly_kind: str,
    seed: int,
    length: int = DEFAULT_EPISODE_LENGTH,
    *,
    window: int = DEFAULT_WINDOW,
    num_points: int = DEFAULT_POINTS,
    mask_size: int = DEFAULT_MASK_SIZE,
    joints: int = DEFAULT_JOINTS,
    task_ids: Sequence[str] = TASK_IDS,
    episode_id: str | None = None,
) -> Episode:
    """Script one episode; identical arguments give bit-identical episodes."""
    scripts = task_scripts(task_ids)
    if task_id not in scripts:
        raise UnknownTaskError(task_id)
    if anomaly_kind not in ALL_EPISODE_KINDS:
        raise RCNFValidationError(f"Unknown anomaly kind {anomaly_kind!r}")
    if length < 2 * window:
        raise EpisodeTooShortError(f"length {length} < 2·T = {2 * window}")
    script = scripts[task_id]
    rng = np.random.default_rng(seed)

    start = np.array(script.object_start) + rng.uniform(-GEOMETRY_JITTER, GEOMETRY_JITTER, 2)
    start[1] = TABLE_LINE
    target = np.array(script.target) + rng.uniform(-GEOMETRY_JITTER, GEOMETRY_JITTER, 2)
    home = np.array(EE_HOME)

    grasp_start = int(round(rng.uniform(0.27, 0.37) * length))
    grasp_len = max(2, int(round(0.08 * length)))
    carry_start = grasp_start + grasp_len
    carry_end = int(round(rng.uniform(0.78, 0.86) * length))

    lo = math.ceil(ANOMALY_WINDOW[0] * length)
    hi = math.floor(ANOMALY_WINDOW[1] * length) - 1
    t_anomaly: int | None = None
    wrong_target = None
    if anomaly_kind == ANOMALY_GRIPPER_OPEN:
        t_anomaly = grasp_start
    elif anomaly_kind in (ANOMALY_GRIPPER_SLIPPAGE, ANOMALY_SPATIAL_MISALIGNMENT):
        first, last = max(lo, carry_start + 1), min(hi, carry_end - 1)
        if anomaly_kind == ANOMALY_GRIPPER_SLIPPAGE and last >= first:
            # the object must hang clear of the table on the frame before the slip
            heights = {
                t: _carried_height(start, target, script.arc_height, t - 1, carry_start, carry_end - carry_start)
                for t in range(first, last + 1)
            }
            onsets = [t for t, y in heights.items() if y <= TABLE_LINE - SLIP_CLEARANCE]
            if onsets:
                t_anomaly = onsets[int(rng.integers(len(onsets)))]
            else:
                t_anomaly = min(heights, key=heights.get)
        else:
            t_anomaly = int(rng.integers(first, last + 1)) if last >= first else first
        if anomaly_kind == ANOMALY_SPATIAL_MISALIGNMENT:
            choice = script.alternates[int(rng.integers(len(script.alternates)))]
            wrong_target = np.array(choice) + rng.uniform(-GEOMETRY_JITTER, GEOMETRY_JITTER, 2)

    jitter = rng.normal(0.0, JITTER_SIGMA, size=(length, 2))
    carry_frames = carry_end - carry_start
    u_anomaly = (
        (t_anomaly - carry_start + 1) / carry_frames if wrong_target is not None else 1.0
    )

    obj = start.copy()
    velocity = 0.0
    attached = False
    falling = False
    frames: list[EpisodeFrame] = []
    for t in range(length):
        anomalous = t_anomaly is not None and t >= t_anomaly
        lift = 0.0
        if t < grasp_start:
            u = _smoothstep(t / max(grasp_start, 1))
            ee = home + (start - home) * u
            lift = 0.2 * (1.0 - u)
            gripper = 1.0
        elif t < carry_start:
            ee = start.copy()
            gripper = 1.0 - (t - grasp_start + 1) / grasp_len
            if gripper <= 0.0:
                attached = True
        elif t < carry_end:
            u = _smoothstep((t - carry_start + 1) / carry_frames)
            goal = target
            if wrong_target is not None and t >= t_anomaly:
                blend = _smoothstep((u - u_anomaly) / max(1.0 - u_anomaly, 1e-9))
                goal = target + (wrong_target - target) * blend
            arc = script.arc_height * math.sin(math.pi * u)
            ee = start + (goal - start) * u + np.array([0.0, -arc])
            lift = arc
            gripper = 0.0
            attached = True
        else:
            goal = wrong_target if wrong_target is not None else target
            u = _smoothstep((t - carry_end + 1) / max(length - carry_end, 1))
            ee = goal + np.array([0.0, -0.05 * u])
            lift = 0.05 * u
            gripper = min(1.0, (t - carry_end + 1) / grasp_len)
            attached = False

        if anomaly_kind == ANOMALY_GRIPPER_OPEN and anomalous:
            gripper = 1.0
            attached = False
        if anomaly_kind == ANOMALY_GRIPPER_SLIPPAGE and anomalous:
            attached = False
            falling = obj[1] < TABLE_LINE

        ee = ee + jitter[t]
        if attached:
            obj = ee.copy()
        elif falling:
            velocity += FALL_ACCELERATION
            obj = np.array([obj[0], min(obj[1] + velocity, TABLE_LINE)])
            falling = obj[1] < TABLE_LINE

        mask = _render_mask(obj, script, mask_size)
        frames.append(
            EpisodeFrame(
                robot=_robot_frame(ee, lift, gripper, joints),
                points=grid_sample_mask(mask, num_points),
                label=LABEL_ANOMALOUS if anomalous else LABEL_NORMAL,
                object_center=(float(obj[0]), float(obj[1])),
            )
        )

    size = script.size * TABLE_SCALE * 2.0
    box = GeomBox(image_to_world(start, size / 2.0), np.eye(3), [size, size, size])
    try:
        initial_bbox = bbox_of(project_points(default_camera(mask_size), sample_geom_points(box, GEOM_GRID)))
    except EmptyProjectionError:
        _LOGGER.warning("Object of %s projects outside the default camera", task_id)
        initial_bbox = None

    episode = Episode(
        episode_id=episode_id or f"{task_id}-{anomaly_kind}-{seed}",
        task_id=task_id,
        anomaly_kind=anomaly_kind,
        t_anomaly=t_anomaly,
        frames=frames,
        initial_bbox=initial_bbox,
    )
    _LOGGER.debug(
        "Generated %s (%d frames, t_anomaly=%s)", episode.episode_id, length, t_anomaly
    )
    return episode
