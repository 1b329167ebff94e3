"""Windowing, episode persistence and the balanced training sampler."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .artifacts import read_json, write_json
from .const import (
    ANOMALY_NONE,
    DATASET_FORMAT_VERSION,
    DEFAULT_SAMPLER_BINS,
    DEFAULT_STRIDE,
    LABEL_ANOMALOUS,
    LABEL_NORMAL,
)
from .exceptions import (
    EpisodeTooShortError,
    InvalidDimensionsError,
    RCNFValidationError,
    ShapeMismatchError,
)
from .scene_sim import Episode, EpisodeFrame, PointFrame, RobotStateFrame

_LOGGER = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True, eq=False)
class Window:
    x: np.ndarray       # (T, N, 2)
    s: np.ndarray       # (T, J + 8)
    task_id: str
    label: str
    source: tuple[str, int]

    @property
    def T(self) -> int:
        return int(self.x.shape[0])

    @property
    def N(self) -> int:
        return int(self.x.shape[1])

    @property
    def is_anomalous(self) -> bool:
        return self.label == LABEL_ANOMALOUS


@dataclass(frozen=True, eq=False)
class SampleWeights:
    weights: np.ndarray

    def __post_init__(self) -> None:
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(weights) == 0 or not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise RCNFValidationError("sample weights must be finite and non-negative")
        total = weights.sum()
        if total <= 0:
            raise RCNFValidationError("sample weights sum to zero")
        weights = weights / total
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)

    def __len__(self) -> int:
        return len(self.weights)

    @classmethod
    def uniform(cls, n: int) -> "SampleWeights":
        return cls(np.full(n, 1.0 / n))


# ─────────────────────────────────────────────
# Windowing
# ─────────────────────────────────────────────

def windows_from_episode(episode: Episode, T: int, stride: int = DEFAULT_STRIDE) -> list[Window]:
    """Sliding windows; a window is anomalous iff it reaches t_anomaly."""
    if T < 1 or stride < 1:
        raise InvalidDimensionsError(f"T and stride must be >= 1, got T={T}, stride={stride}")
    length = len(episode)
    if length < T:
        raise EpisodeTooShortError(f"episode {episode.episode_id} has {length} frames < T={T}")
    points = np.stack([frame.points.points for frame in episode.frames])
    states = np.stack([frame.robot.as_vector() for frame in episode.frames])
    windows = []
    for start in range(0, length - T + 1, stride):
        end = start + T
        anomalous = episode.t_anomaly is not None and end - 1 >= episode.t_anomaly
        windows.append(
            Window(
                x=points[start:end].copy(),
                s=states[start:end].copy(),
                task_id=episode.task_id,
                label=LABEL_ANOMALOUS if anomalous else LABEL_NORMAL,
                source=(episode.episode_id, start),
            )
        )
    return windows


def stack_windows(windows: Sequence[Window]) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """(B, T, N, 2), (B, T, S) and the task ids of ``windows``."""
    if not windows:
        raise RCNFValidationError("no windows to stack")
    shapes = {(w.x.shape, w.s.shape) for w in windows}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"windows have inconsistent shapes: {sorted(shapes)}")
    return (
        np.stack([w.x for w in windows]),
        np.stack([w.s for w in windows]),
        [w.task_id for w in windows],
    )


def split_by_episode(
    windows: Sequence[Window], fraction: float, seed: int
) -> tuple[list[Window], list[Window]]:
    """Hold out whole episodes so no episode straddles the split."""
    episode_ids = sorted({w.source[0] for w in windows})
    if fraction <= 0 or len(episode_ids) < 2:
        return list(windows), []
    rng = np.random.default_rng(seed)
    count = min(len(episode_ids) - 1, max(1, int(round(fraction * len(episode_ids)))))
    held = set(rng.choice(episode_ids, size=count, replace=False).tolist())
    train = [w for w in windows if w.source[0] not in held]
    held_out = [w for w in windows if w.source[0] in held]
    return train, held_out


# ─────────────────────────────────────────────
# Debiasing sampler
# ─────────────────────────────────────────────

def compute_balanced_weights(per_window_scores, bins: int = DEFAULT_SAMPLER_BINS) -> SampleWeights:
    """Equal-width score bins over [min, max]; each occupied bin gets mass 1/occupied.

    Window i in bin b gets 1/(bins·|b|) before normalization.
    """
    scores = np.asarray(per_window_scores, dtype=np.float64).reshape(-1)
    if len(scores) == 0:
        raise RCNFValidationError("need at least one score")
    if bins < 1:
        raise InvalidDimensionsError(f"bins must be >= 1, got {bins}")
    if not np.all(np.isfinite(scores)):
        raise RCNFValidationError("scores must be finite")
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        return SampleWeights.uniform(len(scores))
    edges = np.linspace(lo, hi, bins + 1)
    # np.digitize against interior edges; the maximum falls into the last bin
    assignment = np.clip(np.digitize(scores, edges[1:-1], right=False), 0, bins - 1)
    counts = np.bincount(assignment, minlength=bins)
    raw = 1.0 / (bins * counts[assignment])
    _LOGGER.debug("Balanced weights over %d windows, bin counts %s", len(scores), counts.tolist())
    return SampleWeights(raw)


def weighted_sample(weights: SampleWeights, count: int, seed: int) -> list[int]:
    if count < 1:
        raise InvalidDimensionsError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    return rng.choice(len(weights), size=count, replace=True, p=weights.weights).tolist()


# ─────────────────────────────────────────────
# Robot-state normalization
# ─────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class RobotStateNormalizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape:
            raise ShapeMismatchError("mean and std must have equal length")
        if np.any(std <= 0):
            raise RCNFValidationError("normalizer std must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def fit(cls, states) -> "RobotStateNormalizer":
        """Per-dimension statistics over every frame of (B, T, S) states."""
        flat = np.asarray(states, dtype=np.float64)
        flat = flat.reshape(-1, flat.shape[-1])
        std = flat.std(axis=0)
        # constant dims (e.g. quaternion x/y) pass through centered
        std = np.where(std < 1e-8, 1.0, std)
        return cls(flat.mean(axis=0), std)

    @classmethod
    def identity(cls, dim: int) -> "RobotStateNormalizer":
        return cls(np.zeros(dim), np.ones(dim))

    @property
    def dim(self) -> int:
        return len(self.mean)

    def apply(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        if states.shape[-1] != self.dim:
            raise ShapeMismatchError(f"state width {states.shape[-1]} != {self.dim}")
        return (states - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "RobotStateNormalizer":
        return cls(np.asarray(data["mean"]), np.asarray(data["std"]))


# ─────────────────────────────────────────────
# Persistence
# ─────────────────────────────────────────────

def frame_to_dict(frame: EpisodeFrame) -> dict:
    record = {
        "joints": frame.robot.joints.tolist(),
        "gripper": frame.robot.gripper,
        "pose": frame.robot.pose.tolist(),
        "points": frame.points.points.tolist(),
        "label": frame.label,
    }
    if frame.object_center is not None:
        record["object_center"] = list(frame.object_center)
    return record


def frame_from_dict(data: dict) -> EpisodeFrame:
    """Also used for streamed frames, where ``label`` may be absent."""
    try:
        robot = RobotStateFrame(
            np.asarray(data["joints"], dtype=np.float64),
            float(data["gripper"]),
            np.asarray(data["pose"], dtype=np.float64),
        )
        points = PointFrame(np.asarray(data["points"], dtype=np.float64))
    except (KeyError, TypeError, ValueError) as err:
        if isinstance(err, RCNFValidationError):
            raise
        raise RCNFValidationError(f"Malformed frame record: {err!r}") from err
    center = data.get("object_center")
    return EpisodeFrame(
        robot=robot,
        points=points,
        label=data.get("label", LABEL_NORMAL),
        object_center=tuple(center) if center is not None else None,
    )


def episode_to_dict(episode: Episode) -> dict:
    return {
        "episode_id": episode.episode_id,
        "task_id": episode.task_id,
        "anomaly_kind": episode.anomaly_kind,
        "t_anomaly": episode.t_anomaly,
        "initial_bbox": list(episode.initial_bbox) if episode.initial_bbox else None,
        "frames": [frame_to_dict(frame) for frame in episode.frames],
    }


def episode_from_dict(data: dict) -> Episode:
    try:
        bbox = data.get("initial_bbox")
        return Episode(
            episode_id=data["episode_id"],
            task_id=data["task_id"],
            anomaly_kind=data["anomaly_kind"],
            t_anomaly=data["t_anomaly"],
            frames=[frame_from_dict(frame) for frame in data["frames"]],
            initial_bbox=tuple(bbox) if bbox else None,
        )
    except (KeyError, TypeError) as err:
        raise RCNFValidationError(f"Malformed episode document: {err!r}") from err


def save_episode(episode: Episode, path: str | os.PathLike, *, force: bool = True) -> Path:
    return write_json(path, episode_to_dict(episode), force=force)


def load_episode(path: str | os.PathLike) -> Episode:
    return episode_from_dict(read_json(path))


def write_manifest(
    out_dir: str | os.PathLike,
    *,
    T: int,
    N: int,
    J: int,
    task_ids: Sequence[str],
    episodes: Iterable[dict],
    normalizer: RobotStateNormalizer | None = None,
    extra: dict | None = None,
    force: bool = True,
) -> Path:
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "T": T,
        "N": N,
        "J": J,
        "tasks": list(task_ids),
        "episodes": list(episodes),
        "norm_stats": normalizer.to_dict() if normalizer is not None else None,
    }
    if extra:
        manifest.update(extra)
    return write_json(Path(out_dir) / MANIFEST_NAME, manifest, force=force)


def read_manifest(data_dir: str | os.PathLike) -> dict:
    path = Path(data_dir) / MANIFEST_NAME
    if not path.exists():
        raise RCNFValidationError(f"No dataset manifest at {path}")
    manifest = read_json(path)
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise RCNFValidationError(
            f"Unsupported dataset format {manifest.get('format_version')!r}"
        )
    return manifest


def load_episodes(
    data_dir: str | os.PathLike, *, anomaly_kinds: Sequence[str] | None = None
) -> list[Episode]:
    """Episodes listed in the manifest, optionally filtered by kind."""
    manifest = read_manifest(data_dir)
    episodes = []
    for entry in manifest["episodes"]:
        if anomaly_kinds is not None and entry["anomaly_kind"] not in anomaly_kinds:
            continue
        episodes.append(load_episode(Path(data_dir) / entry["file"]))
    _LOGGER.info("Loaded %d episodes from %s", len(episodes), data_dir)
    return episodes


def nominal_windows(episodes: Iterable[Episode], T: int, stride: int = DEFAULT_STRIDE) -> list[Window]:
    windows = []
    for episode in episodes:
        if episode.anomaly_kind == ANOMALY_NONE:
            windows.extend(windows_from_episode(episode, T, stride))
    return windows
