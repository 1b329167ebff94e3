"""Conformal thresholds, verdicts and intervention events.

A task's profile holds the mean calibration score mu_T (first half of the
calibration windows) and the score deviations of the second half. The
threshold is

    upper = mu_T + the ⌈(1 − alpha)(n₂ + 1)⌉-th smallest deviation

and a window is anomalous iff its score is strictly above it.

Event automaton (persist_k ≥ 2, exit margin h ≥ 0):
    normal    → anomalous           rollback_requested
    anomalous for persist_k frames  replan_requested (once per alarm)
    alarm and score ≤ upper − h     resume
    malformed frame                 frame_rejected (buffer and alarm kept)
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .artifacts import read_json, write_json
from .const import (
    DEFAULT_ALPHA,
    DEFAULT_HYSTERESIS,
    DEFAULT_PERSIST_K,
    EVENT_FRAME_REJECTED,
    EVENT_NONE,
    EVENT_REPLAN_REQUESTED,
    EVENT_RESUME,
    EVENT_ROLLBACK_REQUESTED,
    STATE_ANOMALOUS,
    STATE_NORMAL,
)
from .dataset import Window, frame_from_dict, stack_windows
from .exceptions import (
    ConfigError,
    InsufficientCalibrationDataError,
    MixedLabelsError,
    RCNFValidationError,
    ShapeMismatchError,
)
from .flow import RCNFlow, anomaly_score, score_batch
from .scene_sim import EpisodeFrame, PointFrame, RobotStateFrame
from .seeding import derive_seed
from .state_store import AlarmState, MonitorStateStore

_LOGGER = logging.getLogger(__name__)

# guards ceil() against (1 - alpha)(n + 1) landing a hair above an integer
_CEIL_SLACK = 1e-9


def min_deviations(alpha: float) -> int:
    return math.ceil(1.0 / alpha - _CEIL_SLACK) - 1


def conformal_quantile(deviations: Sequence[float], alpha: float) -> float:
    """The ⌈(1 − alpha)(n + 1)⌉-th order statistic of ``deviations``."""
    values = np.sort(np.asarray(deviations, dtype=np.float64))
    n = len(values)
    k = math.ceil((1.0 - alpha) * (n + 1) - _CEIL_SLACK)
    if n == 0 or k > n:
        raise InsufficientCalibrationDataError(
            f"{n} deviations cannot support alpha={alpha} (need >= {min_deviations(alpha)})"
        )
    return float(values[max(k, 1) - 1])


@dataclass(frozen=True, eq=False)
class ThresholdProfile:
    task_id: str
    mu_T: float
    deviations: tuple[float, ...]
    alpha: float
    upper: float

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise RCNFValidationError(f"alpha must be in (0, 1), got {self.alpha}")
        object.__setattr__(self, "deviations", tuple(float(d) for d in self.deviations))
        if len(self.deviations) < min_deviations(self.alpha):
            raise InsufficientCalibrationDataError(
                f"profile {self.task_id!r} has {len(self.deviations)} deviations, "
                f"alpha={self.alpha} needs {min_deviations(self.alpha)}"
            )

    @classmethod
    def build(cls, task_id: str, mu_T: float, deviations: Sequence[float], alpha: float) -> "ThresholdProfile":
        upper = float(mu_T) + conformal_quantile(deviations, alpha)
        return cls(task_id, float(mu_T), tuple(deviations), float(alpha), upper)

    def recompute_upper(self) -> float:
        return self.mu_T + conformal_quantile(self.deviations, self.alpha)

    def with_alpha(self, alpha: float) -> "ThresholdProfile":
        return ThresholdProfile.build(self.task_id, self.mu_T, self.deviations, alpha)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "mu_T": self.mu_T,
            "deviations": list(self.deviations),
            "alpha": self.alpha,
            "upper": self.upper,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ThresholdProfile":
        try:
            profile = cls(
                data["task_id"], float(data["mu_T"]), tuple(data["deviations"]),
                float(data["alpha"]), float(data["upper"]),
            )
        except (KeyError, TypeError, ValueError) as err:
            raise RCNFValidationError(f"Malformed threshold profile: {err!r}") from err
        if abs(profile.recompute_upper() - profile.upper) > 1e-12 * max(1.0, abs(profile.upper)):
            raise RCNFValidationError(
                f"profile {profile.task_id!r}: stored upper does not match its deviations"
            )
        return profile


@dataclass(frozen=True)
class EscalationPolicy:
    persist_k: int = DEFAULT_PERSIST_K
    hysteresis: float = DEFAULT_HYSTERESIS

    def __post_init__(self) -> None:
        if self.persist_k < 2:
            raise ConfigError(f"persist_k must be >= 2, got {self.persist_k}")
        if self.hysteresis < 0:
            raise ConfigError(f"hysteresis must be >= 0, got {self.hysteresis}")


@dataclass(frozen=True)
class Verdict:
    frame_index: int
    score: float | None
    upper: float
    state: str
    event: str
    alarm: AlarmState
    latency_ms: float | None = None

    @property
    def anomalous(self) -> bool:
        return self.state == STATE_ANOMALOUS

    def to_dict(self) -> dict:
        return {
            "frame": self.frame_index,
            "score": self.score,
            "upper": self.upper,
            "state": self.state,
            "event": self.event,
            "latency_ms": self.latency_ms,
        }


# ─────────────────────────────────────────────
# Calibration
# ─────────────────────────────────────────────

def calibrate_scores(scores: Sequence[float], task_id: str, alpha: float, split_seed: int) -> ThresholdProfile:
    """Seeded 50/50 split: mu_T from the first half, deviations from the second."""
    scores = np.asarray(scores, dtype=np.float64)
    needed = 2 * math.ceil(1.0 / alpha - _CEIL_SLACK)
    if len(scores) < needed:
        raise InsufficientCalibrationDataError(
            f"task {task_id!r}: {len(scores)} calibration windows, alpha={alpha} needs {needed}"
        )
    order = np.random.default_rng(split_seed).permutation(len(scores))
    half = len(scores) // 2
    mu_T = float(scores[order[:half]].mean())
    deviations = scores[order[half:]] - mu_T
    return ThresholdProfile.build(task_id, mu_T, deviations.tolist(), alpha)


def calibrate(
    model: RCNFlow,
    nominal_windows: Sequence[Window],
    task_id: str,
    alpha: float = DEFAULT_ALPHA,
    split_seed: int = 0,
) -> ThresholdProfile:
    if any(window.is_anomalous for window in nominal_windows):
        raise MixedLabelsError("calibration windows must all be labeled normal")
    windows = [window for window in nominal_windows if window.task_id == task_id]
    if not windows:
        raise InsufficientCalibrationDataError(f"no calibration windows for task {task_id!r}")
    model.eval()
    x, s, task_ids = stack_windows(windows)
    profile = calibrate_scores(score_batch(model, x, s, task_ids), task_id, alpha, split_seed)
    _LOGGER.info(
        "Calibrated %s on %d windows: mu_T=%.4f upper=%.4f (alpha=%g)",
        task_id, len(windows), profile.mu_T, profile.upper, alpha,
    )
    return profile


def calibrate_all(
    model: RCNFlow, nominal_windows: Sequence[Window], alpha: float, seed: int
) -> dict[str, ThresholdProfile]:
    task_ids = sorted({window.task_id for window in nominal_windows})
    return {
        task_id: calibrate(model, nominal_windows, task_id, alpha, derive_seed(seed, "calibrate", task_id))
        for task_id in task_ids
    }


def save_profiles(profiles: dict[str, ThresholdProfile], path, *, force: bool = True, extra: dict | None = None) -> Path:
    document = {"profiles": [profiles[task_id].to_dict() for task_id in sorted(profiles)]}
    if extra:
        document.update(extra)
    return write_json(path, document, force=force)


def load_profiles(path) -> dict[str, ThresholdProfile]:
    document = read_json(path)
    profiles = [ThresholdProfile.from_dict(item) for item in document.get("profiles", [])]
    return {profile.task_id: profile for profile in profiles}


# ─────────────────────────────────────────────
# Judging
# ─────────────────────────────────────────────

def judge(
    profile: ThresholdProfile,
    score: float,
    frame_index: int,
    recent: AlarmState | None = None,
    policy: EscalationPolicy | None = None,
) -> Verdict:
    """Pure: the verdict for one score given the previous alarm state."""
    policy = policy or EscalationPolicy()
    recent = recent or AlarmState()
    anomalous = score > profile.upper
    state = STATE_ANOMALOUS if anomalous else STATE_NORMAL
    event = EVENT_NONE
    if not recent.active:
        alarm = recent
        if anomalous:
            alarm = AlarmState(active=True, consecutive=1, escalated=False)
            event = EVENT_ROLLBACK_REQUESTED
    elif score <= profile.upper - policy.hysteresis:
        alarm = AlarmState()
        event = EVENT_RESUME
    else:
        consecutive = recent.consecutive + (1 if anomalous else 0)
        alarm = replace(recent, consecutive=consecutive)
        if consecutive >= policy.persist_k and not recent.escalated:
            alarm = replace(alarm, escalated=True)
            event = EVENT_REPLAN_REQUESTED
    return Verdict(frame_index, float(score), profile.upper, state, event, alarm)


class FrameMonitor:
    """Synchronous per-frame core: buffer, score, judge."""

    def __init__(
        self,
        model: RCNFlow,
        profile: ThresholdProfile,
        policy: EscalationPolicy | None = None,
        state_store: MonitorStateStore | None = None,
    ) -> None:
        if profile.task_id not in model.codebook:
            raise RCNFValidationError(f"profile task {profile.task_id!r} is not in the model's codebook")
        self.model = model
        self.profile = profile
        self.policy = policy or EscalationPolicy()
        self.store = state_store or MonitorStateStore(model.config.T)
        model.eval()

    def _parse(self, frame) -> EpisodeFrame:
        if isinstance(frame, tuple):
            if len(frame) != 2 or not (
                isinstance(frame[0], RobotStateFrame) and isinstance(frame[1], PointFrame)
            ):
                raise RCNFValidationError("tuple frames must be (RobotStateFrame, PointFrame)")
            robot, points = frame
            frame = EpisodeFrame(robot=robot, points=points, label=STATE_NORMAL)
        elif isinstance(frame, dict):
            frame = frame_from_dict(frame)
        elif not isinstance(frame, EpisodeFrame):
            raise RCNFValidationError(f"unsupported frame payload {type(frame).__name__}")
        if not (isinstance(frame.robot, RobotStateFrame) and isinstance(frame.points, PointFrame)):
            raise RCNFValidationError("frame must carry a RobotStateFrame and a PointFrame")
        cfg = self.model.config
        if frame.points.points.shape != (cfg.N, 2):
            raise ShapeMismatchError(f"expected {cfg.N} points, got {frame.points.points.shape[0]}")
        if frame.robot.joints.shape != (cfg.joints,):
            raise ShapeMismatchError(f"expected {cfg.joints} joints, got {frame.robot.joints.shape[0]}")
        return frame

    def reject(self, frame_index: int, reason) -> Verdict:
        _LOGGER.warning("Frame %d rejected: %s", frame_index, reason)
        self.store.record_rejection()
        return Verdict(
            frame_index, None, self.profile.upper, self.store.state,
            EVENT_FRAME_REJECTED, self.store.alarm,
        )

    def process(self, frame) -> Verdict | None:
        """Verdict for the window ending at ``frame``; None during warm-up."""
        frame_index = self.store.take_frame_index()
        try:
            parsed = self._parse(frame)
        except RCNFValidationError as err:
            return self.reject(frame_index, err)
        self.store.push_frame(parsed)
        if not self.store.is_warm:
            return None
        started = time.perf_counter()
        x, s = self.store.window_arrays()
        score = anomaly_score(self.model, x, s, self.profile.task_id)
        verdict = judge(self.profile, score, frame_index, self.store.alarm, self.policy)
        latency_ms = (time.perf_counter() - started) * 1000.0
        verdict = replace(verdict, latency_ms=latency_ms)
        self.store.record_verdict(verdict.score, verdict.state, verdict.event, verdict.alarm, latency_ms)
        if verdict.event != EVENT_NONE:
            _LOGGER.info("Frame %d: %s (score %.4f, upper %.4f)", frame_index, verdict.event, score, self.profile.upper)
        else:
            _LOGGER.debug("Frame %d: score %.4f %s", frame_index, score, verdict.state)
        return verdict


def run_monitor(
    model: RCNFlow,
    profile: ThresholdProfile,
    frame_stream: Iterable,
    policy: EscalationPolicy | None = None,
) -> Iterator[Verdict]:
    monitor = FrameMonitor(model, profile, policy)
    for frame in frame_stream:
        verdict = monitor.process(frame)
        if verdict is not None:
            yield verdict


def summarize_latency(verdicts: Iterable[Verdict]) -> dict:
    latencies = np.array([v.latency_ms for v in verdicts if v.latency_ms is not None])
    if len(latencies) == 0:
        return {"count": 0, "mean_ms": None, "p50_ms": None, "p95_ms": None, "max_ms": None}
    return {
        "count": int(len(latencies)),
        "mean_ms": float(latencies.mean()),
        "p50_ms": float(np.percentile(latencies, 50)),
        "p95_ms": float(np.percentile(latencies, 95)),
        "max_ms": float(latencies.max()),
    }


class VerdictLog:
    """JSON-lines verdict log; line one is a header record."""

    def __init__(self, path: str | os.PathLike, header: dict) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = open(self.path, "w", encoding="utf-8")
        self._write({"header": header})

    def _write(self, record: dict) -> None:
        self._handle.write(json.dumps(record, sort_keys=True, allow_nan=False) + "\n")
        self._handle.flush()

    def write(self, verdict: Verdict) -> None:
        self._write(verdict.to_dict())

    def close(self) -> None:
        self._handle.close()

    def __enter__(self) -> "VerdictLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
