"""Threshold-free evaluation and benchmark aggregation.

Frames are the evaluation unit: frame t of an episode carries the score of
the window ending at t, so the first T - 1 frames of every episode are never
scored. For each anomaly kind the positives are the post-anomaly frames of
that kind's episodes; the negatives are their pre-anomaly frames plus every
frame of the nominal episodes.
"""
from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn import metrics

from .artifacts import write_csv, write_json
from .const import ANOMALY_KINDS, ANOMALY_NONE
from .dataset import stack_windows, windows_from_episode
from .exceptions import NoPositivesError, SingleClassError
from .flow import RCNFlow, score_batch
from .monitor import ThresholdProfile
from .scene_sim import Episode

_LOGGER = logging.getLogger(__name__)

CURVE_HEADER = ("frame", "score", "upper", "label")


@dataclass(frozen=True)
class ScoredFrame:
    score: float
    label: int
    episode_id: str = ""
    frame: int = 0
    task_id: str = ""
    anomaly_kind: str = ANOMALY_NONE


def _arrays(scored: Iterable[ScoredFrame]) -> tuple[np.ndarray, np.ndarray]:
    scored = list(scored)
    scores = np.array([item.score for item in scored], dtype=np.float64)
    labels = np.array([item.label for item in scored], dtype=int)
    return scores, labels


def auc_scores(scores, labels) -> float:
    """Mann-Whitney AUC; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    positives = int(labels.sum())
    if positives == 0 or positives == len(labels):
        raise SingleClassError(f"AUC needs both classes, got {positives} positives of {len(labels)}")
    return float(metrics.roc_auc_score(labels, scores))


def auc(scored: Iterable[ScoredFrame]) -> float:
    return auc_scores(*_arrays(scored))


def average_precision_scores(scores, labels) -> float:
    """Step-wise AP over descending scores, ties in stable input order."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    positives = int(labels.sum())
    if positives == 0:
        raise NoPositivesError("average precision needs at least one positive")
    if len(np.unique(scores)) < len(scores):
        _LOGGER.warning("Tied scores in AP: ties ranked in input order")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    precision_at_rank = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(np.sum(precision_at_rank * hits) / positives)


def average_precision(scored: Iterable[ScoredFrame]) -> float:
    return average_precision_scores(*_arrays(scored))


@dataclass
class BenchReport:
    per_kind: dict[str, dict] = field(default_factory=dict)
    macro_auc: float | None = None
    macro_ap: float | None = None
    per_task: dict[str, dict[str, dict]] = field(default_factory=dict)
    missing_kinds: list[str] = field(default_factory=list)
    detection: dict[str, dict] = field(default_factory=dict)
    nominal_false_alarm_rate: float | None = None
    frames_scored: int = 0
    curves: dict[str, list[tuple]] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        document = asdict(self)
        document.pop("curves")
        return document


def _kind_metrics(scored: Sequence[ScoredFrame]) -> dict | None:
    scores, labels = _arrays(scored)
    positives = int(labels.sum())
    if positives == 0 or positives == len(labels):
        return None
    return {
        "auc": auc_scores(scores, labels),
        "ap": average_precision_scores(scores, labels),
        "positives": positives,
        "negatives": int(len(labels) - positives),
    }


def score_episode(model: RCNFlow, episode: Episode) -> list[ScoredFrame]:
    windows = windows_from_episode(episode, model.config.T, 1)
    x, s, task_ids = stack_windows(windows)
    scores = score_batch(model, x, s, task_ids)
    return [
        ScoredFrame(
            score=float(score),
            label=int(window.is_anomalous),
            episode_id=episode.episode_id,
            frame=window.source[1] + model.config.T - 1,
            task_id=episode.task_id,
            anomaly_kind=episode.anomaly_kind,
        )
        for window, score in zip(windows, scores)
    ]


def evaluate_benchmark(
    model: RCNFlow,
    profiles: Mapping[str, ThresholdProfile],
    episodes: Sequence[Episode],
) -> BenchReport:
    model.eval()
    report = BenchReport()
    by_episode: dict[str, list[ScoredFrame]] = {}
    for episode in episodes:
        by_episode[episode.episode_id] = scored = score_episode(model, episode)
        profile = profiles.get(episode.task_id)
        upper = profile.upper if profile is not None else None
        report.curves[episode.episode_id] = [
            (item.frame, item.score, upper, item.label) for item in scored
        ]
    report.frames_scored = sum(len(items) for items in by_episode.values())

    nominal = [item for ep in episodes if ep.anomaly_kind == ANOMALY_NONE for item in by_episode[ep.episode_id]]
    task_ids = sorted({ep.task_id for ep in episodes})

    for kind in ANOMALY_KINDS:
        kind_episodes = [ep for ep in episodes if ep.anomaly_kind == kind]
        pooled = nominal + [item for ep in kind_episodes for item in by_episode[ep.episode_id]]
        result = _kind_metrics(pooled) if kind_episodes else None
        if result is None:
            report.missing_kinds.append(kind)
            _LOGGER.warning("Benchmark has no usable %s episodes", kind)
            continue
        report.per_kind[kind] = result
        for task_id in task_ids:
            task_result = _kind_metrics([item for item in pooled if item.task_id == task_id])
            report.per_task.setdefault(task_id, {})[kind] = task_result
        report.detection[kind] = _detection_stats(kind_episodes, by_episode, profiles)

    if report.per_kind:
        report.macro_auc = float(np.mean([r["auc"] for r in report.per_kind.values()]))
        report.macro_ap = float(np.mean([r["ap"] for r in report.per_kind.values()]))
    if nominal and profiles:
        alarms = [item.score > profiles[item.task_id].upper for item in nominal if item.task_id in profiles]
        report.nominal_false_alarm_rate = float(np.mean(alarms)) if alarms else None

    _LOGGER.info(
        "Benchmark over %d episodes: macro AUC %s, macro AP %s",
        len(episodes),
        "n/a" if report.macro_auc is None else f"{report.macro_auc:.4f}",
        "n/a" if report.macro_ap is None else f"{report.macro_ap:.4f}",
    )
    return report


def _detection_stats(
    episodes: Sequence[Episode],
    by_episode: Mapping[str, list[ScoredFrame]],
    profiles: Mapping[str, ThresholdProfile],
) -> dict:
    """Frames from t_anomaly to the first score above the task threshold."""
    delays = []
    for episode in episodes:
        profile = profiles.get(episode.task_id)
        if profile is None or episode.t_anomaly is None:
            continue
        hits = [
            item.frame - episode.t_anomaly
            for item in by_episode[episode.episode_id]
            if item.frame >= episode.t_anomaly and item.score > profile.upper
        ]
        delays.append(hits[0] if hits else None)
    detected = [d for d in delays if d is not None]
    return {
        "episodes": len(delays),
        "detected_fraction": len(detected) / len(delays) if delays else None,
        "mean_delay_frames": float(np.mean(detected)) if detected else None,
        "max_delay_frames": int(max(detected)) if detected else None,
    }


def write_score_curves(report: BenchReport, out_dir: str | os.PathLike) -> list[Path]:
    """One CSV per episode: frame, score, upper, label."""
    out_dir = Path(out_dir)
    return [
        write_csv(out_dir / f"{episode_id}.csv", CURVE_HEADER, rows)
        for episode_id, rows in sorted(report.curves.items())
    ]


def save_bench_report(report: BenchReport, path, *, force: bool = True, extra: dict | None = None) -> Path:
    document = report.to_dict()
    if extra:
        document.update(extra)
    return write_json(path, document, force=force)
