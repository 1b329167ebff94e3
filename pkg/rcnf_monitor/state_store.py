"""Internal state store - everything the live monitor knows about the stream."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .const import (
    EVENT_FRAME_REJECTED,
    EVENT_NONE,
    EVENT_REPLAN_REQUESTED,
    EVENT_RESUME,
    EVENT_ROLLBACK_REQUESTED,
    STATE_ANOMALOUS,
    STATE_NORMAL,
)
from .scene_sim import EpisodeFrame


@dataclass(frozen=True)
class AlarmState:
    """Escalation automaton state carried from one verdict to the next."""

    active: bool = False
    consecutive: int = 0
    escalated: bool = False


class MonitorStateStore:
    def __init__(self, window: int):
        self.window = window
        self.frames: deque[EpisodeFrame] = deque(maxlen=window)
        self.next_frame_index: int = 0

        # Verdict state
        self.alarm: AlarmState = AlarmState()
        self.state: str = STATE_NORMAL
        self.last_score: float | None = None
        self.last_event: str = EVENT_NONE
        self.last_latency_ms: float | None = None

        # Counters
        self.frames_scored: int = 0
        self.frames_rejected: int = 0
        self.event_counts: dict[str, int] = {
            EVENT_ROLLBACK_REQUESTED: 0,
            EVENT_REPLAN_REQUESTED: 0,
            EVENT_RESUME: 0,
            EVENT_FRAME_REJECTED: 0,
        }
        self.running: bool = False

    @property
    def is_warm(self) -> bool:
        return len(self.frames) == self.window

    def take_frame_index(self) -> int:
        index = self.next_frame_index
        self.next_frame_index += 1
        return index

    def push_frame(self, frame: EpisodeFrame) -> None:
        self.frames.append(frame)

    def window_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(T, N, 2) points and (T, S) robot states of the buffered frames."""
        return (
            np.stack([frame.points.points for frame in self.frames]),
            np.stack([frame.robot.as_vector() for frame in self.frames]),
        )

    def record_verdict(self, score: float, state: str, event: str, alarm: AlarmState, latency_ms: float) -> None:
        self.last_score = score
        self.state = state
        self.alarm = alarm
        self.last_latency_ms = latency_ms
        self.frames_scored += 1
        self._record_event(event)

    def record_rejection(self) -> None:
        self.frames_rejected += 1
        self._record_event(EVENT_FRAME_REJECTED)

    def _record_event(self, event: str) -> None:
        self.last_event = event
        if event in self.event_counts:
            self.event_counts[event] += 1

    @property
    def in_alarm(self) -> bool:
        return self.alarm.active

    def reset(self) -> None:
        self.frames.clear()
        self.next_frame_index = 0
        self.alarm = AlarmState()
        self.state = STATE_NORMAL
        self.last_score = None
        self.last_event = EVENT_NONE
        self.last_latency_ms = None
        self.frames_scored = 0
        self.frames_rejected = 0
        self.event_counts = {event: 0 for event in self.event_counts}

    def to_dict(self) -> dict:
        return {
            "window": self.window,
            "buffered_frames": len(self.frames),
            "next_frame_index": self.next_frame_index,
            "state": self.state,
            "anomalous": self.state == STATE_ANOMALOUS,
            "alarm_active": self.alarm.active,
            "alarm_consecutive": self.alarm.consecutive,
            "alarm_escalated": self.alarm.escalated,
            "last_score": self.last_score,
            "last_event": self.last_event,
            "last_latency_ms": self.last_latency_ms,
            "frames_scored": self.frames_scored,
            "frames_rejected": self.frames_rejected,
            "event_counts": dict(self.event_counts),
            "running": self.running,
        }
