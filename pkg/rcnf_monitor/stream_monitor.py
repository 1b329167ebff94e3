"""Stream monitor - persistent consumer of a live frame stream.

Frames arrive from an async source (a JSON-lines file, stdin, or any async
iterator of frame records). Each frame is scored on a worker thread so the
event loop stays responsive, but frames are processed one at a time, so
verdicts reach the sink in frame order.

A frame that cannot be parsed becomes a frame_rejected verdict; an
unexpected scoring failure is logged and the loop moves on to the next
frame.
"""
from __future__ import annotations

import asyncio
import inspect
import json
import logging
import sys
from typing import IO, AsyncIterator, Awaitable, Callable, Iterable, Iterator

from .monitor import FrameMonitor, Verdict

_LOGGER = logging.getLogger(__name__)

VerdictSink = Callable[[Verdict], "Awaitable[None] | None"]


class RCNFStreamMonitor:
    """Feeds an async frame source through a FrameMonitor."""

    def __init__(self, frame_monitor: FrameMonitor, source: AsyncIterator, sink: VerdictSink) -> None:
        self._monitor = frame_monitor
        self._source = source
        self._sink = sink
        self._running = False
        self._task: asyncio.Task | None = None

    @property
    def state_store(self):
        return self._monitor.store

    async def async_start(self) -> None:
        self._running = True
        self._monitor.store.running = True
        self._task = asyncio.create_task(self._run())
        _LOGGER.info(
            "Stream monitor started for %s (window %d, upper %.4f)",
            self._monitor.profile.task_id, self._monitor.store.window, self._monitor.profile.upper,
        )

    async def async_stop(self) -> None:
        self._running = False
        if self._task:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass
        self._monitor.store.running = False
        _LOGGER.info("Stream monitor stopped")

    async def async_wait(self) -> None:
        """Block until the source is exhausted."""
        if self._task:
            await self._task
        self._monitor.store.running = False

    async def _emit(self, verdict: Verdict) -> None:
        result = self._sink(verdict)
        if inspect.isawaitable(result):
            await result

    async def _run(self) -> None:
        async for frame in self._source:
            if not self._running:
                break
            try:
                verdict = await asyncio.to_thread(self._monitor.process, frame)
            except asyncio.CancelledError:
                raise
            except Exception as err:
                _LOGGER.error("Stream monitor error on frame: %s", err, exc_info=True)
                continue
            if verdict is not None:
                await self._emit(verdict)
        _LOGGER.info("Frame source exhausted after %d frames", self._monitor.store.next_frame_index)


# ── Frame sources ───────────────────────────────────────────────────────

def iter_frame_records(handle: IO[str]) -> Iterator:
    """JSON objects, one per line; unparseable lines pass through as text."""
    for line in handle:
        line = line.strip()
        if not line:
            continue
        try:
            yield json.loads(line)
        except json.JSONDecodeError:
            yield line


async def async_frame_source(records: Iterable) -> AsyncIterator:
    """Pull records from a blocking iterable on a worker thread."""
    iterator = iter(records)
    sentinel = object()
    while True:
        record = await asyncio.to_thread(next, iterator, sentinel)
        if record is sentinel:
            return
        yield record


def stdin_source() -> AsyncIterator:
    return async_frame_source(iter_frame_records(sys.stdin))
