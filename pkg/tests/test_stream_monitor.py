"""Tests for RCNFStreamMonitor and the frame sources."""
import asyncio
import io
import json
from unittest.mock import AsyncMock, MagicMock, patch

import numpy as np
import pytest

from rcnf_monitor.const import EVENT_FRAME_REJECTED
from rcnf_monitor.monitor import FrameMonitor, ThresholdProfile
from rcnf_monitor.stream_monitor import RCNFStreamMonitor, async_frame_source, iter_frame_records

IDENTITY_POSE = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]


def _records(count, seed=0):
    rng = np.random.default_rng(seed)
    return [
        {
            "joints": rng.normal(0.0, 1.0, 2).tolist(),
            "gripper": 0.5,
            "pose": IDENTITY_POSE,
            "points": rng.normal(0.5, 0.1, (2, 2)).tolist(),
        }
        for _ in range(count)
    ]


@pytest.fixture
def frame_monitor(tiny_model):
    profile = ThresholdProfile.build("task_00", 10.0, [float(i) for i in range(1, 10)], 0.1)
    return FrameMonitor(tiny_model, profile)


class TestIterFrameRecords:

    def test_parses_json_lines(self):
        handle = io.StringIO('{"a": 1}\n\n{"b": 2}\n')
        assert list(iter_frame_records(handle)) == [{"a": 1}, {"b": 2}]

    def test_bad_line_passes_through(self):
        handle = io.StringIO('{"a": 1}\nnot json\n')
        assert list(iter_frame_records(handle)) == [{"a": 1}, "not json"]


class TestAsyncFrameSource:

    async def test_yields_all_records(self):
        records = [record async for record in async_frame_source([1, 2, 3])]
        assert records == [1, 2, 3]

    async def test_empty(self):
        assert [record async for record in async_frame_source([])] == []


class TestRCNFStreamMonitor:

    async def test_verdicts_in_frame_order(self, frame_monitor):
        sink = AsyncMock()
        monitor = RCNFStreamMonitor(frame_monitor, async_frame_source(_records(7)), sink)
        await monitor.async_start()
        assert monitor.state_store.running is True
        await monitor.async_wait()
        assert [call.args[0].frame_index for call in sink.await_args_list] == [3, 4, 5, 6]
        assert monitor.state_store.running is False

    async def test_sync_sink(self, frame_monitor):
        sink = MagicMock(return_value=None)
        monitor = RCNFStreamMonitor(frame_monitor, async_frame_source(_records(5)), sink)
        await monitor.async_start()
        await monitor.async_wait()
        assert sink.call_count == 2

    async def test_malformed_line_becomes_rejection(self, frame_monitor):
        lines = [json.dumps(record) for record in _records(4)]
        lines.insert(2, "not json")
        source = async_frame_source(iter_frame_records(io.StringIO("\n".join(lines))))
        sink = AsyncMock()
        monitor = RCNFStreamMonitor(frame_monitor, source, sink)
        await monitor.async_start()
        await monitor.async_wait()
        verdicts = [call.args[0] for call in sink.await_args_list]
        assert verdicts[0].event == EVENT_FRAME_REJECTED
        assert verdicts[0].frame_index == 2
        assert verdicts[1].frame_index == 4
        assert monitor.state_store.frames_rejected == 1

    async def test_scoring_error_is_skipped(self, frame_monitor):
        sink = AsyncMock()
        original = frame_monitor.process
        calls = []

        def flaky(frame):
            calls.append(frame)
            if len(calls) == 4:
                raise RuntimeError("boom")
            return original(frame)

        with patch.object(frame_monitor, "process", side_effect=flaky):
            monitor = RCNFStreamMonitor(frame_monitor, async_frame_source(_records(6)), sink)
            await monitor.async_start()
            await monitor.async_wait()
        assert len(calls) == 6
        assert sink.await_count == 2

    async def test_stop_cancels_pending_source(self, frame_monitor):
        gate = asyncio.Event()

        async def endless():
            for record in _records(2):
                yield record
            await gate.wait()

        monitor = RCNFStreamMonitor(frame_monitor, endless(), AsyncMock())
        await monitor.async_start()
        for _ in range(200):
            if monitor.state_store.next_frame_index == 2:
                break
            await asyncio.sleep(0.01)
        await monitor.async_stop()
        assert monitor.state_store.running is False
        assert monitor.state_store.next_frame_index == 2
