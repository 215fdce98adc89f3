import logging

import numpy as np
import pytest

from tagstream.frames import AudioFrame
from tagstream.windowing import (
    FrameRing,
    WindowAssembler,
    WindowConfig,
    extract_samples,
)

from conftest import make_audio


def counting_frames(total, frame_samples=1024, rate=48000, start_value=0):
    """Frames carrying the signal 0,1,2,... with sample-accurate timestamps."""
    value = start_value
    for start in range(0, total, frame_samples):
        n = min(frame_samples, total - start)
        samples = np.arange(value, value + n, dtype=np.float32).reshape(1, n)
        ts = round(start * 10_000_000 / rate)
        yield AudioFrame.from_samples(ts, rate, samples)
        value += n


class TestFrameRing:
    def test_fifo_order(self):
        ring = FrameRing(capacity=4)
        a, b = make_audio(ts=1), make_audio(ts=2)
        ring.push(a)
        ring.push(b)
        assert ring.pop() is a
        assert ring.pop() is b
        assert ring.pop() is None

    def test_no_drops_at_capacity(self):
        ring = FrameRing(capacity=64)
        for i in range(64):
            ring.push(make_audio(ts=i))
        assert ring.dropped_frames == 0
        assert len(ring) == 64

    def test_overflow_evicts_oldest(self):
        ring = FrameRing(capacity=64)
        for i in range(65):
            ring.push(make_audio(ts=i))
        assert ring.dropped_frames == 1
        assert ring.pop().timestamp_100ns == 1


class TestExtractSamples:
    def test_mono_identity(self):
        frame = make_audio(channels=1, n=16, fill=0.5)
        out = extract_samples(frame)
        assert out.shape == (16,)
        assert np.all(out == np.float32(0.5))

    def test_two_channel_symmetry(self):
        samples = np.stack([np.full(8, 0.5), np.full(8, -0.5)]).astype(np.float32)
        frame = AudioFrame.from_samples(0, 48000, samples)
        assert np.all(extract_samples(frame) == 0.0)

    def test_matches_scalar_mean(self):
        rng = np.random.default_rng(5)
        samples = rng.uniform(-1, 1, size=(2, 200)).astype(np.float32)
        frame = AudioFrame.from_samples(0, 48000, samples)
        out = extract_samples(frame)
        expected = [(float(samples[0, i]) + float(samples[1, i])) / 2.0 for i in range(200)]
        assert np.allclose(out, expected, atol=1e-7)

    def test_unknown_policy(self):
        with pytest.raises(ValueError):
            extract_samples(make_audio(), policy="loudest")


class TestWindows:
    def test_47_frames_make_one_window(self):
        asm = WindowAssembler(WindowConfig(window_samples=48128))
        for frame in counting_frames(47 * 1024):
            asm.push_frame(frame)
        first = asm.try_take_window()
        assert first is not None
        assert len(first.samples) == 48128
        assert asm.try_take_window() is None

    def test_46_frames_not_ready(self):
        asm = WindowAssembler(WindowConfig(window_samples=48128))
        for frame in counting_frames(46 * 1024):
            asm.push_frame(frame)
        assert asm.try_take_window() is None

    def test_94_frames_make_two_disjoint_windows(self):
        asm = WindowAssembler(WindowConfig(window_samples=48128))
        for frame in counting_frames(94 * 1024):
            asm.push_frame(frame)
        windows = asm.take_ready_windows()
        assert len(windows) == 2
        assert np.array_equal(windows[0].samples, np.arange(0, 48128, dtype=np.float32))
        assert np.array_equal(windows[1].samples, np.arange(48128, 96256, dtype=np.float32))

    @pytest.mark.parametrize("window,hop,total", [(8, 8, 50), (8, 4, 50), (10, 3, 64)])
    def test_cadence_formula(self, window, hop, total):
        asm = WindowAssembler(WindowConfig(window_samples=window, hop_samples=hop))
        count = 0
        for frame in counting_frames(total, frame_samples=5):
            asm.push_frame(frame)
            count += len(asm.take_ready_windows())
        assert count == (total - window) // hop + 1

    def test_sample_conservation_tumbling(self):
        total = 12 * 1024
        asm = WindowAssembler(WindowConfig(window_samples=2048))
        collected = []
        for frame in counting_frames(total):
            asm.push_frame(frame)
            collected.extend(w.samples for w in asm.take_ready_windows())
        joined = np.concatenate(collected)
        assert np.array_equal(joined, np.arange(total, dtype=np.float32))
        assert asm.dropped_frames == 0

    def test_timestamps_strictly_increase(self):
        asm = WindowAssembler(WindowConfig(window_samples=2048))
        stamps = []
        for frame in counting_frames(16 * 1024):
            asm.push_frame(frame)
            stamps.extend(w.start_timestamp_100ns for w in asm.take_ready_windows())
        assert len(stamps) == 8
        assert all(b > a for a, b in zip(stamps, stamps[1:]))

    def test_window_start_timestamp_from_source_frame(self):
        asm = WindowAssembler(WindowConfig(window_samples=1024, hop_samples=1024))
        for frame in counting_frames(3 * 1024):
            asm.push_frame(frame)
        windows = asm.take_ready_windows()
        # frame k starts at k*1024 samples = k*1024/48000 seconds
        expected = [round(k * 1024 * 10_000_000 / 48000) for k in range(3)]
        assert [w.start_timestamp_100ns for w in windows] == expected

    def test_rate_change_flushes_and_restarts(self):
        asm = WindowAssembler(WindowConfig(window_samples=2048, sample_rate_hz=48000))
        for frame in counting_frames(1024):
            asm.push_frame(frame)
        asm.push_frame(make_audio(rate=44100, n=1024, fill=1.0))
        assert asm.try_take_window() is None  # old samples discarded
        assert asm.rate_resets == 1
        asm.push_frame(make_audio(rate=44100, n=1024, fill=2.0))
        window = asm.try_take_window()
        assert window is not None
        assert window.sample_rate_hz == 44100
        assert np.all(window.samples[:1024] == 1.0)
        assert np.all(window.samples[1024:] == 2.0)

    def test_consumer_lag_skips_to_resident_boundary(self):
        cfg = WindowConfig(window_samples=8, hop_samples=8, frame_capacity=1024)
        asm = WindowAssembler(cfg)
        for frame in counting_frames(48, frame_samples=8):
            asm.push_frame(frame)
        # capacity is 32 samples, so the first boundaries are gone
        window = asm.try_take_window()
        assert window is not None
        assert asm.windows_skipped == 2
        assert np.array_equal(window.samples, np.arange(16, 24, dtype=np.float32))
        second = asm.try_take_window()
        assert np.array_equal(second.samples, np.arange(24, 32, dtype=np.float32))

    def test_warns_on_unaligned_window(self, caplog):
        with caplog.at_level(logging.WARNING, logger="tagstream.windowing"):
            WindowConfig(window_samples=1000)
        assert any("1024" in record.message for record in caplog.records)

    def test_rejects_bad_hop(self):
        with pytest.raises(ValueError):
            WindowConfig(window_samples=8, hop_samples=9)
        with pytest.raises(ValueError):
            WindowConfig(window_samples=8, hop_samples=0)
