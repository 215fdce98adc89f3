"""Two-ring-buffer windowing: audio frames in, fixed-length mono windows out.

Ring one holds whole frames (drop-oldest when the analysis side lags),
ring two holds downmixed mono samples. Windows of ``window_samples`` are
emitted every ``hop_samples`` once enough samples have accumulated; the
default is tumbling (hop == window).
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .frames import AudioFrame, frame_duration_100ns

logger = logging.getLogger(__name__)

DEFAULT_WINDOW_SAMPLES = 48128
DEFAULT_SAMPLE_RATE_HZ = 48000
DEFAULT_FRAME_CAPACITY = 64


class RateMismatch(Exception):
    """Frame sample rate differs from the rate the window stage is accumulating."""


@dataclass
class WindowConfig:
    window_samples: int = DEFAULT_WINDOW_SAMPLES
    hop_samples: int | None = None
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE_HZ
    downmix: str = "average"
    frame_capacity: int = DEFAULT_FRAME_CAPACITY

    def __post_init__(self):
        if self.window_samples <= 0:
            raise ValueError("window_samples must be positive")
        if self.hop_samples is None:
            self.hop_samples = self.window_samples
        if not 0 < self.hop_samples <= self.window_samples:
            raise ValueError("hop_samples must be in (0, window_samples]")
        if self.window_samples % 1024 != 0:
            logger.warning(
                "window_samples=%d is not a multiple of 1024; frame boundaries will not align",
                self.window_samples,
            )


@dataclass(eq=False)
class SampleWindow:
    """Exactly ``len(samples)`` mono floats ending at a hop boundary."""

    samples: np.ndarray
    start_timestamp_100ns: int
    sample_rate_hz: int

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_100ns(self) -> int:
        return frame_duration_100ns(len(self.samples), self.sample_rate_hz)


def extract_samples(frame: AudioFrame, policy: str = "average") -> np.ndarray:
    """Downmix one frame to mono float32, length samples_per_channel.

    Average policy: out[i] = mean over channels of samples[ch][i].
    """
    if policy != "average":
        raise ValueError(f"unknown downmix policy {policy!r}")
    samples = np.asarray(frame.samples, dtype=np.float32)
    if samples.ndim == 1:
        return samples.copy()
    if samples.shape[0] == 1:
        return samples[0].copy()
    return np.mean(samples, axis=0, dtype=np.float64).astype(np.float32)


class FrameRing:
    """FIFO of audio frames with overwrite-oldest on overflow."""

    def __init__(self, capacity: int = DEFAULT_FRAME_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._frames: deque[AudioFrame] = deque()
        self.dropped_frames = 0

    def push(self, frame: AudioFrame) -> None:
        if len(self._frames) >= self.capacity:
            self._frames.popleft()
            self.dropped_frames += 1
        self._frames.append(frame)

    def pop(self) -> AudioFrame | None:
        if not self._frames:
            return None
        return self._frames.popleft()

    def __len__(self) -> int:
        return len(self._frames)


@dataclass
class _Segment:
    # Maps absolute sample indices back to the frame timestamps that produced them.
    start_index: int
    timestamp_100ns: int
    length: int
    sample_rate_hz: int


class SampleRing:
    """Circular store of the most recent ``capacity`` mono samples."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._buf = np.zeros(capacity, dtype=np.float32)
        self.total_written = 0
        self._segments: deque[_Segment] = deque()

    def write(self, samples: np.ndarray, timestamp_100ns: int, sample_rate_hz: int) -> None:
        n = int(samples.size)
        if n == 0:
            return
        cap = self.capacity
        if n >= cap:
            tail = samples[n - cap:]
            pos = (self.total_written + n - cap) % cap
            first = cap - pos
            self._buf[pos:] = tail[:first]
            self._buf[:pos] = tail[first:]
        else:
            pos = self.total_written % cap
            first = min(n, cap - pos)
            self._buf[pos:pos + first] = samples[:first]
            self._buf[: n - first] = samples[first:]
        self._segments.append(
            _Segment(self.total_written, timestamp_100ns, n, sample_rate_hz)
        )
        self.total_written += n
        oldest = self.total_written - cap
        while self._segments and self._segments[0].start_index + self._segments[0].length <= oldest:
            self._segments.popleft()

    def read(self, start: int, length: int) -> np.ndarray:
        if length > self.capacity:
            raise ValueError("read longer than ring capacity")
        if start < self.total_written - self.capacity or start + length > self.total_written:
            raise ValueError("requested span is not resident in the ring")
        out = np.empty(length, dtype=np.float32)
        pos = start % self.capacity
        first = min(length, self.capacity - pos)
        out[:first] = self._buf[pos:pos + first]
        out[first:] = self._buf[: length - first]
        return out

    def timestamp_at(self, index: int) -> int:
        """Timestamp of the sample at absolute index, from its source frame."""
        for seg in self._segments:
            if seg.start_index <= index < seg.start_index + seg.length:
                offset = index - seg.start_index
                return seg.timestamp_100ns + frame_duration_100ns(offset, seg.sample_rate_hz)
        raise ValueError(f"no timestamp recorded for sample index {index}")

    def flush(self) -> None:
        self.total_written = 0
        self._segments.clear()


class WindowAssembler:
    """Drives both rings: push frames, take completed windows.

    Frames are extracted into the sample ring as they are pushed, so
    retention is governed by the sample ring (4 x window); a consumer that
    falls behind loses whole hops, not arbitrary frames. Single thread
    owns both sides, so no locking here.
    """

    def __init__(self, cfg: WindowConfig | None = None):
        self.cfg = cfg or WindowConfig()
        self.frame_ring = FrameRing(self.cfg.frame_capacity)
        capacity = max(4 * self.cfg.window_samples, self.cfg.window_samples + self.cfg.hop_samples)
        self.sample_ring = SampleRing(capacity)
        self._active_rate = self.cfg.sample_rate_hz
        self._next_boundary = self.cfg.window_samples
        self.windows_emitted = 0
        self.windows_skipped = 0
        self.rate_resets = 0

    @property
    def dropped_frames(self) -> int:
        return self.frame_ring.dropped_frames

    def push_frame(self, frame: AudioFrame) -> None:
        self.frame_ring.push(frame)
        self._drain_frames()

    def _drain_frames(self) -> None:
        while True:
            frame = self.frame_ring.pop()
            if frame is None:
                return
            if frame.sample_rate_hz != self._active_rate:
                # Correctness over continuity: restart accumulation at the new rate.
                logger.warning(
                    "sample rate changed %d -> %d Hz; flushing window state",
                    self._active_rate, frame.sample_rate_hz,
                )
                self.sample_ring.flush()
                self._next_boundary = self.cfg.window_samples
                self._active_rate = frame.sample_rate_hz
                self.rate_resets += 1
            mono = extract_samples(frame, self.cfg.downmix)
            self.sample_ring.write(mono, frame.timestamp_100ns, frame.sample_rate_hz)

    def try_take_window(self) -> SampleWindow | None:
        """Return the next ready window, or None when not ready."""
        self._drain_frames()
        window = self.cfg.window_samples
        hop = self.cfg.hop_samples
        total = self.sample_ring.total_written
        if total < self._next_boundary:
            return None
        boundary = self._next_boundary
        oldest = max(0, total - self.sample_ring.capacity)
        while boundary - window < oldest:
            boundary += hop
            self.windows_skipped += 1
        if boundary > total:
            self._next_boundary = boundary
            return None
        start = boundary - window
        samples = self.sample_ring.read(start, window)
        start_ts = self.sample_ring.timestamp_at(start)
        self._next_boundary = boundary + hop
        self.windows_emitted += 1
        return SampleWindow(
            samples=samples,
            start_timestamp_100ns=start_ts,
            sample_rate_hz=self._active_rate,
        )

    def take_ready_windows(self) -> list[SampleWindow]:
        """Drain every window that is ready right now."""
        out = []
        while (w := self.try_take_window()) is not None:
            out.append(w)
        return out
