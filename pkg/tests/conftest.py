import hashlib
import random
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from tagstream.frames import AudioFrame, MetadataFrame, VideoFrame, encode_frame
from tagstream.tagging import TagResult
from tagstream.windowing import SampleWindow

STUB_SCRIPT = Path(__file__).parent / "stubs" / "external_tagger_stub.py"


def stub_tagger_command(*extra_args: str) -> list[str]:
    return [sys.executable, str(STUB_SCRIPT), *extra_args]


def make_audio(ts=0, rate=48000, channels=1, n=64, fill=None, rng=None):
    if fill is not None:
        samples = np.full((channels, n), fill, dtype=np.float32)
    elif rng is not None:
        samples = rng.uniform(-1, 1, size=(channels, n)).astype(np.float32)
    else:
        samples = np.zeros((channels, n), dtype=np.float32)
    return AudioFrame.from_samples(ts, rate, samples)


def random_frame(rng: random.Random):
    """Arbitrary valid frame; the generator is the round-trip oracle."""
    kind = rng.choice(("audio", "video", "metadata"))
    ts = rng.randrange(0, 2**63)
    if kind == "audio":
        channels = rng.randint(1, 4)
        n = rng.randint(1, 256)
        np_rng = np.random.default_rng(rng.randrange(2**32))
        samples = np_rng.uniform(-1, 1, size=(channels, n)).astype(np.float32)
        return AudioFrame.from_samples(ts, rng.choice((8000, 44100, 48000)), samples)
    if kind == "video":
        data = bytes(rng.getrandbits(8) for _ in range(rng.randint(0, 512)))
        return VideoFrame(
            timestamp_100ns=ts,
            width=rng.randint(0, 4096),
            height=rng.randint(0, 4096),
            fourcc=bytes(rng.getrandbits(8) for _ in range(4)),
            data=data,
        )
    label = "".join(rng.choice("abcdefghij<>&\"'") for _ in range(rng.randint(0, 12)))
    from xml.sax.saxutils import escape
    return MetadataFrame(timestamp_100ns=ts, xml=f"<note body=\"{escape(label, {chr(34): '&quot;'})}\"/>")


def random_tag_result(rng: random.Random) -> TagResult:
    labels = rng.sample(
        ["Speech", "Siren", "Car", "River", "Phone & Bell", 'Quote"d', "a<b", "Tone"],
        k=rng.randint(0, 5),
    )
    predictions = sorted(
        ((label, round(rng.random(), 4)) for label in labels),
        key=lambda pair: (-pair[1], pair[0]),
    )
    from tagstream.tagging import TagPrediction

    return TagResult(
        predictions=[TagPrediction(label, score) for label, score in predictions],
        window_start_timestamp_100ns=rng.randrange(0, 2**62),
        window_samples=rng.randrange(1, 200000),
        sample_rate_hz=rng.choice((16000, 44100, 48000)),
        inference_ms=round(rng.uniform(0, 5000), 3),
    )


def make_window(samples, rate=48000, start_ts=0) -> SampleWindow:
    return SampleWindow(
        samples=np.asarray(samples, dtype=np.float32),
        start_timestamp_100ns=start_ts,
        sample_rate_hz=rate,
    )


def wait_until(predicate, timeout=5.0, interval=0.01, message="condition"):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return
        time.sleep(interval)
    raise AssertionError(f"timed out waiting for {message}")


class SleepStubTagger:
    """Tagger that burns a fixed wall-clock time per window."""

    label_set = ("Stub",)

    def __init__(self, sleep_s: float):
        self.sleep_s = sleep_s
        self.calls = 0

    def tag(self, window):
        from tagstream.tagging import TagPrediction

        self.calls += 1
        if self.sleep_s > 0:
            time.sleep(self.sleep_s)
        return TagResult(
            predictions=[TagPrediction("Stub", 1.0)],
            window_start_timestamp_100ns=window.start_timestamp_100ns,
            window_samples=len(window.samples),
            sample_rate_hz=window.sample_rate_hz,
            inference_ms=self.sleep_s * 1e3,
        )


class WorkStubTagger:
    """Tagger whose cost scales with window length times ``passes``."""

    label_set = ("Stub",)

    def __init__(self, passes: int):
        self.passes = passes

    def tag(self, window):
        from tagstream.tagging import TagPrediction

        started = time.perf_counter()
        x = np.asarray(window.samples, dtype=np.float64)
        acc = 0.0
        for _ in range(self.passes):
            acc += float(np.sum(np.sort(x) * x))
        inference_ms = (time.perf_counter() - started) * 1e3
        return TagResult(
            predictions=[TagPrediction("Stub", min(1.0, abs(acc) % 1.0))],
            window_start_timestamp_100ns=window.start_timestamp_100ns,
            window_samples=len(window.samples),
            sample_rate_hz=window.sample_rate_hz,
            inference_ms=inference_ms,
        )


@pytest.fixture
def rng():
    return random.Random(20260810)
