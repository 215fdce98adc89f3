"""Desk-scale signal producers: synthetic generators and a WAV player.

Signals are described declaratively (sine / white noise / silence / mix)
so test inputs are reproducible, and a small RIFF/WAVE reader covers real
clips (PCM16 or float32 only). ``play`` feeds a sender in 1024-sample
frames, optionally paced to wall-clock time.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass

import numpy as np

from .frames import AudioFrame, frame_duration_100ns, now_100ns

DEFAULT_FRAME_SAMPLES = 1024


class UnsupportedWav(Exception):
    """Not a RIFF/WAVE file, or a codec outside the PCM16/float32 subset."""


class ParseError(Exception):
    """RIFF/WAVE structure is damaged or truncated."""


@dataclass(frozen=True)
class SignalSpec:
    """Declarative test signal.

    ``kind`` is one of sine / noise / silence / mix. For mix, ``parts``
    are rendered mono at the parent's length and rate, summed, then
    clamped to [-1, 1]; their own duration/rate/channels are ignored.
    """

    kind: str
    duration_s: float = 1.0
    sample_rate_hz: int = 48000
    channels: int = 1
    freq_hz: float = 440.0
    amplitude: float = 1.0
    seed: int = 0
    parts: tuple["SignalSpec", ...] = ()

    def __post_init__(self):
        if self.kind not in ("sine", "noise", "silence", "mix"):
            raise ValueError(f"unknown signal kind {self.kind!r}")
        if not 0.0 <= self.amplitude <= 1.0:
            raise ValueError("amplitude must be in [0, 1]")
        if self.kind == "mix" and not self.parts:
            raise ValueError("mix needs at least one part")

    @classmethod
    def sine(cls, freq_hz: float, amplitude: float = 1.0, **kw) -> "SignalSpec":
        return cls(kind="sine", freq_hz=freq_hz, amplitude=amplitude, **kw)

    @classmethod
    def white_noise(cls, amplitude: float = 1.0, seed: int = 0, **kw) -> "SignalSpec":
        return cls(kind="noise", amplitude=amplitude, seed=seed, **kw)

    @classmethod
    def silence(cls, **kw) -> "SignalSpec":
        return cls(kind="silence", **kw)

    @classmethod
    def mix(cls, parts, **kw) -> "SignalSpec":
        return cls(kind="mix", parts=tuple(parts), **kw)


def _render_mono(spec: SignalSpec, n: int, rate: int) -> np.ndarray:
    if spec.kind == "silence":
        return np.zeros(n, dtype=np.float64)
    if spec.kind == "sine":
        i = np.arange(n, dtype=np.float64)
        return spec.amplitude * np.sin(2.0 * np.pi * spec.freq_hz * i / rate)
    if spec.kind == "noise":
        rng = np.random.default_rng(spec.seed)
        return rng.uniform(-spec.amplitude, spec.amplitude, n)
    acc = np.zeros(n, dtype=np.float64)
    for part in spec.parts:
        acc += _render_mono(part, n, rate)
    return np.clip(acc, -1.0, 1.0)


def render(spec: SignalSpec) -> np.ndarray:
    """Render to float32, shape (channels, n); deterministic given the spec."""
    n = round(spec.duration_s * spec.sample_rate_hz)
    mono = _render_mono(spec, n, spec.sample_rate_hz).astype(np.float32)
    if spec.channels == 1:
        return mono.reshape(1, n)
    return np.tile(mono, (spec.channels, 1))


def parse_signal_spec(
    text: str,
    *,
    duration_s: float = 1.0,
    sample_rate_hz: int = 48000,
    channels: int = 1,
) -> SignalSpec:
    """Parse the CLI mini-syntax for signals.

    sine:<freq>[:<amp>] | noise[:<amp>[:<seed>]] | silence |
    mix(<spec>+<spec>+...)
    """
    common = dict(duration_s=duration_s, sample_rate_hz=sample_rate_hz, channels=channels)
    text = text.strip()
    if text.startswith("mix(") and text.endswith(")"):
        inner = text[len("mix("):-1]
        parts = [parse_signal_spec(p, **common) for p in inner.split("+") if p.strip()]
        return SignalSpec.mix(parts, **common)
    fields = text.split(":")
    name = fields[0]
    try:
        if name == "silence" and len(fields) == 1:
            return SignalSpec.silence(**common)
        if name == "sine" and 2 <= len(fields) <= 3:
            amp = float(fields[2]) if len(fields) == 3 else 1.0
            return SignalSpec.sine(float(fields[1]), amp, **common)
        if name == "noise" and len(fields) <= 3:
            amp = float(fields[1]) if len(fields) >= 2 else 1.0
            seed = int(fields[2]) if len(fields) == 3 else 0
            return SignalSpec.white_noise(amp, seed, **common)
    except ValueError as exc:
        raise ValueError(f"bad signal spec {text!r}: {exc}") from exc
    raise ValueError(f"bad signal spec {text!r}")


@dataclass
class WavClip:
    sample_rate_hz: int
    channels: int
    samples: np.ndarray  # float32, shape (channels, n)

    @property
    def duration_s(self) -> float:
        return self.samples.shape[1] / self.sample_rate_hz


def _iter_riff_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body_start = pos + 8
        if body_start + size > len(data):
            raise ParseError(f"chunk {chunk_id!r} declares {size} bytes past end of file")
        yield chunk_id, data[body_start:body_start + size]
        pos = body_start + size + (size & 1)  # chunks are word-aligned


def read_wav(data: bytes) -> WavClip:
    """Decode PCM16 or float32 RIFF/WAVE bytes. Total over arbitrary input."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise UnsupportedWav("not a RIFF/WAVE file")
    fmt = None
    pcm_data = None
    for chunk_id, body in _iter_riff_chunks(data):
        if chunk_id == b"fmt " and fmt is None:
            if len(body) < 16:
                raise ParseError("fmt chunk shorter than 16 bytes")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data" and pcm_data is None:
            pcm_data = body
    if fmt is None:
        raise UnsupportedWav("missing fmt chunk")
    if pcm_data is None:
        raise UnsupportedWav("missing data chunk")
    audio_format, channels, rate, _byte_rate, _block_align, bits = fmt
    if channels < 1:
        raise ParseError("fmt declares zero channels")
    if rate < 1:
        raise ParseError("fmt declares zero sample rate")
    if audio_format == 1 and bits == 16:
        width = 2
        dtype = "<i2"
    elif audio_format == 3 and bits == 32:
        width = 4
        dtype = "<f4"
    else:
        raise UnsupportedWav(f"unsupported codec: format={audio_format} bits={bits}")
    frame_bytes = width * channels
    if len(pcm_data) % frame_bytes != 0:
        raise ParseError("data chunk is not a whole number of sample frames")
    raw = np.frombuffer(pcm_data, dtype=dtype)
    if audio_format == 1:
        floats = raw.astype(np.float32) / 32768.0
    else:
        floats = raw.astype(np.float32)
    samples = floats.reshape(-1, channels).T.copy()
    return WavClip(sample_rate_hz=rate, channels=channels, samples=samples)


def read_wav_file(path) -> WavClip:
    with open(path, "rb") as handle:
        return read_wav(handle.read())


def play(
    sender,
    samples: np.ndarray,
    *,
    sample_rate_hz: int = 48000,
    frame_samples: int = DEFAULT_FRAME_SAMPLES,
    realtime: bool = False,
    start_timestamp_100ns: int | None = None,
) -> int:
    """Send ``samples`` as audio frames; returns the number of frames sent.

    The final frame carries the true remainder length. Realtime pacing
    schedules frame k at start + k * period on the monotonic clock, so
    sleep error never accumulates.
    """
    if frame_samples < 1:
        raise ValueError("frame_samples must be >= 1")
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float32))
    total = samples.shape[1]
    base_ts = now_100ns() if start_timestamp_100ns is None else start_timestamp_100ns
    period = frame_samples / sample_rate_hz
    t0 = time.monotonic()
    sent = 0
    for start in range(0, total, frame_samples):
        if realtime:
            delay = (t0 + sent * period) - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        chunk = samples[:, start:start + frame_samples]
        frame = AudioFrame.from_samples(
            base_ts + frame_duration_100ns(start, sample_rate_hz),
            sample_rate_hz,
            chunk,
        )
        sender.send_frame(frame)
        sent += 1
    if realtime:
        # Hold until the clip's full duration has elapsed, so back-to-back
        # plays keep real-time cadence.
        delay = (t0 + total / sample_rate_hz) - time.monotonic()
        if delay > 0:
            time.sleep(delay)
    return sent
