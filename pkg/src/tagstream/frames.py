"""Frame types and the TSRM v1 binary wire codec.

Wire layout (all multi-byte integers little-endian):

  Header (20 bytes)
  | offset | size | field            |
  |--------|------|------------------|
  | 0      | 4    | magic "TSRM"     |
  | 4      | 1    | version (1)      |
  | 5      | 1    | kind             |
  | 6      | 2    | flags (0)        |
  | 8      | 8    | timestamp_100ns  |
  | 16     | 4    | payload_len      |

  Audio payload (kind 0): sample_rate u32, channels u32,
  samples_per_channel u32, then channels * samples_per_channel float32
  samples in planar order (all of channel 0, then channel 1, ...).

  Video payload (kind 1): width u32, height u32, fourcc 4 bytes,
  data_len u32, then data_len opaque bytes.

  Metadata payload (kind 2): UTF-8 text of one well-formed XML element.

See docs/wire.md for the byte-by-byte reference with hex examples.
"""

from __future__ import annotations

import struct
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from typing import Union

import numpy as np

MAGIC = b"TSRM"
VERSION = 1
HEADER_LEN = 20
MAX_PAYLOAD_LEN = 64 * 1024 * 1024

KIND_AUDIO = 0
KIND_VIDEO = 1
KIND_METADATA = 2

_HEADER = struct.Struct("<4sBBHQI")
_AUDIO_PREFIX = struct.Struct("<III")
_VIDEO_PREFIX = struct.Struct("<II4sI")

_U32_MAX = 0xFFFFFFFF
_U64_MAX = 0xFFFFFFFFFFFFFFFF


class FrameError(Exception):
    """Base class for codec errors."""


class EncodingError(FrameError):
    """Frame violates its type invariants and cannot be encoded."""


class ProtocolError(FrameError):
    """Bytes are not a TSRM v1 frame (bad magic or version)."""


class DecodeError(FrameError):
    """Frame-shaped bytes whose contents violate an invariant."""


class NeedMoreData(FrameError):
    """Input is a valid frame prefix but incomplete; read more and retry."""


@dataclass(eq=False)
class AudioFrame:
    """Planar float32 PCM block. ``samples`` has shape (channels, n)."""

    timestamp_100ns: int
    sample_rate_hz: int
    channels: int
    samples_per_channel: int
    samples: np.ndarray

    @classmethod
    def from_samples(cls, timestamp_100ns, sample_rate_hz, samples):
        samples = np.atleast_2d(np.asarray(samples, dtype=np.float32))
        return cls(
            timestamp_100ns=timestamp_100ns,
            sample_rate_hz=sample_rate_hz,
            channels=samples.shape[0],
            samples_per_channel=samples.shape[1],
            samples=samples,
        )

    @property
    def kind(self) -> int:
        return KIND_AUDIO

    def __eq__(self, other) -> bool:
        if not isinstance(other, AudioFrame):
            return NotImplemented
        return (
            self.timestamp_100ns == other.timestamp_100ns
            and self.sample_rate_hz == other.sample_rate_hz
            and self.channels == other.channels
            and self.samples_per_channel == other.samples_per_channel
            and np.array_equal(self.samples, other.samples)
        )


@dataclass(frozen=True)
class VideoFrame:
    """Opaque picture data; the relay never inspects it."""

    timestamp_100ns: int
    width: int
    height: int
    fourcc: bytes
    data: bytes

    @property
    def kind(self) -> int:
        return KIND_VIDEO


@dataclass(frozen=True)
class MetadataFrame:
    """One well-formed XML element as UTF-8 text."""

    timestamp_100ns: int
    xml: str

    @property
    def kind(self) -> int:
        return KIND_METADATA


Frame = Union[AudioFrame, VideoFrame, MetadataFrame]


def _check_u32(value, name: str) -> int:
    if not isinstance(value, (int, np.integer)) or not 0 <= value <= _U32_MAX:
        raise EncodingError(f"{name} must be an unsigned 32-bit integer, got {value!r}")
    return int(value)


def _check_timestamp(value) -> int:
    if not isinstance(value, (int, np.integer)) or not 0 <= value <= _U64_MAX:
        raise EncodingError(f"timestamp_100ns must be an unsigned 64-bit integer, got {value!r}")
    return int(value)


def _encode_audio_payload(frame: AudioFrame) -> bytes:
    rate = _check_u32(frame.sample_rate_hz, "sample_rate_hz")
    channels = _check_u32(frame.channels, "channels")
    spc = _check_u32(frame.samples_per_channel, "samples_per_channel")
    if channels < 1 or spc < 1:
        raise EncodingError("channels and samples_per_channel must be >= 1")
    samples = np.asarray(frame.samples)
    if samples.shape != (channels, spc):
        raise EncodingError(
            f"samples shape {samples.shape} does not match (channels, samples_per_channel) "
            f"= ({channels}, {spc})"
        )
    if not np.all(np.isfinite(samples)):
        raise EncodingError("audio samples must be finite (no NaN/Inf)")
    return _AUDIO_PREFIX.pack(rate, channels, spc) + np.ascontiguousarray(
        samples, dtype="<f4"
    ).tobytes()


def _encode_video_payload(frame: VideoFrame) -> bytes:
    width = _check_u32(frame.width, "width")
    height = _check_u32(frame.height, "height")
    if not isinstance(frame.fourcc, bytes) or len(frame.fourcc) != 4:
        raise EncodingError("fourcc must be exactly 4 bytes")
    if not isinstance(frame.data, (bytes, bytearray)):
        raise EncodingError("video data must be bytes")
    return _VIDEO_PREFIX.pack(width, height, frame.fourcc, len(frame.data)) + bytes(frame.data)


def _encode_metadata_payload(frame: MetadataFrame) -> bytes:
    if not isinstance(frame.xml, str):
        raise EncodingError("metadata xml must be a string")
    if "\x00" in frame.xml:
        raise EncodingError("metadata xml must not contain NUL")
    try:
        payload = frame.xml.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise EncodingError(f"metadata xml is not encodable as UTF-8: {exc}") from exc
    try:
        ET.fromstring(frame.xml)
    except ET.ParseError as exc:
        raise EncodingError(f"metadata xml is not a single well-formed element: {exc}") from exc
    return payload


def encode_frame(frame: Frame) -> bytes:
    """Encode a frame to wire bytes. Pure and deterministic."""
    if isinstance(frame, AudioFrame):
        payload = _encode_audio_payload(frame)
    elif isinstance(frame, VideoFrame):
        payload = _encode_video_payload(frame)
    elif isinstance(frame, MetadataFrame):
        payload = _encode_metadata_payload(frame)
    else:
        raise EncodingError(f"not a frame: {type(frame).__name__}")
    if len(payload) > MAX_PAYLOAD_LEN:
        raise EncodingError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD_LEN} limit")
    ts = _check_timestamp(frame.timestamp_100ns)
    return _HEADER.pack(MAGIC, VERSION, frame.kind, 0, ts, len(payload)) + payload


def _decode_audio_payload(timestamp: int, payload: memoryview) -> AudioFrame:
    if len(payload) < _AUDIO_PREFIX.size:
        raise DecodeError("audio payload shorter than its fixed prefix")
    rate, channels, spc, = _AUDIO_PREFIX.unpack_from(payload, 0)
    if channels < 1 or spc < 1:
        raise DecodeError("audio channels and samples_per_channel must be >= 1")
    expected = _AUDIO_PREFIX.size + 4 * channels * spc
    if len(payload) != expected:
        raise DecodeError(
            f"audio payload is {len(payload)} bytes, layout requires {expected}"
        )
    flat = np.frombuffer(payload, dtype="<f4", offset=_AUDIO_PREFIX.size)
    if not np.all(np.isfinite(flat)):
        raise DecodeError("audio samples contain NaN/Inf")
    samples = flat.reshape(channels, spc).copy()
    return AudioFrame(
        timestamp_100ns=timestamp,
        sample_rate_hz=rate,
        channels=channels,
        samples_per_channel=spc,
        samples=samples,
    )


def _decode_video_payload(timestamp: int, payload: memoryview) -> VideoFrame:
    if len(payload) < _VIDEO_PREFIX.size:
        raise DecodeError("video payload shorter than its fixed prefix")
    width, height, fourcc, data_len = _VIDEO_PREFIX.unpack_from(payload, 0)
    if len(payload) != _VIDEO_PREFIX.size + data_len:
        raise DecodeError(
            f"video payload is {len(payload)} bytes, declared data length requires "
            f"{_VIDEO_PREFIX.size + data_len}"
        )
    return VideoFrame(
        timestamp_100ns=timestamp,
        width=width,
        height=height,
        fourcc=fourcc,
        data=bytes(payload[_VIDEO_PREFIX.size:]),
    )


def _decode_metadata_payload(timestamp: int, payload: memoryview) -> MetadataFrame:
    try:
        xml = bytes(payload).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError(f"metadata payload is not valid UTF-8: {exc}") from exc
    if "\x00" in xml:
        raise DecodeError("metadata xml contains NUL")
    try:
        ET.fromstring(xml)
    except ET.ParseError as exc:
        raise DecodeError(f"metadata payload is not a single well-formed XML element: {exc}") from exc
    return MetadataFrame(timestamp_100ns=timestamp, xml=xml)


def decode_frame(data) -> tuple[Frame, int]:
    """Decode one frame from the start of ``data``.

    Returns (frame, bytes_consumed). Total over arbitrary bytes: raises
    ProtocolError / DecodeError / NeedMoreData, never anything else.
    """
    view = memoryview(data)
    if len(view) < HEADER_LEN:
        prefix = bytes(view[:4])
        if prefix != MAGIC[: len(prefix)]:
            raise ProtocolError(f"bad magic {prefix!r}")
        if len(view) >= 5 and view[4] != VERSION:
            raise ProtocolError(f"unsupported version {view[4]}")
        raise NeedMoreData(f"have {len(view)} bytes, header needs {HEADER_LEN}")
    magic, version, kind, flags, timestamp, payload_len = _HEADER.unpack_from(view, 0)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    if kind not in (KIND_AUDIO, KIND_VIDEO, KIND_METADATA):
        raise DecodeError(f"unknown frame kind {kind}")
    if flags != 0:
        raise DecodeError(f"reserved flags must be zero, got {flags:#06x}")
    if payload_len > MAX_PAYLOAD_LEN:
        raise DecodeError(f"payload_len {payload_len} exceeds {MAX_PAYLOAD_LEN} limit")
    total = HEADER_LEN + payload_len
    if len(view) < total:
        raise NeedMoreData(f"have {len(view)} bytes, frame needs {total}")
    payload = view[HEADER_LEN:total]
    if kind == KIND_AUDIO:
        frame: Frame = _decode_audio_payload(timestamp, payload)
    elif kind == KIND_VIDEO:
        frame = _decode_video_payload(timestamp, payload)
    else:
        frame = _decode_metadata_payload(timestamp, payload)
    return frame, total


def frame_duration_100ns(samples: int, sample_rate_hz: int) -> int:
    """Duration of ``samples`` at ``sample_rate_hz`` in 100 ns units."""
    if sample_rate_hz <= 0:
        raise ValueError("sample_rate_hz must be positive")
    return round(samples * 10_000_000 / sample_rate_hz)


def now_100ns() -> int:
    """Current Unix time in 100 ns units."""
    return time.time_ns() // 100
