"""Audio taggers and the audio_tags XML metadata schema.

A tagger turns one SampleWindow into ranked (label, score) predictions.
The bundled ReferenceSpectralTagger is a deterministic spectral classifier
(silence / tone bands / noise); heavier models plug in through
ExternalTaggerAdapter, which drives a child process over a stdin/stdout
line protocol:

  adapter -> child:  "WIN <n_samples> <sample_rate>\\n" + n_samples float32 LE
  child -> adapter:  "TAGS label:score,label:score,...\\n"

Predictions are published as metadata frames:

  <audio_tags src="..." ts="..." window_samples="..." sample_rate="..."
              inference_ms="...">
    <tag label="..." score="..."/> ...
  </audio_tags>

ts is the start of the analyzed window in 100 ns units; the metadata
frame's own timestamp is the window end, so consumers can measure how far
predictions trail the audio.
"""

from __future__ import annotations

import logging
import os
import select
import shlex
import subprocess
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable
from xml.sax.saxutils import escape

import numpy as np

from .frames import MetadataFrame, frame_duration_100ns
from .windowing import SampleWindow

logger = logging.getLogger(__name__)

BAND_LOW_HZ = 20.0
BAND_MID_HZ = 250.0
BAND_HIGH_HZ = 2000.0
BAND_TOP_HZ = 8000.0

DEFAULT_TOP_K = 5
DEFAULT_SILENCE_RMS = 1e-4
DEFAULT_FLATNESS_THRESHOLD = 0.5


class ContractViolation(Exception):
    """Window does not satisfy the tagger's declared expectations."""


class TaggerUnavailable(Exception):
    """The external tagger child died, timed out, or spoke garbage."""


class NotTagMetadata(Exception):
    """Metadata frame holds XML that is not an audio_tags element."""


class ParseError(Exception):
    """audio_tags XML is malformed or has invalid attributes."""


@dataclass(frozen=True)
class TagPrediction:
    label: str
    score: float


@dataclass
class TagResult:
    predictions: list[TagPrediction]
    window_start_timestamp_100ns: int
    window_samples: int
    sample_rate_hz: int
    inference_ms: float


@runtime_checkable
class Tagger(Protocol):
    label_set: Sequence[str]

    def tag(self, window: SampleWindow) -> TagResult: ...


def _rank(predictions: list[TagPrediction]) -> list[TagPrediction]:
    # Descending score, ties broken by label so results are deterministic.
    return sorted(predictions, key=lambda p: (-p.score, p.label))


class ReferenceSpectralTagger:
    """Deterministic stand-in classifier over five coarse classes.

    Decision rule per window:
      1. rms < silence_rms_threshold            -> Silence, score 1.0
      2. spectral flatness in [20, 8000) Hz
         above flatness_threshold               -> Noise, score = flatness
      3. otherwise tone-band power shares over
         Low [20,250) / Mid [250,2000) /
         High [2000,8000) Hz                    -> all three bands, ranked
    """

    label_set = ("Silence", "ToneLow", "ToneMid", "ToneHigh", "Noise")

    def __init__(
        self,
        silence_rms_threshold: float = DEFAULT_SILENCE_RMS,
        flatness_threshold: float = DEFAULT_FLATNESS_THRESHOLD,
        top_k: int = DEFAULT_TOP_K,
        expected_window_samples: int | None = None,
    ):
        self.silence_rms_threshold = silence_rms_threshold
        self.flatness_threshold = flatness_threshold
        self.top_k = top_k
        self.expected_window_samples = expected_window_samples

    def tag(self, window: SampleWindow) -> TagResult:
        n = len(window.samples)
        if n == 0:
            raise ContractViolation("window is empty")
        if self.expected_window_samples is not None and n != self.expected_window_samples:
            raise ContractViolation(
                f"window has {n} samples, tagger expects {self.expected_window_samples}"
            )
        started = time.perf_counter()
        predictions = self._classify(np.asarray(window.samples, dtype=np.float64), window.sample_rate_hz)
        inference_ms = (time.perf_counter() - started) * 1e3
        return TagResult(
            predictions=predictions[: self.top_k],
            window_start_timestamp_100ns=window.start_timestamp_100ns,
            window_samples=n,
            sample_rate_hz=window.sample_rate_hz,
            inference_ms=inference_ms,
        )

    def _classify(self, x: np.ndarray, rate: int) -> list[TagPrediction]:
        rms = float(np.sqrt(np.mean(np.square(x))))
        if rms < self.silence_rms_threshold:
            return [TagPrediction("Silence", 1.0)]
        power = np.abs(np.fft.rfft(x)) ** 2
        freqs = np.fft.rfftfreq(len(x), 1.0 / rate)
        in_band = (freqs >= BAND_LOW_HZ) & (freqs < BAND_TOP_HZ)
        band_power = power[in_band]
        arith = float(np.mean(band_power)) if band_power.size else 0.0
        if arith <= 0.0:
            # Energy but nothing analyzable in [20, 8000): flatness degenerates to 1.
            return [TagPrediction("Noise", 1.0)]
        geo = float(np.exp(np.mean(np.log(np.maximum(band_power, 1e-300)))))
        flatness = min(geo / arith, 1.0)
        if flatness > self.flatness_threshold:
            return [TagPrediction("Noise", flatness)]
        band_freqs = freqs[in_band]
        low = float(band_power[band_freqs < BAND_MID_HZ].sum())
        mid = float(band_power[(band_freqs >= BAND_MID_HZ) & (band_freqs < BAND_HIGH_HZ)].sum())
        high = float(band_power[band_freqs >= BAND_HIGH_HZ].sum())
        total = low + mid + high
        return _rank(
            [
                TagPrediction("ToneLow", low / total),
                TagPrediction("ToneMid", mid / total),
                TagPrediction("ToneHigh", high / total),
            ]
        )


def _format_ms(ms: float) -> str:
    text = f"{ms:.3f}".rstrip("0").rstrip(".")
    return text if text else "0"


def _attr(value: str) -> str:
    return escape(value, {'"': "&quot;"})


def build_metadata_xml(result: TagResult, source_name: str) -> MetadataFrame:
    """Render a TagResult as an audio_tags metadata frame.

    The frame timestamp is window start + window duration: the prediction
    describes the window that just finished.
    """
    parts = [
        f'<audio_tags src="{_attr(source_name)}"'
        f' ts="{result.window_start_timestamp_100ns}"'
        f' window_samples="{result.window_samples}"'
        f' sample_rate="{result.sample_rate_hz}"'
        f' inference_ms="{_format_ms(result.inference_ms)}">'
    ]
    for pred in result.predictions:
        parts.append(f'<tag label="{_attr(pred.label)}" score="{pred.score:.4f}"/>')
    parts.append("</audio_tags>")
    end_ts = result.window_start_timestamp_100ns + frame_duration_100ns(
        result.window_samples, result.sample_rate_hz
    )
    return MetadataFrame(timestamp_100ns=end_ts, xml="".join(parts))


def parse_metadata_xml(frame: MetadataFrame) -> tuple[TagResult, str]:
    """Inverse of build_metadata_xml. Returns (result, source_name).

    Raises NotTagMetadata for foreign XML so callers can skip it, and
    ParseError for audio_tags elements that are malformed.
    """
    try:
        root = ET.fromstring(frame.xml)
    except ET.ParseError as exc:
        raise ParseError(f"not well-formed XML: {exc}") from exc
    if root.tag != "audio_tags":
        raise NotTagMetadata(f"root element is <{root.tag}>, not <audio_tags>")
    try:
        source = root.attrib["src"]
        ts = int(root.attrib["ts"])
        window_samples = int(root.attrib["window_samples"])
        sample_rate = int(root.attrib["sample_rate"])
        inference_ms = float(root.attrib["inference_ms"])
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad audio_tags attributes: {exc}") from exc
    predictions = []
    for child in root:
        if child.tag != "tag":
            raise ParseError(f"unexpected element <{child.tag}> inside audio_tags")
        try:
            predictions.append(
                TagPrediction(label=child.attrib["label"], score=float(child.attrib["score"]))
            )
        except (KeyError, ValueError) as exc:
            raise ParseError(f"bad tag element: {exc}") from exc
    result = TagResult(
        predictions=predictions,
        window_start_timestamp_100ns=ts,
        window_samples=window_samples,
        sample_rate_hz=sample_rate,
        inference_ms=inference_ms,
    )
    return result, source


class ExternalTaggerAdapter:
    """Drives an external tagger process over the WIN/TAGS line protocol.

    The child is spawned lazily and respawned on the next tag() after any
    failure, so a crashed model resumes service without operator action.
    The caller owning the relay must treat TaggerUnavailable as "skip this
    window", never as a reason to stop passing media through.
    """

    def __init__(
        self,
        command: str | Sequence[str],
        *,
        timeout: float = 10.0,
        label_set: Sequence[str] = (),
        top_k: int = DEFAULT_TOP_K,
    ):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ValueError("external tagger command is empty")
        self.timeout = timeout
        self.label_set = tuple(label_set)
        self.top_k = top_k
        self._proc: subprocess.Popen | None = None
        self._stdout_buf = b""

    def child_pid(self) -> int | None:
        return self._proc.pid if self._proc is not None else None

    def _ensure_child(self) -> subprocess.Popen:
        if self._proc is not None and self._proc.poll() is None:
            return self._proc
        self._proc = subprocess.Popen(
            self.command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            bufsize=0,
        )
        self._stdout_buf = b""
        os.set_blocking(self._proc.stdin.fileno(), False)
        logger.info("external tagger started: pid=%d cmd=%s", self._proc.pid, self.command)
        return self._proc

    def _kill_child(self) -> None:
        proc, self._proc = self._proc, None
        self._stdout_buf = b""
        if proc is None:
            return
        try:
            proc.kill()
            proc.wait(timeout=1.0)
        except OSError:
            pass

    def _exchange(self, proc: subprocess.Popen, payload: bytes, deadline: float) -> bytes:
        stdin_fd = proc.stdin.fileno()
        stdout_fd = proc.stdout.fileno()
        sent = 0
        while sent < len(payload):
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError("timed out writing window to tagger")
            _, writable, _ = select.select([], [stdin_fd], [], remaining)
            if not writable:
                raise TimeoutError("timed out writing window to tagger")
            try:
                sent += os.write(stdin_fd, payload[sent:sent + 65536])
            except BlockingIOError:
                continue
        while b"\n" not in self._stdout_buf:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError("timed out waiting for tagger reply")
            readable, _, _ = select.select([stdout_fd], [], [], remaining)
            if not readable:
                raise TimeoutError("timed out waiting for tagger reply")
            chunk = os.read(stdout_fd, 65536)
            if not chunk:
                raise EOFError("tagger closed stdout")
            self._stdout_buf += chunk
        line, _, self._stdout_buf = self._stdout_buf.partition(b"\n")
        return line

    def tag(self, window: SampleWindow) -> TagResult:
        n = len(window.samples)
        if n == 0:
            raise ContractViolation("window is empty")
        started = time.perf_counter()
        try:
            proc = self._ensure_child()
            header = f"WIN {n} {window.sample_rate_hz}\n".encode("ascii")
            body = np.ascontiguousarray(window.samples, dtype="<f4").tobytes()
            line = self._exchange(proc, header + body, time.monotonic() + self.timeout)
        except (OSError, EOFError, TimeoutError, ValueError) as exc:
            self._kill_child()
            raise TaggerUnavailable(f"external tagger failed: {exc}") from exc
        inference_ms = (time.perf_counter() - started) * 1e3
        predictions = self._parse_reply(line)
        return TagResult(
            predictions=predictions[: self.top_k],
            window_start_timestamp_100ns=window.start_timestamp_100ns,
            window_samples=n,
            sample_rate_hz=window.sample_rate_hz,
            inference_ms=inference_ms,
        )

    def _parse_reply(self, line: bytes) -> list[TagPrediction]:
        try:
            text = line.decode("utf-8").strip()
        except UnicodeDecodeError as exc:
            self._kill_child()
            raise TaggerUnavailable(f"tagger reply is not UTF-8: {exc}") from exc
        if not text.startswith("TAGS"):
            self._kill_child()
            raise TaggerUnavailable(f"tagger reply does not start with TAGS: {text!r}")
        body = text[4:].strip()
        predictions = []
        if body:
            for item in body.split(","):
                label, sep, score_text = item.strip().rpartition(":")
                if not sep or not label:
                    self._kill_child()
                    raise TaggerUnavailable(f"malformed tag item {item!r}")
                try:
                    score = float(score_text)
                except ValueError as exc:
                    self._kill_child()
                    raise TaggerUnavailable(f"malformed tag score {score_text!r}") from exc
                if not 0.0 <= score <= 1.0:
                    clamped = min(max(score, 0.0), 1.0)
                    logger.warning(
                        "tagger score %s for %r out of [0,1]; clamped to %s",
                        score, label, clamped,
                    )
                    score = clamped
                predictions.append(TagPrediction(label, score))
        return _rank(predictions)

    def close(self) -> None:
        self._kill_child()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


def make_tagger(spec) -> Tagger:
    """Build a tagger from a selection string, or pass an instance through.

    Accepted strings: "reference" or "external:<command line>".
    """
    if not isinstance(spec, str):
        return spec
    if spec == "reference":
        return ReferenceSpectralTagger()
    if spec.startswith("external:"):
        command = spec[len("external:"):].strip()
        if not command:
            raise ValueError("external tagger requires a command: external:<cmd>")
        return ExternalTaggerAdapter(command)
    raise ValueError(f"unknown tagger {spec!r}; expected 'reference' or 'external:<cmd>'")
