"""Pass-through relay with an audio tagging side-chain.

Every received frame is re-sent on the output byte-identically and in
order. Audio frames are additionally copied into the windowing stage;
completed windows go through a bounded drop-oldest queue to the analysis
worker, whose tag results come back as metadata frames injected into the
outbound stream. The forwarding path never waits on analysis: a slow or
dead tagger only costs windows, never media.

Stats are published as one JSON line per reporting interval on stderr.
"""

from __future__ import annotations

import json
import logging
import sys
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from . import frames, transport
from .discovery import Finder, SourceAdvertisement
from .tagging import TaggerUnavailable, build_metadata_xml, make_tagger
from .transport import ConnectError, Receiver, Sender
from .windowing import WindowAssembler, WindowConfig

logger = logging.getLogger(__name__)

DEFAULT_QUEUE_DEPTH = 4
DEFAULT_STATS_INTERVAL = 5.0
_RECONNECT_BASE = 0.5
_RECONNECT_CAP = 8.0
_METADATA_QUEUE_DEPTH = 64
_LATENCY_RESERVOIR = 100_000


def parse_source(text: str):
    """Interpret a source string: "group/name", bare "name", or "host:port"."""
    if "/" in text:
        group, _, name = text.partition("/")
        return ("discover", group, name)
    if ":" in text:
        host, _, port = text.rpartition(":")
        return ("direct", host, int(port))
    return ("discover", "public", text)


@dataclass
class RelayConfig:
    input: object  # "group/name", "host:port", (host, port), or SourceAdvertisement
    output_name: str
    output_group: str = "public"
    output_port: int = 0
    window: WindowConfig = field(default_factory=WindowConfig)
    tagger: object = "reference"  # selection string or a Tagger instance
    queue_depth: int = DEFAULT_QUEUE_DEPTH
    stats_interval: float = DEFAULT_STATS_INTERVAL
    discovery_port: int | None = None
    announce: bool = True
    connect_timeout: float = 3.0
    recv_timeout: float = 0.1

    def __post_init__(self):
        if self.queue_depth < 1:
            raise ValueError("queue_depth must be >= 1")
        if isinstance(self.input, str):
            parsed = parse_source(self.input)
            if parsed[0] == "discover" and (parsed[1], parsed[2]) == (
                self.output_group,
                self.output_name,
            ):
                raise ValueError("relay input and output must not be the same source")


@dataclass
class LatencyStats:
    count: int = 0
    mean_us: float = 0.0
    p50_us: float = 0.0
    p99_us: float = 0.0
    max_us: float = 0.0


@dataclass
class RelayStats:
    frames_passed: dict = field(default_factory=lambda: {"audio": 0, "video": 0, "metadata": 0})
    windows_produced: int = 0
    windows_tagged: int = 0
    windows_dropped: int = 0
    metadata_emitted: int = 0
    tagger_failures: int = 0
    reconnects: int = 0
    frame_ring_dropped: int = 0
    passthrough_latency: LatencyStats = field(default_factory=LatencyStats)
    inference_ms: LatencyStats = field(default_factory=LatencyStats)

    def to_json(self) -> str:
        payload = {
            "frames_passed": self.frames_passed,
            "windows_produced": self.windows_produced,
            "windows_tagged": self.windows_tagged,
            "windows_dropped": self.windows_dropped,
            "metadata_emitted": self.metadata_emitted,
            "tagger_failures": self.tagger_failures,
            "reconnects": self.reconnects,
            "passthrough_p99_us": round(self.passthrough_latency.p99_us, 1),
            "passthrough_count": self.passthrough_latency.count,
            "inference_p50_ms": round(self.inference_ms.p50_us / 1000.0, 3),
        }
        return json.dumps(payload, sort_keys=True)


class _Reservoir:
    """Recent-value store for percentile estimates; O(1) record."""

    def __init__(self, maxlen: int = _LATENCY_RESERVOIR):
        self._values: deque[float] = deque(maxlen=maxlen)
        self.count = 0

    def record(self, value: float) -> None:
        self._values.append(value)
        self.count += 1

    def stats(self) -> LatencyStats:
        if not self._values:
            return LatencyStats()
        ordered = sorted(self._values)
        n = len(ordered)

        def pct(p: float) -> float:
            return ordered[min(n - 1, max(0, round(p * (n - 1))))]

        return LatencyStats(
            count=self.count,
            mean_us=sum(ordered) / n,
            p50_us=pct(0.50),
            p99_us=pct(0.99),
            max_us=ordered[-1],
        )


class _DropOldestQueue:
    """Bounded queue that sheds the oldest item instead of blocking the producer."""

    def __init__(self, depth: int):
        self.depth = depth
        self._items: deque = deque()
        self._cond = threading.Condition()
        self.dropped = 0

    def put(self, item) -> None:
        with self._cond:
            if len(self._items) >= self.depth:
                self._items.popleft()
                self.dropped += 1
            self._items.append(item)
            self._cond.notify()

    def get(self, timeout: float):
        with self._cond:
            if not self._items:
                self._cond.wait(timeout)
            if not self._items:
                return None
            return self._items.popleft()

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)


class Relay:
    """Runs the receive -> forward -> analyze -> inject pipeline.

    Three roles: the ingest thread forwards frames and feeds the window
    stage, the analysis thread runs the tagger, and per-subscriber writer
    threads (inside Sender) push bytes out. Ingest never blocks on
    analysis; both inter-thread queues drop oldest when full.
    """

    def __init__(self, cfg: RelayConfig):
        self.cfg = cfg
        self._tagger = make_tagger(cfg.tagger)
        self._stop = threading.Event()
        self._lock = threading.Lock()
        self._stats = RelayStats()
        self._passthrough_lat = _Reservoir()
        self._inference_lat = _Reservoir()
        self._window_queue = _DropOldestQueue(cfg.queue_depth)
        self._metadata_queue = _DropOldestQueue(_METADATA_QUEUE_DEPTH)
        self._assembler = WindowAssembler(cfg.window)
        self._sender: Sender | None = None
        self._finder: Finder | None = None
        self._threads: list[threading.Thread] = []

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        """Bind the output and start the pipeline. Output bind failure is fatal."""
        self._sender = Sender(
            self.cfg.output_name,
            self.cfg.output_group,
            self.cfg.output_port,
            announce=self.cfg.announce,
            discovery_port=self.cfg.discovery_port,
        )
        self._threads = [
            threading.Thread(target=self._ingest_loop, name="relay-ingest", daemon=True),
            threading.Thread(target=self._analysis_loop, name="relay-analysis", daemon=True),
            threading.Thread(target=self._stats_loop, name="relay-stats", daemon=True),
        ]
        for thread in self._threads:
            thread.start()
        logger.info(
            "relay started: output %s/%s on port %d",
            self.cfg.output_group, self.cfg.output_name, self._sender.port,
        )

    def request_stop(self) -> None:
        """Ask the pipeline to wind down; safe to call from a signal handler."""
        self._stop.set()

    def stop(self) -> None:
        self._stop.set()
        for thread in self._threads:
            thread.join(timeout=10.0)
        if self._finder is not None:
            self._finder.close()
            self._finder = None
        if self._sender is not None:
            self._sender.close()
        close = getattr(self._tagger, "close", None)
        if close is not None:
            close()

    def run(self) -> None:
        """Block until stop() is called (or the process is signalled)."""
        self.start()
        try:
            while not self._stop.wait(0.5):
                pass
        finally:
            self.stop()

    @property
    def output_port(self) -> int:
        return self._sender.port if self._sender else 0

    @property
    def output_advertisement(self) -> SourceAdvertisement | None:
        return self._sender.advertisement if self._sender else None

    # -- stats -------------------------------------------------------------

    def snapshot_stats(self) -> RelayStats:
        with self._lock:
            return RelayStats(
                frames_passed=dict(self._stats.frames_passed),
                windows_produced=self._stats.windows_produced,
                windows_tagged=self._stats.windows_tagged,
                windows_dropped=self._window_queue.dropped
                + self._stats.tagger_failures,
                metadata_emitted=self._stats.metadata_emitted,
                tagger_failures=self._stats.tagger_failures,
                reconnects=self._stats.reconnects,
                frame_ring_dropped=self._assembler.dropped_frames,
                passthrough_latency=self._passthrough_lat.stats(),
                inference_ms=self._inference_lat.stats(),
            )

    def _stats_loop(self) -> None:
        while not self._stop.wait(self.cfg.stats_interval):
            print(self.snapshot_stats().to_json(), file=sys.stderr, flush=True)

    # -- input side --------------------------------------------------------

    def _resolve_input(self):
        source = self.cfg.input
        if isinstance(source, SourceAdvertisement):
            return source.address
        if isinstance(source, tuple):
            return source
        mode, a, b = parse_source(source)
        if mode == "direct":
            return (a, b)
        if self._finder is None:
            self._finder = Finder(port=self.cfg.discovery_port)
        ad = self._finder.wait_for(a, b, timeout=self.cfg.connect_timeout)
        if ad is None:
            raise ConnectError(f"source {a}/{b} not discovered")
        return ad.address

    def _ingest_loop(self) -> None:
        backoff = _RECONNECT_BASE
        while not self._stop.is_set():
            try:
                address = self._resolve_input()
                receiver = Receiver.connect(address, timeout=self.cfg.connect_timeout)
            except (ConnectError, OSError, ValueError) as exc:
                logger.warning("input connect failed (%s); retrying in %.1fs", exc, backoff)
                self._drain_metadata()
                if self._stop.wait(backoff):
                    return
                backoff = min(backoff * 2, _RECONNECT_CAP)
                continue
            logger.info("relay connected to input at %s", receiver.peer_address)
            backoff = _RECONNECT_BASE
            try:
                self._pump(receiver)
            except (frames.FrameError, OSError) as exc:
                logger.warning("input stream error: %s", exc)
            finally:
                receiver.close()
            if not self._stop.is_set():
                with self._lock:
                    self._stats.reconnects += 1

    def _pump(self, receiver: Receiver) -> None:
        while not self._stop.is_set():
            frame = receiver.recv_frame(timeout=self.cfg.recv_timeout)
            if frame is transport.TIMEOUT:
                self._drain_metadata()
                continue
            if frame is transport.END_OF_STREAM:
                logger.info("input stream ended")
                return
            started = time.perf_counter_ns()
            self._sender.send_frame(frame)
            self._passthrough_lat.record((time.perf_counter_ns() - started) / 1000.0)
            with self._lock:
                self._stats.frames_passed[_kind_name(frame)] += 1
            if isinstance(frame, frames.AudioFrame):
                self._assembler.push_frame(frame)
                for window in self._assembler.take_ready_windows():
                    with self._lock:
                        self._stats.windows_produced += 1
                    self._window_queue.put(window)
            self._drain_metadata()

    def _drain_metadata(self) -> None:
        while True:
            item = self._metadata_queue.get(timeout=0)
            if item is None:
                return
            self._sender.send_frame(item)
            with self._lock:
                self._stats.metadata_emitted += 1

    # -- analysis side -----------------------------------------------------

    def _analysis_loop(self) -> None:
        source_name = self.cfg.output_name
        while not self._stop.is_set():
            window = self._window_queue.get(timeout=0.1)
            if window is None:
                continue
            try:
                result = self._tagger.tag(window)
            except TaggerUnavailable as exc:
                # Keep relaying; this window simply produces no metadata.
                logger.warning("tagger unavailable, window skipped: %s", exc)
                with self._lock:
                    self._stats.tagger_failures += 1
                continue
            self._inference_lat.record(result.inference_ms * 1000.0)
            with self._lock:
                self._stats.windows_tagged += 1
            self._metadata_queue.put(build_metadata_xml(result, source_name))


def _kind_name(frame) -> str:
    return {0: "audio", 1: "video", 2: "metadata"}[frame.kind]


def run_relay(cfg: RelayConfig) -> None:
    """Build and run a relay until interrupted."""
    Relay(cfg).run()
