"""Tagger latency as a function of analysis buffer size, emitted as CSV.

For each buffer size the harness renders a test signal of exactly that
length, runs warmup repetitions (excluded), then times tag() with the
monotonic clock. The headline statistic is the median; mean/p95/min/max
ride along because shared machines are noisy. write_csv prefixes rows
with ``# tagger=`` and ``# host=`` comment lines so results stay
attributable to the hardware that produced them.
"""

from __future__ import annotations

import platform
import statistics
import time
from dataclasses import dataclass, field, replace

from scipy import stats as _scipy_stats

from .sources import SignalSpec, render
from .tagging import make_tagger
from .windowing import SampleWindow

DEFAULT_REPETITIONS = 30
DEFAULT_WARMUP = 3
DEFAULT_MAX_MULTIPLE = 96


def default_buffer_sizes() -> tuple[int, ...]:
    return tuple(1024 * k for k in range(1, DEFAULT_MAX_MULTIPLE + 1))


class BenchAborted(Exception):
    """Tagger failed mid-run; ``records`` holds everything measured so far."""

    def __init__(self, message: str, records: list):
        super().__init__(message)
        self.records = records


@dataclass
class BenchPlan:
    buffer_sizes: tuple[int, ...] = field(default_factory=default_buffer_sizes)
    repetitions: int = DEFAULT_REPETITIONS
    warmup: int = DEFAULT_WARMUP
    signal: SignalSpec = field(
        default_factory=lambda: SignalSpec.sine(440.0, amplitude=0.5)
    )
    tagger: object = "reference"
    sample_rate_hz: int = 48000

    def __post_init__(self):
        if not self.buffer_sizes or any(size <= 0 for size in self.buffer_sizes):
            raise ValueError("buffer sizes must be positive")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")


@dataclass
class LatencyRecord:
    buffer_samples: int
    window_seconds: float
    mean_ms: float
    median_ms: float
    p95_ms: float
    min_ms: float
    max_ms: float


def _percentile(ordered: list[float], p: float) -> float:
    index = min(len(ordered) - 1, max(0, round(p * (len(ordered) - 1))))
    return ordered[index]


def _make_window(plan: BenchPlan, size: int) -> SampleWindow:
    spec = replace(
        plan.signal,
        duration_s=size / plan.sample_rate_hz,
        sample_rate_hz=plan.sample_rate_hz,
        channels=1,
    )
    samples = render(spec)[0]
    assert len(samples) == size
    return SampleWindow(samples=samples, start_timestamp_100ns=0, sample_rate_hz=plan.sample_rate_hz)


def run_bench(plan: BenchPlan, *, progress=None) -> list[LatencyRecord]:
    """Measure the plan's tagger at every buffer size; single-threaded.

    Raises BenchAborted (carrying partial records) if the tagger fails.
    """
    tagger = make_tagger(plan.tagger)
    records: list[LatencyRecord] = []
    for size in sorted(plan.buffer_sizes):
        window = _make_window(plan, size)
        timings_ms: list[float] = []
        try:
            for rep in range(plan.warmup + plan.repetitions):
                started = time.perf_counter()
                tagger.tag(window)
                elapsed_ms = (time.perf_counter() - started) * 1e3
                if rep >= plan.warmup:
                    timings_ms.append(elapsed_ms)
        except Exception as exc:
            raise BenchAborted(f"tagger failed at size {size}: {exc}", records) from exc
        ordered = sorted(timings_ms)
        records.append(
            LatencyRecord(
                buffer_samples=size,
                window_seconds=size / plan.sample_rate_hz,
                mean_ms=statistics.fmean(timings_ms),
                median_ms=statistics.median(timings_ms),
                p95_ms=_percentile(ordered, 0.95),
                min_ms=ordered[0],
                max_ms=ordered[-1],
            )
        )
        if progress is not None:
            progress(records[-1])
    return records


def trend_statistic(records: list[LatencyRecord]) -> float:
    """Spearman rank correlation between buffer size and median latency."""
    sizes = [r.buffer_samples for r in records]
    medians = [r.median_ms for r in records]
    return float(_scipy_stats.spearmanr(sizes, medians).statistic)


def host_descriptor() -> str:
    uname = platform.uname()
    cpu = uname.processor or uname.machine
    return f"{uname.system} {uname.release} {cpu}"


CSV_HEADER = "buffer_samples,window_seconds,mean_ms,median_ms,p95_ms,min_ms,max_ms"


def write_csv(records: list[LatencyRecord], destination, *, tagger_name: str = "reference", host: str | None = None) -> None:
    """Write records to a path or a text file object."""
    if hasattr(destination, "write"):
        _write_csv(records, destination, tagger_name, host)
    else:
        with open(destination, "w", encoding="utf-8") as handle:
            _write_csv(records, handle, tagger_name, host)


def _write_csv(records, handle, tagger_name, host) -> None:
    handle.write(f"# tagger={tagger_name}\n")
    handle.write(f"# host={host if host is not None else host_descriptor()}\n")
    handle.write(CSV_HEADER + "\n")
    for r in records:
        row = (
            f"{r.buffer_samples},{r.window_seconds:.6g},{r.mean_ms:.6g},{r.median_ms:.6g},"
            f"{r.p95_ms:.6g},{r.min_ms:.6g},{r.max_ms:.6g}"
        )
        handle.write(row + "\n")


def read_csv(source) -> tuple[list[LatencyRecord], dict]:
    """Read back write_csv output: (records, metadata from comment lines)."""
    if hasattr(source, "read"):
        lines = source.read().splitlines()
    else:
        with open(source, "r", encoding="utf-8") as handle:
            lines = handle.read().splitlines()
    meta: dict[str, str] = {}
    records: list[LatencyRecord] = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
            continue
        if line == CSV_HEADER:
            continue
        parts = line.split(",")
        if len(parts) != 7:
            raise ValueError(f"bad CSV row: {line!r}")
        records.append(
            LatencyRecord(
                buffer_samples=int(parts[0]),
                window_seconds=float(parts[1]),
                mean_ms=float(parts[2]),
                median_ms=float(parts[3]),
                p95_ms=float(parts[4]),
                min_ms=float(parts[5]),
                max_ms=float(parts[6]),
            )
        )
    return records, meta
