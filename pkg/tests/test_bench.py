import io
import time

import pytest

from tagstream.bench import (
    BenchAborted,
    BenchPlan,
    LatencyRecord,
    read_csv,
    run_bench,
    trend_statistic,
    write_csv,
)
from tagstream.tagging import TagPrediction, TagResult, TaggerUnavailable


class FlakyTagger:
    label_set = ("Stub",)

    def __init__(self, fail_at_call):
        self.fail_at_call = fail_at_call
        self.calls = 0

    def tag(self, window):
        self.calls += 1
        if self.calls >= self.fail_at_call:
            raise TaggerUnavailable("child gone")
        return TagResult([TagPrediction("Stub", 1.0)], 0, len(window.samples),
                         window.sample_rate_hz, 0.0)


class WarmupProbeTagger:
    """Slow for the first ``slow_calls`` invocations, fast afterwards."""

    label_set = ("Stub",)

    def __init__(self, slow_calls, slow_s=0.05):
        self.slow_calls = slow_calls
        self.slow_s = slow_s
        self.calls = 0

    def tag(self, window):
        self.calls += 1
        if self.calls <= self.slow_calls:
            time.sleep(self.slow_s)
        return TagResult([TagPrediction("Stub", 1.0)], 0, len(window.samples),
                         window.sample_rate_hz, 0.0)


class TestRunBench:
    def test_single_size_single_rep(self):
        plan = BenchPlan(buffer_sizes=(1024,), repetitions=1, warmup=0)
        records = run_bench(plan)
        assert len(records) == 1
        record = records[0]
        assert record.buffer_samples == 1024
        assert record.mean_ms > 0
        assert record.window_seconds == pytest.approx(1024 / 48000)
        assert record.min_ms <= record.median_ms <= record.p95_ms <= record.max_ms

    def test_records_sorted_by_size(self):
        plan = BenchPlan(buffer_sizes=(4096, 1024, 2048), repetitions=2, warmup=0)
        records = run_bench(plan)
        assert [r.buffer_samples for r in records] == [1024, 2048, 4096]

    def test_warmup_excluded_from_statistics(self):
        tagger = WarmupProbeTagger(slow_calls=3)
        plan = BenchPlan(buffer_sizes=(1024,), repetitions=10, warmup=3, tagger=tagger)
        records = run_bench(plan)
        assert tagger.calls == 13
        assert records[0].max_ms < 25.0  # slow warmup calls never show up

    def test_abort_flushes_partial(self):
        tagger = FlakyTagger(fail_at_call=8)
        plan = BenchPlan(buffer_sizes=(1024, 2048, 4096), repetitions=5, warmup=0,
                         tagger=tagger)
        with pytest.raises(BenchAborted) as info:
            run_bench(plan)
        assert len(info.value.records) == 1  # first size finished, second died

    def test_plan_validation(self):
        with pytest.raises(ValueError):
            BenchPlan(buffer_sizes=())
        with pytest.raises(ValueError):
            BenchPlan(buffer_sizes=(0,))
        with pytest.raises(ValueError):
            BenchPlan(repetitions=0)


class TestTrend:
    def test_monotone_records_correlate(self):
        records = [
            LatencyRecord(n, n / 48000, n / 1000, n / 1000, n / 900, n / 1100, n / 800)
            for n in (1024, 2048, 4096, 8192)
        ]
        assert trend_statistic(records) == pytest.approx(1.0)

    def test_reference_tagger_scales_with_size(self):
        plan = BenchPlan(
            buffer_sizes=tuple(1024 * k for k in (1, 4, 16, 48, 96)),
            repetitions=10,
        )
        records = run_bench(plan)
        assert trend_statistic(records) > 0.9


class TestCsv:
    def test_empty_records_header_only(self):
        out = io.StringIO()
        write_csv([], out, tagger_name="reference", host="testhost")
        lines = out.getvalue().splitlines()
        assert lines == [
            "# tagger=reference",
            "# host=testhost",
            "buffer_samples,window_seconds,mean_ms,median_ms,p95_ms,min_ms,max_ms",
        ]

    def test_one_record(self):
        out = io.StringIO()
        record = LatencyRecord(48128, 48128 / 48000, 1.5, 1.25, 2.0, 1.0, 3.0)
        write_csv([record], out, tagger_name="reference", host="h")
        lines = out.getvalue().splitlines()
        assert len(lines) == 4
        assert lines[3].startswith("48128,1.00267,")

    def test_round_trip(self, tmp_path):
        records = [
            LatencyRecord(1024, 1024 / 48000, 0.123456, 0.1, 0.2, 0.05, 0.4),
            LatencyRecord(48128, 48128 / 48000, 12.3456, 11.1, 20.2, 9.05, 31.4),
        ]
        path = tmp_path / "latency.csv"
        write_csv(records, path, tagger_name="reference")
        loaded, meta = read_csv(path)
        assert meta["tagger"] == "reference"
        assert "host" in meta
        assert len(loaded) == 2
        for got, want in zip(loaded, records):
            assert got.buffer_samples == want.buffer_samples
            assert got.median_ms == pytest.approx(want.median_ms, rel=1e-5)
            assert got.mean_ms == pytest.approx(want.mean_ms, rel=1e-5)
