"""Query-encoding throughput/latency benchmark.

Protocol: per run, a warmup pass (excluded from timing), then the
configured number of queries encoded strictly sequentially at the
configured batch size, each item timed with the monotonic
high-resolution clock. Per-run statistics use linear-interpolation
percentiles; cross-run aggregates use the sample standard deviation
(n-1) and a 1.96 * stdev / sqrt(n) 95% confidence interval, with
Lower/High at mean -/+ CI.

full_time is the sum of per-item latencies, so items_per_sec *
full_time equals the timed item count by construction. The measured
path runs on a single thread; a reentrancy guard rejects overlapping
benchmark invocations.
"""

import csv
import json
import math
import threading
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .encoder import EncoderWeights, encode

COLUMNS = ("items/sec", "Full Time", "Mean Time", "95th", "50th", "5th", "99th", "75th")
AGGREGATE_ROWS = ("average", "stdev", "CI", "Lower", "High")

_bench_lock = threading.Lock()


@dataclass(frozen=True)
class BenchConfig:
    num_queries: int = 6500
    batch_size: int = 1
    max_len: int = 32
    runs: int = 5
    warmup_queries: int = 50

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.num_queries < 1:
            raise ValueError("num_queries must be >= 1")
        if self.warmup_queries < 0:
            raise ValueError("warmup_queries must be >= 0")


@dataclass(frozen=True)
class RunStats:
    items_per_sec: float
    full_time: float
    mean_time: float
    p95: float
    p50: float
    p5: float
    p99: float
    p75: float
    num_items: Optional[int] = None

    def __post_init__(self):
        if not (self.p5 <= self.p50 <= self.p75 <= self.p95 <= self.p99):
            raise ValueError("percentiles must be ordered p5<=p50<=p75<=p95<=p99")
        if self.num_items is not None:
            got = self.items_per_sec * self.full_time
            if abs(got - self.num_items) > 1e-3 * self.num_items:
                raise ValueError(f"items_per_sec * full_time = {got}, "
                                 f"expected {self.num_items} within 0.1%")

    def as_row(self):
        return (self.items_per_sec, self.full_time, self.mean_time,
                self.p95, self.p50, self.p5, self.p99, self.p75)

    @classmethod
    def from_row(cls, row, num_items=None):
        ips, ft, mt, p95, p50, p5, p99, p75 = row
        return cls(ips, ft, mt, p95, p50, p5, p99, p75, num_items)


@dataclass(frozen=True)
class AggregateStats:
    average: tuple
    stdev: tuple
    ci95: tuple
    lower: tuple
    high: tuple
    runs: int
    single_run: bool = False  # stdev/CI are 0 by convention when runs == 1

    def row(self, name):
        return {"average": self.average, "stdev": self.stdev, "CI": self.ci95,
                "Lower": self.lower, "High": self.high}[name]


def percentile(samples: Sequence[float], p: float) -> float:
    """Linear interpolation between closest ranks at position (n-1)*p/100."""
    if len(samples) == 0:
        raise ValueError("samples must be nonempty")
    if not 0.0 <= p <= 100.0:
        raise ValueError("p must lie in [0, 100]")
    ordered = sorted(samples)
    pos = (len(ordered) - 1) * p / 100.0
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(ordered) - 1)
    frac = pos - lo
    return ordered[lo] + frac * (ordered[hi] - ordered[lo])


def stats_from_latencies(latencies: Sequence[float]) -> RunStats:
    n = len(latencies)
    full_time = float(sum(latencies))
    return RunStats(
        items_per_sec=n / full_time,
        full_time=full_time,
        mean_time=full_time / n,
        p95=percentile(latencies, 95), p50=percentile(latencies, 50),
        p5=percentile(latencies, 5), p99=percentile(latencies, 99),
        p75=percentile(latencies, 75),
        num_items=n,
    )


def aggregate(runs: List[RunStats]) -> AggregateStats:
    """Per column: mean, sample stdev (n-1), ci95 = 1.96*stdev/sqrt(n)."""
    if not runs:
        raise ValueError("need at least one run")
    n = len(runs)
    table = np.array([r.as_row() for r in runs], dtype=np.float64)
    average = table.mean(axis=0)
    if n > 1:
        stdev = table.std(axis=0, ddof=1)
    else:
        stdev = np.zeros(table.shape[1])
    ci95 = 1.96 * stdev / math.sqrt(n)
    return AggregateStats(
        average=tuple(average), stdev=tuple(stdev), ci95=tuple(ci95),
        lower=tuple(average - ci95), high=tuple(average + ci95),
        runs=n, single_run=(n == 1),
    )


def speedup(candidate_qps: float, baseline_qps: float) -> float:
    """Throughput ratio candidate/baseline (report to 2 decimals)."""
    if baseline_qps <= 0:
        raise ValueError("baseline must be positive")
    return candidate_qps / baseline_qps


def _check_clock():
    resolution = time.get_clock_info("perf_counter").resolution
    if resolution > 1e-6:
        raise RuntimeError(
            f"monotonic clock resolution {resolution:g}s is coarser than 1us; "
            "latency percentiles would be meaningless")


def _cycle(queries, count):
    out = []
    while len(out) < count:
        out.extend(queries[:count - len(out)])
    return out


def run_benchmark(encoder: Union[EncoderWeights, Callable], queries: Sequence[str],
                  config: BenchConfig) -> List[RunStats]:
    """Time query encoding per the benchmark protocol; one RunStats per run.

    `encoder` is either EncoderWeights (timed through encode()) or any
    callable taking a list of texts. Queries cycle if fewer than
    num_queries are supplied.
    """
    if not queries:
        raise ValueError("queries must be nonempty")
    _check_clock()
    if isinstance(encoder, EncoderWeights):
        weights = encoder
        max_len = min(config.max_len, weights.config.max_seq_len)

        def encode_fn(texts):
            return encode(weights, texts, max_len=max_len, batch_size=len(texts))
    else:
        encode_fn = encoder

    if not _bench_lock.acquire(blocking=False):
        raise RuntimeError("benchmark already running; overlapping encode calls "
                           "are not allowed in benchmark mode")
    try:
        timed = _cycle(list(queries), config.num_queries)
        warmup = _cycle(list(queries), config.warmup_queries)
        results = []
        for _ in range(config.runs):
            for start in range(0, len(warmup), config.batch_size):
                encode_fn(warmup[start:start + config.batch_size])
            latencies = []
            for start in range(0, len(timed), config.batch_size):
                chunk = timed[start:start + config.batch_size]
                t0 = time.perf_counter()
                encode_fn(chunk)
                dt = time.perf_counter() - t0
                latencies.extend([dt / len(chunk)] * len(chunk))
            results.append(stats_from_latencies(latencies))
        return results
    finally:
        _bench_lock.release()


def _format_cell(column: str, value: float) -> str:
    if column in ("items/sec", "Full Time"):
        return f"{value:.3f}"
    return f"{value:.2E}"


def emit_report(runs: List[RunStats], aggregates: AggregateStats, path, fmt="csv"):
    """Write the benchmark table: Run 1..n rows then average/stdev/CI/Lower/High."""
    if fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["Run", *COLUMNS])
            for i, run in enumerate(runs, start=1):
                writer.writerow([f"Run {i}", *(_format_cell(c, v)
                                               for c, v in zip(COLUMNS, run.as_row()))])
            for name in AGGREGATE_ROWS:
                writer.writerow([name, *(_format_cell(c, v)
                                         for c, v in zip(COLUMNS, aggregates.row(name)))])
    elif fmt == "json":
        doc = {
            "columns": list(COLUMNS),
            "runs": [dict(zip(COLUMNS, run.as_row())) for run in runs],
            "aggregates": {name: dict(zip(COLUMNS, aggregates.row(name)))
                           for name in AGGREGATE_ROWS},
            "single_run": aggregates.single_run,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def parse_report_csv(path):
    """Inverse of emit_report(fmt="csv") within formatting precision."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["Run", *COLUMNS]:
        raise ValueError(f"unexpected header {rows[0]}")
    runs = []
    aggregates = {}
    for row in rows[1:]:
        label, values = row[0], [float(v) for v in row[1:]]
        if label.startswith("Run "):
            runs.append(RunStats.from_row(values))
        else:
            aggregates[label] = tuple(values)
    return runs, aggregates


def read_report_qps(path) -> float:
    """Average items/sec from a JSON benchmark report."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return float(doc["aggregates"]["average"]["items/sec"])


def emit_figure_data(points: List[dict], path, fmt="csv"):
    """Throughput vs relative accuracy pairs for external plotting.

    Each point is {label, qps, accuracy, baseline_accuracy, [series]};
    the emitted relative accuracy is 100 * accuracy/baseline_accuracy.
    """
    rows = []
    for p in points:
        if p["baseline_accuracy"] <= 0:
            raise ValueError("baseline accuracy must be positive")
        rows.append({
            "series": p.get("series", ""),
            "label": p["label"],
            "qps": p["qps"],
            "relative_accuracy": 100.0 * p["accuracy"] / p["baseline_accuracy"],
        })
    if fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["series", "label", "qps", "relative_accuracy"])
            for r in rows:
                writer.writerow([r["series"], r["label"], f"{r['qps']:.3f}",
                                 f"{r['relative_accuracy']:.2f}"])
    elif fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
            fh.write("\n")
    else:
        raise ValueError(f"unknown figure format {fmt!r}")
    return rows
