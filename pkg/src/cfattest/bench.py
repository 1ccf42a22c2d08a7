"""Batch-size / feedback-frequency sweeps over the signing service.

Each grid cell runs the full two-thread pipeline in verify mode for the
per-request processing times, and a channel-only transfer run over the same
ID stream for the per-ID transfer time. A baseline row times the same
workload on the uninstrumented program.
"""

from __future__ import annotations

import contextlib
import csv
import gc
import io
import statistics
import sys
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .cfg import ControlFlowGraph
from .channel import RunConfig, gated_trace, learn_reference, run_pipeline, transfer_benchmark
from .ir import InstrumentedProgram, execute
from .workload import Workload, load_program, prepare, signing_driver

BATCH_SIZES = (1, 5, 10, 50, 100, 500, 1000, 5000, 10000)
FEEDBACK_FREQUENCIES = (1, 10, 100, 1000)
TABLE_BATCH_SIZES = (1, 10, 100, 1000, 10000)

CSV_HEADER = (
    "batch_size",
    "feedback_freq",
    "prover_us_per_req",
    "verifier_us_per_req",
    "ns_per_id_transfer",
    "ids_total",
    "batches_total",
)

BASELINE = 0  # batch_size/feedback_freq value marking the uninstrumented row

# Step-to-step slack for the monotone overhead shape. Once a batch outgrows a
# single request, END flushes it early and further growth changes nothing, so
# neighbouring cells only differ by measurement noise.
MONOTONE_SLACK = 0.15
TRANSFER_SWITCH_INTERVAL = 0.0002  # seconds


@dataclass
class BenchmarkGrid:
    batch_sizes: Sequence[int] = BATCH_SIZES
    feedback_frequencies: Sequence[int] = FEEDBACK_FREQUENCIES
    repetitions: int = 1
    requests: int = 40
    seed: int = 0
    queue_capacity: int = 64
    transfer_ids: int = 20000  # length of the ID stream pushed through the channel-only runs

    def __post_init__(self):
        if not self.batch_sizes or not self.feedback_frequencies:
            raise ValueError("benchmark grid must not be empty")
        if self.repetitions < 1 or self.requests < 1 or self.transfer_ids < 1:
            raise ValueError("repetitions, requests and transfer_ids must be >= 1")
        if min(self.batch_sizes) < 1 or min(self.feedback_frequencies) < 1:
            raise ValueError("batch sizes and frequencies must be >= 1")


@dataclass
class BenchRow:
    batch_size: int
    feedback_freq: int
    prover_us_per_req: float
    verifier_us_per_req: float
    ns_per_id_transfer: float
    ids_total: int
    batches_total: int
    # median per-request overhead against uninstrumented runs bracketing this cell;
    # kept in memory only, the CSV schema is fixed
    local_overhead: Optional[float] = field(default=None, compare=False)

    @property
    def is_baseline(self) -> bool:
        return self.batch_size == BASELINE

    def as_csv(self) -> list[str]:
        return [
            str(self.batch_size),
            str(self.feedback_freq),
            f"{self.prover_us_per_req:.3f}",
            f"{self.verifier_us_per_req:.3f}",
            f"{self.ns_per_id_transfer:.3f}",
            str(self.ids_total),
            str(self.batches_total),
        ]


@dataclass
class TrendCheck:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


@dataclass
class BenchContext:
    iprog: InstrumentedProgram
    baseline: InstrumentedProgram
    cfg: ControlFlowGraph
    workload: Workload = field(repr=False)
    stream: list[int] = field(default_factory=list, repr=False)  # the IDs the workload emits


def signing_context(requests: int = 40, seed: int = 0) -> BenchContext:
    iprog = prepare(load_program("builtin:signing"))
    workload = Workload.signing(requests, seed, invalid_rate=0.0)
    stream = [v for inputs in workload for v in gated_trace(iprog, inputs)]
    return BenchContext(
        iprog,
        InstrumentedProgram.uninstrumented(iprog.program),
        learn_reference(iprog, signing_driver()),
        workload,
        stream,
    )


def _quiet(fn):
    enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        return fn()
    finally:
        if enabled:
            gc.enable()


@contextlib.contextmanager
def _fine_switching(interval: float = TRANSFER_SWITCH_INTERVAL):
    # a transfer run lasts a few GIL switch intervals at the default 5 ms, so the
    # prover/verifier handoff pattern would dominate; switch often so it averages out
    previous = sys.getswitchinterval()
    sys.setswitchinterval(interval)
    try:
        yield
    finally:
        sys.setswitchinterval(previous)


def _baseline_ns(ctx: BenchContext) -> list[int]:
    # CPU time, matching how the pipeline charges the prover
    times = []
    for inputs in ctx.workload:
        t0 = time.thread_time_ns()
        execute(ctx.baseline, inputs, lambda v: None)
        times.append(time.thread_time_ns() - t0)
    return times


def measure_baseline(ctx: BenchContext) -> BenchRow:
    times = _quiet(lambda: _baseline_ns(ctx))
    return BenchRow(BASELINE, BASELINE, statistics.fmean(times) / 1e3, 0.0, 0.0, 0, 0)


def transfer_stream(ctx: BenchContext, n: int) -> list[int]:
    """The workload's ID stream, cycled or cut to exactly `n` IDs."""
    src = ctx.stream
    return [src[i % len(src)] for i in range(n)]


def measure(
    ctx: BenchContext, batch_size: int, feedback_freq: int, queue_capacity: int = 64,
    transfer_ids: Optional[int] = None,
) -> BenchRow:
    """One pipeline run with a paired uninstrumented run before every request.

    The overhead is taken per request against that request's own baseline, so
    both the request mix and machine speed drift cancel out.
    """
    config = RunConfig(batch_size=batch_size, feedback_frequency=feedback_freq, queue_capacity=queue_capacity)
    result = _quiet(lambda: run_pipeline(ctx.iprog, ctx.cfg, config, ctx.workload, baseline=ctx.baseline))
    if result.error is not None:
        raise RuntimeError(f"benchmark run failed at ({batch_size}, {feedback_freq}): {result.error}")
    if result.violations:
        raise RuntimeError(f"benchmark run produced violations at ({batch_size}, {feedback_freq})")
    m = result.metrics
    ratios = [p / b - 1 for p, b in zip(m.prover_ns, m.baseline_ns)]
    ids = ctx.stream if transfer_ids is None else transfer_stream(ctx, transfer_ids)
    with _fine_switching():
        transfer = _quiet(lambda: transfer_benchmark(ids, batch_size, feedback_freq, queue_capacity))
    return BenchRow(
        batch_size, feedback_freq, m.prover_us_per_req, m.verifier_us_per_req,
        transfer.ns_per_id, m.ids_total, m.batches_total, statistics.median(ratios),
    )


def _combine(rows: list[BenchRow]) -> BenchRow:
    """Median of the repetitions; best of them for the transfer throughput."""
    first = rows[0]
    return BenchRow(
        first.batch_size,
        first.feedback_freq,
        statistics.median(r.prover_us_per_req for r in rows),
        statistics.median(r.verifier_us_per_req for r in rows),
        min(r.ns_per_id_transfer for r in rows),
        first.ids_total,
        first.batches_total,
        None if first.local_overhead is None else statistics.median(r.local_overhead for r in rows),
    )


def run_grid(grid: BenchmarkGrid, ctx: Optional[BenchContext] = None, baseline: bool = True) -> list[BenchRow]:
    ctx = ctx or signing_context(grid.requests, grid.seed)
    cells = [(s, f) for f in grid.feedback_frequencies for s in grid.batch_sizes]
    base_reps: list[BenchRow] = []
    reps: dict[tuple[int, int], list[BenchRow]] = {c: [] for c in cells}
    # whole sweeps are repeated, so slow machine drift spreads over every cell alike
    for _ in range(grid.repetitions):
        if baseline:
            base_reps.append(measure_baseline(ctx))
        for size, freq in cells:
            reps[(size, freq)].append(measure(ctx, size, freq, grid.queue_capacity, grid.transfer_ids))
    rows = [_combine(base_reps)] if baseline else []
    rows.extend(_combine(reps[c]) for c in cells)
    return rows


def transfer_grid(grid: BenchmarkGrid, ctx: Optional[BenchContext] = None) -> list[BenchRow]:
    """Channel-only sweep: per-ID transfer time for every cell, no target execution."""
    ctx = ctx or signing_context(grid.requests, grid.seed)
    cells = [(s, f) for f in grid.feedback_frequencies for s in grid.batch_sizes]
    ids = transfer_stream(ctx, grid.transfer_ids)
    best: dict[tuple[int, int], float] = {}
    batches: dict[tuple[int, int], int] = {}
    with _fine_switching():
        for _ in range(grid.repetitions):
            for size, freq in cells:
                r = _quiet(lambda: transfer_benchmark(ids, size, freq, grid.queue_capacity))
                best[(size, freq)] = min(best.get((size, freq), float("inf")), r.ns_per_id)
                batches[(size, freq)] = r.batches
    return [BenchRow(s, f, 0.0, 0.0, best[(s, f)], len(ids), batches[(s, f)]) for s, f in cells]


def write_csv(rows: Iterable[BenchRow], stream=None) -> str:
    buf = io.StringIO() if stream is None else stream
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(r.as_csv())
    return buf.getvalue() if stream is None else ""


def read_csv(text: str) -> list[BenchRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if tuple(header or ()) != CSV_HEADER:
        raise ValueError("unexpected CSV header")
    rows = []
    for rec in reader:
        if rec:
            rows.append(BenchRow(int(rec[0]), int(rec[1]), float(rec[2]), float(rec[3]),
                                 float(rec[4]), int(rec[5]), int(rec[6])))
    return rows


def _cells(rows: Iterable[BenchRow]) -> dict[tuple[int, int], BenchRow]:
    return {(r.batch_size, r.feedback_freq): r for r in rows if not r.is_baseline}


def baseline_of(rows: Iterable[BenchRow]) -> Optional[BenchRow]:
    return next((r for r in rows if r.is_baseline), None)


def overhead_table(rows: Sequence[BenchRow]) -> dict[tuple[int, int], float]:
    """Relative prover-side overhead per cell: (instrumented - baseline) / baseline.

    Freshly measured cells carry a per-request overhead against bracketing
    baseline runs; rows read back from CSV fall back to the baseline row.
    """
    base = baseline_of(rows)
    out = {}
    for k, r in _cells(rows).items():
        if r.local_overhead is not None:
            out[k] = r.local_overhead
            continue
        if base is None or base.prover_us_per_req <= 0:
            raise ValueError("overhead needs a baseline row")
        b = base.prover_us_per_req
        out[k] = (r.prover_us_per_req - b) / b
    return out


def transfer_trend(rows: Sequence[BenchRow], upto: int = 100) -> TrendCheck:
    """Per-ID transfer time falls strictly with batch size up to `upto`, at every frequency,
    and the frequency spread at large batches is small next to the batch-size spread."""
    cells = _cells(rows)
    freqs = sorted({f for _, f in cells})
    sizes = sorted({s for s, _ in cells})
    small = [s for s in sizes if s <= upto]
    problems = []
    for f in freqs:
        series = [cells[(s, f)].ns_per_id_transfer for s in small if (s, f) in cells]
        for a, b, sa, sb in zip(series, series[1:], small, small[1:]):
            if not b < a:
                problems.append(f"freq {f}: {sa}->{sb} went {a:.0f}->{b:.0f} ns")
    if 1 not in sizes or upto not in sizes:
        return TrendCheck("transfer-trend", False, f"grid lacks batch sizes 1 and {upto}")
    size_spread = min(cells[(1, f)].ns_per_id_transfer - cells[(upto, f)].ns_per_id_transfer for f in freqs)
    freq_spread = max(
        max(cells[(s, f)].ns_per_id_transfer for f in freqs) - min(cells[(s, f)].ns_per_id_transfer for f in freqs)
        for s in sizes if s >= upto
    )
    ratio = freq_spread / size_spread if size_spread > 0 else float("inf")
    if not ratio < 0.2:
        problems.append(f"frequency spread {freq_spread:.0f} ns is {ratio:.0%} of batch-size spread {size_spread:.0f} ns")
    detail = "; ".join(problems) or (
        f"strictly decreasing up to {upto} at all {len(freqs)} frequencies; "
        f"frequency spread {ratio:.1%} of batch-size spread"
    )
    return TrendCheck("transfer-trend", not problems, detail)


def overhead_trend(rows: Sequence[BenchRow], factor: float = 5.0, slack: float = MONOTONE_SLACK) -> TrendCheck:
    """Default configuration beats (1, 1) by `factor`; overhead never grows with batch size."""
    table = overhead_table(rows)
    problems = []
    if (1, 1) not in table or (10000, 10) not in table:
        return TrendCheck("overhead-trend", False, "grid lacks cells (1, 1) and (10000, 10)")
    worst, default = table[(1, 1)], table[(10000, 10)]
    ratio = worst / default if default > 0 else float("inf")
    if not ratio >= factor:
        problems.append(f"(1,1) overhead {worst:.2f}x is only {ratio:.1f} times (10000,10) {default:.2f}x")
    base = baseline_of(rows)
    freqs = sorted({f for _, f in table})
    sizes = sorted({s for s, _ in table})
    for f in freqs:
        col = [(s, table[(s, f)]) for s in sizes if (s, f) in table]
        for (sa, a), (sb, b) in zip(col, col[1:]):
            # compare request times, which stay positive even when the overhead is near zero
            if (1 + b) > (1 + a) * (1 + slack):
                problems.append(f"freq {f}: overhead rose {a:.2f}x->{b:.2f}x from batch {sa} to {sb}")
    detail = "; ".join(problems) or (
        f"(1,1) {worst:.2f}x vs (10000,10) {default:.2f}x = {ratio:.1f} times lower; "
        f"monotone within {slack:.0%} at all frequencies"
    )
    return TrendCheck("overhead-trend", not problems, detail)


def format_overhead_table(rows: Sequence[BenchRow]) -> str:
    table = overhead_table(rows)
    freqs = sorted({f for _, f in table})
    sizes = sorted({s for s, _ in table})
    out = ["batch \\ freq " + "".join(f"{f:>10}" for f in freqs)]
    for s in sizes:
        cells = "".join(f"{table[(s, f)]:>9.2f}x" if (s, f) in table else f"{'-':>10}" for f in freqs)
        out.append(f"{s:>12} " + cells)
    return "\n".join(out) + "\n"


def plot_chart(rows: Sequence[BenchRow], path: str) -> None:
    """Log-log chart: per-ID transfer time and per-request prover/verifier times."""
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    cells = _cells(rows)
    freqs = sorted({f for _, f in cells})
    panels = (
        ("ns_per_id_transfer", "transfer time per ID [ns]"),
        ("prover_us_per_req", "prover time per request [us]"),
        ("verifier_us_per_req", "verifier time per request [us]"),
    )
    fig, axes = plt.subplots(1, len(panels), figsize=(15, 4.2))
    base = baseline_of(rows)
    for ax, (attr, label) in zip(axes, panels):
        for f in freqs:
            pts = sorted((s, getattr(r, attr)) for (s, ff), r in cells.items() if ff == f)
            pts = [(s, v) for s, v in pts if v > 0]
            if pts:
                ax.plot(*zip(*pts), marker="o", label=f"feedback frequency {f}")
        if attr == "prover_us_per_req" and base is not None:
            ax.axhline(base.prover_us_per_req, color="grey", linestyle="--", label="uninstrumented")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("ID batch size")
        ax.set_ylabel(label)
        ax.grid(True, which="both", alpha=0.3)
    axes[0].legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
