"""Threshold calibration, channel rates, histograms, sweeps and taxonomy."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction
from typing import Sequence

from .channel import BitSamples, ChannelParams, NoiseModel, channel_config, transmit
from .core import CoreConfig, OpClass, Program
from .sim import Trace

NOMINAL_CLOCK_HZ = 3.0e9
BYTES_PER_KB = 1024


class AnalysisError(ValueError):
    pass


def percentile(samples: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the ceil(p*N)-th smallest sample (1-based)."""
    if not samples:
        raise AnalysisError("percentile of empty sample list")
    ordered = sorted(samples)
    rank = max(1, math.ceil(p * len(ordered)))
    return ordered[rank - 1]


def median(samples: Sequence[float]) -> float:
    return percentile(samples, 0.5)


def calibrate(samples0: Sequence[float], samples1: Sequence[float]) -> float:
    """Decision threshold separating '0' timings from '1' timings.

    Midpoint of p99 of the zeros and p1 of the ones when those are ordered,
    otherwise midpoint of the two medians.
    """
    if not samples0 or not samples1:
        raise AnalysisError("calibrate needs non-empty sample lists for both bits")
    hi0 = percentile(samples0, 0.99)
    lo1 = percentile(samples1, 0.01)
    if hi0 < lo1:
        return (hi0 + lo1) / 2
    return (median(samples0) + median(samples1)) / 2


@dataclass(frozen=True)
class ChannelStats:
    threshold: float
    errors: int
    total: int
    transfer_rate_bits_per_cycle: Fraction
    clock_hz: float
    median0: float | None
    median1: float | None
    p99_0: float | None
    p1_1: float | None

    @property
    def error_rate(self) -> float:
        return self.errors / self.total

    @property
    def transfer_rate_kbps(self) -> float:
        return float(self.transfer_rate_bits_per_cycle) * self.clock_hz / (8 * BYTES_PER_KB)


def split_by_bit(bit_samples: Sequence[BitSamples]) -> tuple[list[int], list[int]]:
    zeros: list[int] = []
    ones: list[int] = []
    for bs in bit_samples:
        (ones if bs.bit else zeros).extend(bs.samples)
    return zeros, ones


def rates(
    bit_samples: Sequence[BitSamples],
    threshold: float,
    clock_hz: float = NOMINAL_CLOCK_HZ,
) -> ChannelStats:
    """Classify every trial against ``threshold`` (<= means 0).

    Transfer rate divides the number of transmitted bits (one per trial) by
    the summed measured cycles of all trials.
    """
    if not bit_samples:
        raise AnalysisError("rates needs at least one BitSamples")
    if not math.isfinite(threshold):
        raise AnalysisError("threshold must be finite")
    errors = total = cycles = 0
    for bs in bit_samples:
        for s in bs.samples:
            errors += (s > threshold) != bool(bs.bit)
            total += 1
            cycles += s
    if total == 0:
        raise AnalysisError("no samples")
    zeros, ones = split_by_bit(bit_samples)
    return ChannelStats(
        threshold=threshold,
        errors=errors,
        total=total,
        transfer_rate_bits_per_cycle=Fraction(total, cycles) if cycles else Fraction(0),
        clock_hz=clock_hz,
        median0=median(zeros) if zeros else None,
        median1=median(ones) if ones else None,
        p99_0=percentile(zeros, 0.99) if zeros else None,
        p1_1=percentile(ones, 0.01) if ones else None,
    )


def histogram(samples: Sequence[int], bin_width: int = 1) -> list[tuple[int, float]]:
    """Probability mass per bin; bins start at min(samples) and tile to the max."""
    if bin_width < 1:
        raise AnalysisError("bin_width must be >= 1")
    if not samples:
        raise AnalysisError("histogram of empty sample list")
    lo = min(samples)
    nbins = (max(samples) - lo) // bin_width + 1
    counts = [0] * nbins
    for s in samples:
        counts[(s - lo) // bin_width] += 1
    n = len(samples)
    return [(lo + i * bin_width, c / n) for i, c in enumerate(counts)]


@dataclass(frozen=True)
class SweepRow:
    n_divs: int
    median0: float
    median1: float
    diff: float
    bits_per_cycle: Fraction
    error_rate: float
    kbps: float


def sweep_receiver_length(
    lengths: Sequence[int],
    params: ChannelParams,
    config: CoreConfig,
    noise: NoiseModel = NoiseModel(),
    seed: int = 0,
    clock_hz: float = NOMINAL_CLOCK_HZ,
) -> list[SweepRow]:
    """One transmit/calibrate/rates pass per receiver chain length."""
    if not lengths:
        raise AnalysisError("lengths must be non-empty")
    rows = []
    for n in lengths:
        p = replace(params, n_recv_divs=n)
        samples = transmit(p, channel_config(p, config), noise, seed)
        zeros, ones = split_by_bit(samples)
        if not zeros or not ones:
            raise AnalysisError("sweep needs secret_bits containing both 0 and 1")
        st = rates(samples, calibrate(zeros, ones), clock_hz)
        rows.append(SweepRow(
            n, st.median0, st.median1, st.median1 - st.median0,
            st.transfer_rate_bits_per_cycle, st.error_rate, st.transfer_rate_kbps,
        ))
    return rows


def non_decreasing(values: Sequence[float]) -> bool:
    return all(a <= b for a, b in zip(values, values[1:]))


def non_increasing(values: Sequence[float]) -> bool:
    return all(a >= b for a, b in zip(values, values[1:]))


# --- CSV -------------------------------------------------------------------

def _csv(header: str, columns: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    buf = io.StringIO()
    buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def stats_to_csv(stats: ChannelStats, header: str = "") -> str:
    cols = ["threshold", "errors", "total", "error_rate", "bits_per_cycle",
            "kbps_nominal", "median0", "median1", "p99_0", "p1_1"]
    row = [stats.threshold, stats.errors, stats.total, f"{stats.error_rate:.6f}",
           f"{float(stats.transfer_rate_bits_per_cycle):.9f}", f"{stats.transfer_rate_kbps:.3f}",
           stats.median0, stats.median1, stats.p99_0, stats.p1_1]
    return _csv(header, cols, [row])


def sweep_to_csv(rows: Sequence[SweepRow], header: str = "") -> str:
    cols = ["n_divs", "median0", "median1", "diff", "bits_per_cycle", "kbps_nominal", "error_rate"]
    return _csv(header, cols, [
        [r.n_divs, r.median0, r.median1, r.diff, f"{float(r.bits_per_cycle):.9f}",
         f"{r.kbps:.3f}", f"{r.error_rate:.6f}"]
        for r in rows
    ])


def histogram_to_csv(hist: Sequence[tuple[int, float]], header: str = "") -> str:
    return _csv(header, ["bin_start", "probability"], [[b, f"{p:.9f}"] for b, p in hist])


# --- taxonomy ---------------------------------------------------------------

class Direction(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


class Timing(str, Enum):
    INCLUSIVE = "inclusive"
    EXCLUSIVE = "exclusive"


class ChannelKind(str, Enum):
    STATEFUL = "stateful"
    CONCURRENT = "concurrent"


@dataclass(frozen=True)
class Taxonomy:
    direction: Direction
    timing: Timing
    channel_kind: ChannelKind

    def __str__(self) -> str:
        return f"{self.direction.value} / {self.timing.value} / {self.channel_kind.value}"


def _delays(t, r) -> bool:
    """Transient ``t`` sat in the unit when older retired ``r`` entered it."""
    if t.fu_kind is None or t.fu_kind != r.fu_kind or r.seq >= t.seq:
        return False
    if t.issue_cycle is None or r.issue_cycle is None or r.complete_cycle is None:
        return False
    end = t.end_cycle
    return t.issue_cycle < r.issue_cycle and end is not None and r.issue_cycle < end


def _overlaps(t, r) -> bool:
    if t.fu_kind is None or t.fu_kind != r.fu_kind:
        return False
    if t.issue_cycle is None or r.issue_cycle is None:
        return False
    t_end, r_end = t.end_cycle, r.complete_cycle
    if t_end is None or r_end is None:
        return False
    return t.issue_cycle < r_end and r.issue_cycle < t_end


def classify(program: Program, trace: Trace) -> Taxonomy:
    """Place a simulated attack in the direction/timing/channel taxonomy.

    Backward: a transient µop occupied a unit when an older retired µop
    entered it. Inclusive: TimerStart is older and TimerStop younger than
    every transient µop. Concurrent: transient and retired µops overlapped
    on a unit, so the effect needs simultaneous execution; without any such
    overlap a timing effect could only come from state left behind.
    """
    transients = trace.transients()
    if not transients:
        raise AnalysisError("no transient µops in trace; attack is unclassifiable")
    retired = trace.retired()
    backward = any(_delays(t, r) for t in transients for r in retired)
    first_t = min(t.seq for t in transients)
    last_t = max(t.seq for t in transients)
    start = next((r.seq for r in trace.records if r.op is OpClass.TIMER_START), None)
    stop = next((r.seq for r in trace.records if r.op is OpClass.TIMER_STOP), None)
    inclusive = start is not None and stop is not None and start < first_t and stop > last_t
    concurrent = any(_overlaps(t, r) for t in transients for r in retired)
    return Taxonomy(
        Direction.BACKWARD if backward else Direction.FORWARD,
        Timing.INCLUSIVE if inclusive else Timing.EXCLUSIVE,
        ChannelKind.CONCURRENT if concurrent else ChannelKind.STATEFUL,
    )
