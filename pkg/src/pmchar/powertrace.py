"""External power traces: ingestion, schedule alignment, inner-window averages.

Canonical trace format is a two-column CSV ``timestamp_ns,power_w`` with
optional ``#`` comment lines. Each probe configuration is held for 10 s and
averaged over its inner 8 s, which absorbs clock offsets between analyzer and
host of up to almost a second.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NOMINAL_RATE = 20.0
CONFIG_SECONDS = 10.0
EDGE_SECONDS = 1.0
NS = 1_000_000_000


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class PowerTrace:
    timestamps: np.ndarray  # ns, int64, strictly increasing
    power: np.ndarray  # W
    rate: float = NOMINAL_RATE

    def __post_init__(self) -> None:
        if len(self.timestamps) != len(self.power):
            raise TraceError("timestamp and power arrays differ in length")

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def start(self) -> int:
        return int(self.timestamps[0])

    @property
    def end(self) -> int:
        return int(self.timestamps[-1])

    def shifted(self, offset_ns: int) -> "PowerTrace":
        return PowerTrace(self.timestamps + int(offset_ns), self.power, self.rate)

    def save(self, path: Path | str, header: dict | None = None) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            for k, v in (header or {}).items():
                fh.write(f"# {k}={v}\n")
            fh.write("timestamp_ns,power_w\n")
            for t, p in zip(self.timestamps, self.power):
                fh.write(f"{int(t)},{p:.6f}\n")
        return path


def check_rate(timestamps: np.ndarray, rate: float = NOMINAL_RATE, window_s: float = CONFIG_SECONDS,
               tolerance: float = 0.10) -> None:
    """Every complete ``window_s`` window must hold rate×window samples ±10 %."""
    t = np.asarray(timestamps)
    if t.size < 2 or t[-1] - t[0] < window_s * NS:
        span = (t[-1] - t[0]) / NS if t.size >= 2 else 0.0
        if t.size >= 2 and span > 0:
            observed = (t.size - 1) / span
            if abs(observed - rate) > tolerance * rate:
                raise TraceError(f"sample rate {observed:.2f}/s outside {rate}/s ±{tolerance:.0%}")
        return
    w = int(window_s * NS)
    starts = np.arange(t[0], t[-1] - w + 1, w // 2)
    lo = np.searchsorted(t, starts, side="left")
    hi = np.searchsorted(t, starts + w, side="left")
    counts = hi - lo
    expected = rate * window_s
    bad = np.flatnonzero(np.abs(counts - expected) > tolerance * expected)
    if bad.size:
        i = int(bad[0])
        raise TraceError(
            f"sample rate outside {rate}/s ±{tolerance:.0%}: {counts[i]} samples in the {window_s:g} s window "
            f"starting at {int(starts[i])} ns"
        )


def load_trace(path: Path | str, rate: float = NOMINAL_RATE, check: bool = True) -> PowerTrace:
    """Parse a trace file; every violation names its line."""
    path = Path(path)
    ts: list[int] = []
    pw: list[float] = []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = [p.strip() for p in s.split(",")]
            if parts[0] == "timestamp_ns" and not ts:
                continue
            if len(parts) != 2:
                raise TraceError(f"{path}:{lineno}: expected 'timestamp_ns,power_w', got {s!r}")
            try:
                t, p = int(parts[0]), float(parts[1])
            except ValueError:
                raise TraceError(f"{path}:{lineno}: malformed values {s!r}") from None
            if ts and t <= ts[-1]:
                kind = "duplicate" if t == ts[-1] else "non-monotone"
                raise TraceError(f"{path}:{lineno}: {kind} timestamp {t}")
            ts.append(t)
            pw.append(p)
    if not ts:
        raise TraceError(f"{path}: empty trace")
    trace = PowerTrace(np.array(ts, dtype=np.int64), np.array(pw), rate)
    if check:
        check_rate(trace.timestamps, rate)
    return trace


@dataclass(frozen=True)
class ScheduleEntry:
    config_id: str
    start_ns: int
    end_ns: int


@dataclass(frozen=True)
class MergedWindow:
    config_id: str
    start_ns: int
    end_ns: int
    mean_w: float
    count: int
    insufficient: bool


def validate_schedule(schedule: Sequence[ScheduleEntry], duration_s: float = CONFIG_SECONDS,
                      tolerance: float = 0.05) -> None:
    prev_end = None
    for e in sorted(schedule, key=lambda e: e.start_ns):
        length = (e.end_ns - e.start_ns) / NS
        if abs(length - duration_s) > tolerance * duration_s:
            raise TraceError(f"config {e.config_id}: interval {length:.3f} s is not {duration_s:g} s ±{tolerance:.0%}")
        if prev_end is not None and e.start_ns < prev_end:
            raise TraceError(f"config {e.config_id}: overlaps the previous interval")
        prev_end = e.end_ns


def merge(trace: PowerTrace, schedule: Sequence[ScheduleEntry], edge_s: float = EDGE_SECONDS,
          duration_s: float = CONFIG_SECONDS) -> list[MergedWindow]:
    """Mean power of each configuration over its inner window."""
    validate_schedule(schedule, duration_s)
    if not len(trace):
        raise TraceError("empty trace")
    out = []
    edge = int(edge_s * NS)
    slack = 1.5 * NS / trace.rate  # the last sample may precede the end by up to one period
    for e in schedule:
        if e.start_ns < trace.start - slack or e.end_ns > trace.end + slack:
            raise TraceError(f"config {e.config_id}: schedule interval lies outside the trace time range")
        lo, hi = e.start_ns + edge, e.end_ns - edge
        i = np.searchsorted(trace.timestamps, lo, side="left")
        j = np.searchsorted(trace.timestamps, hi, side="right")
        count = int(j - i)
        mean = float(trace.power[i:j].mean()) if count else float("nan")
        needed = 0.8 * trace.rate * (hi - lo) / NS
        out.append(MergedWindow(e.config_id, lo, hi, mean, count, count < needed))
    return out


def write_schedule(path: Path | str, schedule: Iterable[ScheduleEntry]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config_id", "start_ns", "end_ns"])
        for e in schedule:
            w.writerow([e.config_id, e.start_ns, e.end_ns])
    return path


def read_schedule(path: Path | str) -> list[ScheduleEntry]:
    out = []
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            out.append(ScheduleEntry(row[0], int(row[1]), int(row[2])))
        except (IndexError, ValueError):
            raise TraceError(f"{path}: schedule row {lineno} malformed: {row!r}") from None
    return out


def sim_power_stream(backend, rate: float = NOMINAL_RATE, start_ns: float | None = None,
                     end_ns: float | None = None, noise_w: float | None = None) -> PowerTrace:
    """Sample the simulated system power history at ``rate``.

    Noise is Gaussian with the model's σ unless ``noise_w`` overrides it, drawn
    from a generator derived from the backend seed.
    """
    if not getattr(backend, "is_simulated", False):
        raise TraceError("synthetic power streams exist only for the simulated backend")
    start = 0.0 if start_ns is None else float(start_ns)
    end = float(backend.now) if end_ns is None else min(float(end_ns), float(backend.now))
    step = NS / rate
    n = max(int(np.ceil((end - start) / step - 1e-9)), 0)  # samples cover [start, end)
    t = start + step * np.arange(n)
    p = backend.power_at(t)
    sigma = backend.model.power_noise_w if noise_w is None else noise_w
    if sigma > 0:
        p = p + sigma * backend.noise_stream().standard_normal(n)
    return PowerTrace(np.round(t).astype(np.int64), p, rate)
