"""Frequency probes: transition delay, sibling elevation, CCX coupling, memory, throttling."""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .. import analysis, kernels
from ..kernels import BackgroundLoad
from ..sysif import EnergyDomain, FreqSetting, effective_frequency
from .common import NS, ProbeContext, ProbeError, ProbeResult, ghz, preserved_state, record_columns, rows_from, wait_applied

# -- transition delay ----------------------------------------------------------


@dataclass(frozen=True)
class TransitionSample:
    index: int
    from_hz: float
    to_hz: float
    delay_us: float
    valid: bool
    discard_reason: str | None
    wait_ms: float


class _TimedLoop:
    """Minimal workload runs on one cpu, checked against calibrated runtimes."""

    def __init__(self, ctx: ProbeContext, cpu: int, iterations: int, chunk: int, band: float,
                 validate_runs: int, timeout_ms: float) -> None:
        self.ctx = ctx
        self.backend = ctx.backend
        self.cpu = cpu
        self.iterations = iterations
        self.chunk = chunk
        self.band = band
        self.validate_runs = validate_runs
        self.timeout_ns = timeout_ms * 1e6
        self.t_crit = float(stats.t.ppf(0.975, validate_runs - 1))

    def clock(self) -> float:
        if self.backend.is_simulated:
            return self.backend.now
        return float(time.perf_counter_ns())

    def batch(self, count: int):
        return kernels.run_minimal_batch(self.backend, self.cpu, self.iterations, count)

    def calibrate(self, frequency: float, runs: int = 200) -> float:
        self.backend.set_frequency(FreqSetting(self.cpu, frequency))
        wait_applied(self.ctx)
        return float(np.median(self.batch(runs)[1]))

    def until_reached(self, runtime: float, t_req: float):
        """Start time of the first run within the band, plus the runs after it."""
        lo, hi = runtime * (1 - self.band), runtime * (1 + self.band)
        while True:
            starts, durs = self.batch(self.chunk)
            hit = np.flatnonzero((durs >= lo) & (durs <= hi))
            if hit.size:
                k = int(hit[0])
                return float(starts[k]), durs[k + 1:]
            if self.clock() - t_req > self.timeout_ns:
                return None, None

    def validate(self, runtime: float, leftover: np.ndarray) -> bool:
        """95 % t-interval of the mean of the next runs must lie inside the band."""
        d = leftover[: self.validate_runs]
        if d.size < self.validate_runs:
            d = np.concatenate([d, self.batch(self.validate_runs - d.size)[1]])
        half = self.t_crit * d.std(ddof=1) / np.sqrt(d.size)
        m = d.mean()
        return bool(runtime * (1 - self.band) <= m - half and m + half <= runtime * (1 + self.band))

    def switch(self, target: float, runtime: float) -> tuple[float, bool]:
        t_req = self.clock()
        self.backend.set_frequency(FreqSetting(self.cpu, target))
        start, rest = self.until_reached(runtime, t_req)
        if start is None:
            wait_applied(self.ctx)
            return float("nan"), False
        return max(start - t_req, 0.0) / 1e3, self.validate(runtime, rest)


def freq_transition_probe(
    ctx: ProbeContext,
    from_hz: float = 2.2e9,
    to_hz: float = 1.5e9,
    n: int = 100_000,
    wait_max_ms: float = 10.0,
    wait_min_ms: float = 0.0,
    cpu: int = 0,
    iterations: int = 1250,
    chunk: int = 64,
    band: float = 0.03,
    validate_runs: int = 100,
    timeout_ms: float = 20.0,
    d_floor_us: float = 100.0,
) -> ProbeResult:
    """Time frequency switches from ``from_hz`` to ``to_hz`` with a minimal workload."""
    b = ctx.backend
    from_hz, to_hz = b.check_frequency(from_hz), b.check_frequency(to_hz)
    if not 0 <= wait_min_ms <= wait_max_ms:
        raise ProbeError("require 0 <= wait_min_ms <= wait_max_ms")
    rng = ctx.rng("freq_transition_probe")
    samples: list[TransitionSample] = []
    with preserved_state(b):
        others = [c for c in b.topology.cpus if c != cpu and b.is_online(c)]
        b.set_frequencies(others, b.min_frequency)
        loop = _TimedLoop(ctx, cpu, iterations, chunk, band, validate_runs, timeout_ms)
        with BackgroundLoad(b, [cpu], "busy_loop") if b.is_simulated else contextlib.nullcontext():
            if not b.is_simulated:
                b.pin_current_thread(cpu)
            r_to = loop.calibrate(to_hz)
            r_from = loop.calibrate(from_hz)
            if from_hz != to_hz and abs(r_to / r_from - 1) < 2 * band:
                raise ProbeError(
                    f"calibration failed: runtimes at {ghz(from_hz)} and {ghz(to_hz)} GHz are indistinguishable "
                    f"({r_from:.0f} vs {r_to:.0f} ns)"
                )
            failed_prev = False
            # every sample, the first included, follows a random wait
            wait = float(rng.uniform(wait_min_ms, wait_max_ms))
            ctx.sleep(wait / 1e3)
            for i in range(n):
                delay, ok = loop.switch(to_hz, r_to)
                _, ok_back = loop.switch(from_hz, r_from)
                good = ok and ok_back
                reason = None if good else "validation_failed"
                if good and failed_prev:
                    reason = "follows_failure"
                failed_prev = not good
                samples.append(TransitionSample(i, from_hz, to_hz, delay, reason is None, reason, wait))
                wait = float(rng.uniform(wait_min_ms, wait_max_ms))
                ctx.sleep(wait / 1e3)

    valid = np.array([s.delay_us for s in samples if s.valid])
    summary = {
        "n": n,
        "n_valid": int(valid.size),
        "n_discarded": n - int(valid.size),
        "below_floor": int((valid < d_floor_us).sum()),
        "below_floor_fraction": float((valid < d_floor_us).mean()) if valid.size else 0.0,
        "calibrated_runtime_ns": {"from": r_from, "to": r_to},
    }
    try:
        fit = analysis.fit_uniform_window(valid, d_floor=d_floor_us)
        summary["uniform_fit"] = {"d_hat_us": fit.d_hat, "T_hat_us": fit.T_hat, "ks_stat": fit.ks_stat, "n": fit.n}
    except analysis.AnalysisError as exc:
        summary["uniform_fit"] = {"error": str(exc)}
    hist = analysis.make_histogram(valid, 25.0) if valid.size else analysis.make_histogram([], 25.0)
    cols = record_columns(TransitionSample)
    return ProbeResult(
        "freq_transition_probe",
        cols,
        rows_from(samples, cols),
        params={"from_hz": from_hz, "to_hz": to_hz, "n": n, "wait_min_ms": wait_min_ms, "wait_max_ms": wait_max_ms,
                "cpu": cpu, "iterations": iterations, "band": band, "validate_runs": validate_runs},
        summary=summary,
        records=samples,
        plots={"delay_histogram": {"lower_edge_us": list(hist.edges), "count": list(hist.counts)}},
    )


def _measure_frequency(ctx: ProbeContext, cpu: int, seconds: float) -> float:
    b = ctx.backend
    a = b.read_counters(cpu)
    ctx.sleep(seconds)
    return effective_frequency(a, b.read_counters(cpu), b.nominal_frequency)


# -- sibling elevation ---------------------------------------------------------


@dataclass(frozen=True)
class SiblingRecord:
    sibling_state: str
    sibling_set_hz: float
    busy_set_hz: float
    effective_hz: float


def sibling_freq_probe(ctx: ProbeContext, cpu: int = 0, duration_s: float = 1.0) -> ProbeResult:
    """Effective frequency of a busy thread at minimum frequency for three sibling states."""
    b = ctx.backend
    f_min, f_nom = b.min_frequency, b.nominal_frequency
    sibs = [c for c in b.topology.siblings(cpu) if c != cpu]
    if not sibs:
        raise ProbeError(f"CPU {cpu} has no sibling thread")
    sib = sibs[0]
    records = []
    with preserved_state(b):
        b.set_frequencies([c for c in b.topology.cpus if b.is_online(c)], f_min)
        with BackgroundLoad(b, [cpu], "busy_loop"):
            for state, f_sib, online in (("idle", f_min, True), ("idle", f_nom, True), ("offline", f_nom, False)):
                b.set_online(sib, True)
                b.set_frequency(FreqSetting(sib, f_sib))
                if not online:
                    b.set_online(sib, False)
                wait_applied(ctx)
                eff = _measure_frequency(ctx, cpu, duration_s)
                records.append(SiblingRecord(state, f_sib, f_min, eff))
    cols = record_columns(SiblingRecord)
    return ProbeResult(
        "sibling_freq_probe",
        cols,
        rows_from(records, cols),
        params={"cpu": cpu, "sibling": sib, "duration_s": duration_s},
        summary={f"{r.sibling_state}_{ghz(r.sibling_set_hz)}GHz": ghz(r.effective_hz) for r in records},
        records=records,
    )


# -- mixed frequencies within a CCX ----------------------------------------------


@dataclass(frozen=True)
class MixedRecord:
    self_set_hz: float
    others_set_hz: float
    effective_hz: float
    effective_std_hz: float
    l3_latency_ns: float


def mixed_freq_probe(ctx: ProbeContext, duration_s: float = 120.0, interval_s: float = 1.0, ccx: int = 0,
                     chase_bytes: int = 4 << 20, repeats: int = 20) -> ProbeResult:
    """Effective frequency and L3 latency of one core for each (own, others) setting pair."""
    b = ctx.backend
    topo = b.topology
    group = topo.ccx(ccx)
    observed = group.cores[0]
    cpu = observed.cpus[0]
    other_cpus = [c for core in group.cores[1:] for c in core.cpus]
    busy = [core.cpus[0] for core in group.cores]
    records = []
    n_int = max(int(duration_s // interval_s), 1)
    with preserved_state(b):
        b.set_frequencies([c for c in topo.cpus if c not in group.cpus and b.is_online(c)], b.min_frequency)
        with BackgroundLoad(b, busy, "busy_loop"):
            for f_self in b.frequencies:
                for f_other in b.frequencies:
                    b.set_frequencies([c for c in observed.cpus if b.is_online(c)], f_self)
                    b.set_frequencies([c for c in other_cpus if b.is_online(c)], f_other)
                    wait_applied(ctx)
                    f = [_measure_frequency(ctx, cpu, interval_s) for _ in range(n_int)]
                    lat = kernels.run_pointer_chase(b, cpu, chase_bytes, repeats, seed=ctx.seed)
                    std = float(np.std(f, ddof=1)) if len(f) > 1 else 0.0
                    records.append(MixedRecord(f_self, f_other, float(np.mean(f)), std, lat))
    cols = record_columns(MixedRecord)
    table = {f"{ghz(r.self_set_hz)}/{ghz(r.others_set_hz)}": round(r.effective_hz / 1e9, 4) for r in records}
    return ProbeResult(
        "mixed_freq_probe",
        cols,
        rows_from(records, cols),
        params={"duration_s": duration_s, "interval_s": interval_s, "ccx": ccx, "chase_bytes": chase_bytes,
                "repeats": repeats},
        summary={"effective_ghz": table,
                 "l3_latency_ns": {f"{ghz(r.self_set_hz)}/{ghz(r.others_set_hz)}": r.l3_latency_ns for r in records}},
        records=records,
        plots={"coupling": {"self_ghz": [ghz(r.self_set_hz) for r in records],
                            "others_ghz": [ghz(r.others_set_hz) for r in records],
                            "effective_ghz": [r.effective_hz / 1e9 for r in records],
                            "l3_ns": [r.l3_latency_ns for r in records]}},
    )


# -- memory bandwidth and latency ------------------------------------------------


@dataclass(frozen=True)
class MemRecord:
    label: str
    n_cores: int
    bandwidth_gbs: float
    latency_ns: float


def mem_perf_probe(ctx: ProbeContext, label: str = "auto", core_counts=(1, 2, 3, 4), ccx: int = 0,
                   buffer_bytes: int = 1 << 30, latency_bytes: int = 256 << 20, repeats: int = 5) -> ProbeResult:
    """Triad bandwidth over a core-count sweep in one CCX, plus memory latency.

    ``label`` names the firmware I/O-die P-state / DRAM setting the operator
    configured; it is recorded, never applied on hardware.
    """
    b = ctx.backend
    cores = b.topology.ccx(ccx).cores
    records = []
    core_counts = list(core_counts)
    with preserved_state(b):
        if b.is_simulated:
            old = dict(b.bios)
            b.configure_bios(io_die_pstate=label)
        try:
            if core_counts:
                latency = kernels.run_pointer_chase(b, cores[0].cpus[0], latency_bytes, repeats, seed=ctx.seed)
            for k in core_counts:
                if not 1 <= k <= len(cores):
                    raise ProbeError(f"core count {k} outside 1..{len(cores)}")
                bw = kernels.run_triad(b, buffer_bytes, [c.cpus[0] for c in cores[:k]])
                records.append(MemRecord(label, k, bw / 1e9, latency))
        finally:
            if b.is_simulated:
                b.configure_bios(**old)
    cols = record_columns(MemRecord)
    return ProbeResult(
        "mem_perf_probe",
        cols,
        rows_from(records, cols),
        params={"label": label, "ccx": ccx, "buffer_bytes": buffer_bytes, "latency_bytes": latency_bytes},
        summary={"label": label, "latency_ns": records[0].latency_ns if records else None,
                 "bandwidth_gbs": {r.n_cores: r.bandwidth_gbs for r in records}},
        records=records,
        plots={"bandwidth": {"n_cores": [r.n_cores for r in records], "gbs": [r.bandwidth_gbs for r in records]}},
    )


# -- throughput throttling -----------------------------------------------------


@dataclass(frozen=True)
class ThrottleRecord:
    t_start_ns: int
    frequency_hz: float
    ipc: float


def throttle_probe(ctx: ProbeContext, duration_s: float = 120.0, threads_per_core: int = 1,
                   head_s: float = 5.0, tail_s: float = 2.0, warmup_s: float | None = None) -> ProbeResult:
    """FMA saturation on every core at nominal frequency; head and tail are excluded."""
    b = ctx.backend
    if threads_per_core not in (1, 2):
        raise ProbeError("threads_per_core must be 1 or 2")
    if duration_s <= head_s + tail_s:
        raise ProbeError("duration must exceed the excluded head and tail")
    topo = b.topology
    cpus = [c for core in topo.cores for c in core.cpus[:threads_per_core] if b.is_online(c)]
    if warmup_s is None:
        warmup_s = 0.0 if b.is_simulated else 900.0
    with preserved_state(b):
        b.set_frequencies([c for c in topo.cpus if b.is_online(c)], b.nominal_frequency)
        wait_applied(ctx)
        if warmup_s > 0:
            kernels.run_fma_saturate(b, warmup_s, cpus)
        kernels.run_fma_saturate(b, head_s, cpus)
        e0 = [b.read_energy(EnergyDomain.PACKAGE, p.id) for p in topo.packages]
        t0 = ctx.now()
        body = kernels.run_fma_saturate(b, duration_s - head_s - tail_s, cpus)
        t1 = ctx.now()
        e1 = [b.read_energy(EnergyDomain.PACKAGE, p.id) for p in topo.packages]
        kernels.run_fma_saturate(b, tail_s, cpus)
    records = [ThrottleRecord(r.t_start_ns, r.frequency, r.ipc) for r in body]
    secs = (t1 - t0) / NS
    rapl = [(y.accumulated - x.accumulated) / secs if secs > 0 else float("nan") for x, y in zip(e0, e1)]
    trace = ctx.power.trace_between(t0, t1)
    if trace is not None:
        sel = (trace.timestamps >= t0) & (trace.timestamps <= t1)
        system = float(trace.power[sel].mean()) if sel.any() else float("nan")
    else:
        system = float("nan")
    f = analysis.summarize([r.frequency_hz for r in records]) if records else None
    ipc = [r.ipc for r in records if not np.isnan(r.ipc)]
    ipc_s = analysis.summarize(ipc) if ipc else None
    cols = record_columns(ThrottleRecord)
    return ProbeResult(
        "throttle_probe",
        cols,
        rows_from(records, cols),
        params={"duration_s": duration_s, "threads_per_core": threads_per_core, "head_s": head_s,
                "tail_s": tail_s, "warmup_s": warmup_s},
        summary={
            "threads_per_core": threads_per_core,
            "frequency_mean_ghz": f.mean / 1e9 if f else None,
            "frequency_std_mhz": f.std / 1e6 if f else None,
            "ipc_mean": ipc_s.mean if ipc_s else None,
            "ipc_std": ipc_s.std if ipc_s else None,
            "system_w": system,
            "rapl_package_w": rapl,
        },
        records=records,
    )
