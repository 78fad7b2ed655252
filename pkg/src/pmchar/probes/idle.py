"""Idle-state probes: C-state power sweep, wakeup latency, offline-thread anomaly."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .. import analysis, kernels
from ..kernels import BackgroundLoad
from ..sysif import CStateControl, FreqSetting
from .common import ProbeContext, ProbeError, ProbeResult, ghz, preserved_state, record_columns, rows_from, wait_applied

# -- power sweep -------------------------------------------------------------


@dataclass(frozen=True)
class CStatePowerPoint:
    config_id: str
    phase: str  # baseline, c1 or c0
    order: int
    n_c1: int
    n_active: int
    n_c1_cores: int
    n_active_cores: int
    n_siblings: int
    power_w: float
    count: int
    insufficient: bool


def cstate_power_sweep(ctx: ProbeContext, hold_s: float | None = None, max_steps: int | None = None) -> ProbeResult:
    """Idle power while moving threads into C1, then into C0, in logical CPU order.

    C1 sweep: C2 is disabled one CPU at a time. C0 sweep: a pause loop is
    started one CPU at a time with all idle states enabled. Each configuration
    is held and averaged over its inner window.
    """
    b = ctx.backend
    topo = b.topology
    cpus = [c for c in topo.cpus if b.is_online(c)]
    steps = cpus if max_steps is None else cpus[:max_steps]
    schedule = []
    meta = []  # (config id, phase, order, c1 set, active set)

    def core_count(sel):
        return len({topo.core_of(c) for c in sel})

    with preserved_state(b):
        b.set_frequencies(cpus, b.nominal_frequency)
        for c in cpus:
            for s in (1, 2):
                b.set_cstate(CStateControl(c, s, True))
        wait_applied(ctx)
        ctx.hold("baseline", schedule, hold_s)
        meta.append(("baseline", "baseline", 0, [], []))
        for k, cpu in enumerate(steps, start=1):
            b.set_cstate(CStateControl(cpu, 2, False))
            cid = f"c1_{k}"
            ctx.hold(cid, schedule, hold_s)
            meta.append((cid, "c1", k, steps[:k], []))
        for cpu in steps:
            b.set_cstate(CStateControl(cpu, 2, True))
        load = BackgroundLoad(b, [], "pause_loop")
        try:
            for k, cpu in enumerate(steps, start=1):
                load.stop()
                load = BackgroundLoad(b, steps[:k], "pause_loop").start()
                cid = f"c0_{k}"
                ctx.hold(cid, schedule, hold_s)
                meta.append((cid, "c0", k, [], steps[:k]))
        finally:
            load.stop()
    windows = {w.config_id: w for w in ctx.power.merge(schedule)}
    points = []
    for cid, phase, order, c1, active in meta:
        w = windows[cid]
        n_ac = core_count(active)
        points.append(CStatePowerPoint(cid, phase, order, len(c1), len(active), core_count(c1), n_ac,
                                       len(active) - n_ac, w.mean_w, w.count, w.insufficient))
    summary: dict = {"baseline_w": points[0].power_w}
    first_c1 = [p for p in points if p.phase == "c1" and p.n_c1 == 1]
    if first_c1:
        summary["first_c1_w"] = first_c1[0].power_w
    for seg in analysis.SEGMENTS:
        try:
            fit = analysis.fit_linear_increments(points, seg)
            summary[f"{seg}_slope_w"] = fit.slope
            summary[f"{seg}_intercept_w"] = fit.intercept
            summary[f"{seg}_residual_w"] = fit.residual_sigma
        except analysis.AnalysisError as exc:
            summary[f"{seg}_slope_w"] = None
            summary[f"{seg}_error"] = str(exc)
    cols = record_columns(CStatePowerPoint)
    return ProbeResult(
        "cstate_power_sweep",
        cols,
        rows_from(points, cols),
        params={"hold_s": hold_s or ctx.hold_s, "steps": len(steps)},
        summary=summary,
        records=points,
        schedule=schedule,
        plots={"sweep": {"phase": [p.phase for p in points], "order": [p.order for p in points],
                         "power_w": [p.power_w for p in points]}},
    )


# -- wakeup latency ------------------------------------------------------------


@dataclass(frozen=True)
class WakeupSample:
    cstate: int
    frequency_hz: float
    remote: bool
    latency_us: float


def _pair(topo, remote: bool) -> tuple[int, int] | None:
    first = topo.packages[0]
    caller = first.cores[0].cpus[0]
    if remote:
        if len(topo.packages) < 2:
            return None
        return caller, topo.packages[1].cores[0].cpus[0]
    ccx = topo.ccx(topo.ccx_of(caller))
    if len(ccx.cores) < 2:
        return None
    return caller, ccx.cores[1].cpus[0]


def cstate_latency_probe(ctx: ProbeContext, n: int = 200, cstates=(1, 2), frequencies=None,
                         remote=(False, True), settle_ms: float = 2.0) -> ProbeResult:
    """Wakeup latency of an idle callee signalled by a busy caller."""
    b = ctx.backend
    topo = b.topology
    freqs = list(b.frequencies if frequencies is None else frequencies)
    samples: list[WakeupSample] = []
    overheads = {}
    with preserved_state(b):
        online = [c for c in topo.cpus if b.is_online(c)]
        for rem in remote:
            pair = _pair(topo, rem)
            if pair is None:
                continue
            caller, callee = pair
            for cs in cstates:
                if cs not in (1, 2):
                    raise ProbeError(f"invalid C-state {cs}; expected 1 or 2")
                for f in freqs:
                    b.set_frequencies(online, b.check_frequency(f))
                    for c in topo.siblings(callee):
                        b.set_cstate(CStateControl(c, 2, cs == 2))
                        b.set_cstate(CStateControl(c, 1, True))
                    wait_applied(ctx)
                    with BackgroundLoad(b, [caller], "busy_loop") if b.is_simulated else contextlib.nullcontext():
                        lat, overhead = kernels.wake_pair(b, caller, callee, n, int(settle_ms * 1e6))
                    overheads[f"c{cs}_{ghz(f)}_{'remote' if rem else 'local'}"] = overhead
                    samples += [WakeupSample(cs, f, rem, x) for x in lat]
    groups: dict = {}
    for s in samples:
        groups.setdefault((s.cstate, s.frequency_hz, s.remote), []).append(s.latency_us)
    medians = {f"c{k[0]}_{ghz(k[1])}_{'remote' if k[2] else 'local'}": float(np.median(v)) for k, v in groups.items()}
    ranges = {f"c{k[0]}_{ghz(k[1])}_{'remote' if k[2] else 'local'}": [float(min(v)), float(max(v))]
              for k, v in groups.items()}
    cols = record_columns(WakeupSample)
    return ProbeResult(
        "cstate_latency_probe",
        cols,
        rows_from(samples, cols),
        params={"n": n, "cstates": list(cstates), "frequencies": freqs, "settle_ms": settle_ms},
        summary={"median_us": medians, "range_us": ranges, "signal_overhead_us": overheads},
        records=samples,
    )


# -- offline anomaly -----------------------------------------------------------


@dataclass(frozen=True)
class OfflineRecord:
    config_id: str
    power_w: float
    count: int


def offline_anomaly_probe(ctx: ProbeContext, hold_s: float | None = None) -> ProbeResult:
    """Idle power with all second threads offline, compared with C1 and C2 references."""
    b = ctx.backend
    topo = b.topology
    second = [c for core in topo.cores for c in core.cpus[1:] if c != 0]
    schedule = []
    with preserved_state(b):
        for c in topo.cpus[1:]:
            b.set_online(c, True)
        for c in topo.cpus:
            for s in (1, 2):
                b.set_cstate(CStateControl(c, s, True))
        ctx.hold("online", schedule, hold_s)
        ref = topo.cpus[-1] if topo.n_cpus > 1 else 0
        b.set_cstate(CStateControl(ref, 2, False))
        ctx.hold("c1_reference", schedule, hold_s)
        b.set_cstate(CStateControl(ref, 2, True))
        for c in second:
            b.set_online(c, False)
        ctx.hold("offline", schedule, hold_s)
        for c in second:
            b.set_online(c, True)
        ctx.hold("reonline", schedule, hold_s)
    windows = ctx.power.merge(schedule)
    recs = [OfflineRecord(w.config_id, w.mean_w, w.count) for w in windows]
    p = {r.config_id: r.power_w for r in recs}
    if any(np.isnan(v) for v in p.values()):
        anomaly = None
    else:
        anomaly = bool(abs(p["offline"] - p["c1_reference"]) < abs(p["offline"] - p["online"]))
    cols = record_columns(OfflineRecord)
    return ProbeResult(
        "offline_anomaly_probe",
        cols,
        rows_from(recs, cols),
        params={"hold_s": hold_s or ctx.hold_s, "offlined": len(second)},
        summary={"power_w": p, "anomaly": anomaly, "assert": b.is_simulated},
        records=recs,
        schedule=schedule,
    )
