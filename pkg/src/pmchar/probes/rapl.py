"""RAPL probes: domain accuracy against the reference, and operand-data dependence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import analysis, kernels
from ..kernels import BackgroundLoad, KernelSpec
from ..powertrace import ScheduleEntry
from ..sysif import CStateControl
from .common import NS, ProbeContext, ProbeResult, energy_power, ghz, preserved_state, read_all_energy, record_columns, rows_from, wait_applied

WORKLOADS = ("idle", "pause", "busy", "add", "mul", "fma", "sqrt", "mem_read", "mem_write", "triad")
PLACEMENTS = ("all_1t", "all_2t", "ccx_1")
CSTATE_CONFIGS = ("all", "no_c2")


@dataclass(frozen=True)
class RaplRecord:
    config_id: str
    workload: str
    placement: str
    frequency_hz: float
    cstates: str
    pkg_w: float
    core_w: float
    ref_w: float
    count: int


def placement_cpus(topo, placement: str) -> list[int]:
    if placement == "all_1t":
        return [core.cpus[0] for core in topo.cores]
    if placement == "all_2t":
        return list(topo.cpus)
    if placement == "ccx_1":
        return [ccx.cores[0].cpus[0] for ccx in topo.ccxs]
    raise ValueError(f"unknown placement {placement!r}; expected one of {PLACEMENTS}")


def rapl_accuracy_probe(ctx: ProbeContext, workloads=WORKLOADS, placements=PLACEMENTS, frequencies=None,
                        cstate_configs=CSTATE_CONFIGS, hold_s: float | None = None) -> ProbeResult:
    """RAPL package and core power next to the reference for each configuration."""
    b = ctx.backend
    topo = b.topology
    freqs = list(b.frequencies if frequencies is None else frequencies)
    schedule = []
    pending = []
    with preserved_state(b):
        online = [c for c in topo.cpus if b.is_online(c)]
        for cs in cstate_configs:
            if cs not in CSTATE_CONFIGS:
                raise ValueError(f"unknown C-state config {cs!r}; expected one of {CSTATE_CONFIGS}")
            for c in online:
                b.set_cstate(CStateControl(c, 1, True))
                b.set_cstate(CStateControl(c, 2, cs == "all"))
            for f in freqs:
                b.set_frequencies(online, b.check_frequency(f))
                wait_applied(ctx)
                for wl in workloads:
                    for pl in placements:
                        cpus = [c for c in placement_cpus(topo, pl) if c in online]
                        cid = f"{wl}.{pl}.{ghz(f)}.{cs}"
                        with BackgroundLoad(b, cpus, wl):
                            e = ctx.hold(cid, schedule, hold_s, inner=True)
                        pending.append((cid, wl, pl, f, cs, e))
    windows = {w.config_id: w for w in ctx.power.merge(schedule)}
    records = [RaplRecord(cid, wl, pl, f, cs, e["pkg_w"], e["core_w"], windows[cid].mean_w, windows[cid].count)
               for cid, wl, pl, f, cs, e in pending]
    summary = {"configs": len(records)}
    try:
        st = analysis.rapl_structure(records)
        summary.update({
            "ref_vs_pkg": {"intercept_w": st.ref_vs_pkg.intercept, "slope": st.ref_vs_pkg.slope,
                           "max_rel_residual": st.ref_vs_pkg.max_rel_residual},
            "core_vs_pkg": {"intercept_w": st.core_vs_pkg.intercept, "slope": st.core_vs_pkg.slope,
                            "max_rel_residual": st.core_vs_pkg.max_rel_residual},
            "memory_min_excess": st.min_memory_excess,
        })
    except analysis.AnalysisError as exc:
        summary["structure_error"] = str(exc)
    cols = record_columns(RaplRecord)
    return ProbeResult(
        "rapl_accuracy_probe",
        cols,
        rows_from(records, cols),
        params={"workloads": list(workloads), "placements": list(placements), "frequencies": freqs,
                "cstate_configs": list(cstate_configs), "hold_s": hold_s or ctx.hold_s},
        summary=summary,
        records=records,
        schedule=schedule,
        plots={"rapl_vs_reference": {"workload": [r.workload for r in records], "ref_w": [r.ref_w for r in records],
                                     "pkg_w": [r.pkg_w for r in records], "core_w": [r.core_w for r in records]}},
    )


@dataclass(frozen=True)
class BlockRecord:
    index: int
    instruction: str
    weight: float
    duration_ns: float
    pkg_j: float
    core_j: float
    pkg_w: float
    core_w: float
    system_w: float


def rapl_data_probe(ctx: ProbeContext, instruction: str = "wide_xor", n_blocks: int = 3000,
                    block_s: float = 10.0, unroll: int = 16, instructions: int = 4096) -> ProbeResult:
    """Instruction blocks on all threads with a random operand weight per block.

    Energy is read only between blocks; system power is the reference mean
    over each block's inner window.
    """
    b = ctx.backend
    topo = b.topology
    rng = ctx.rng(f"rapl_data_probe.{instruction}")
    records: list[BlockRecord] = []
    schedule = []
    raw = []
    with preserved_state(b):
        online = [c for c in topo.cpus if b.is_online(c)]
        b.set_frequencies(online, b.nominal_frequency)
        wait_applied(ctx)
        count = 0
        if n_blocks > 0:
            # size the block so it runs for block_s
            probe = KernelSpec("instr_block", unroll=unroll, instructions=instructions, instruction=instruction)
            t = kernels.run_instr_block(b, probe, 1000, online)
            count = max(int(round(1000 * block_s * NS / t)), 1)
        weights = rng.choice(np.array(kernels.WEIGHTS), size=n_blocks)
        e0 = read_all_energy(b)
        for i, w in enumerate(weights):
            spec = KernelSpec("instr_block", unroll=unroll, instructions=instructions, weight=float(w),
                              instruction=instruction)
            start = ctx.now()
            dur = kernels.run_instr_block(b, spec, count, online)
            e1 = read_all_energy(b)
            schedule.append(ScheduleEntry(f"block_{i}", start, ctx.now()))
            raw.append((i, float(w), dur, energy_power(e0, e1, dur / NS)))
            e0 = e1
    windows = {w.config_id: w for w in ctx.power.merge(schedule, block_s)} if schedule else {}
    for i, w, dur, e in raw:
        records.append(BlockRecord(i, instruction, w, dur, e["pkg_j"], e["core_j"], e["pkg_w"], e["core_w"],
                                   windows[f"block_{i}"].mean_w))
    summary: dict = {"n_blocks": n_blocks, "instruction": instruction}
    weights_present = sorted({r.weight for r in records})
    if 0.0 in weights_present and 1.0 in weights_present:
        for fld in ("system_w", "core_w", "pkg_w"):
            summary[f"gap_{fld}"] = analysis.mean_gap(records, 0.0, 1.0, fld)
        a = analysis.group_values(records, 0.0, "system_w")
        c = analysis.group_values(records, 1.0, "system_w")
        summary["system_overlap"] = analysis.ranges_overlap(a, c)
        summary["system_ks"] = analysis.ks_distance(a, c)
        summary["core_ks"] = analysis.ks_distance(analysis.group_values(records, 0.0, "core_w"),
                                                  analysis.group_values(records, 1.0, "core_w"))
    cols = record_columns(BlockRecord)
    return ProbeResult(
        "rapl_data_probe",
        cols,
        rows_from(records, cols),
        params={"instruction": instruction, "n_blocks": n_blocks, "block_s": block_s, "unroll": unroll,
                "instructions": instructions},
        summary=summary,
        records=records,
        schedule=schedule,
    )
