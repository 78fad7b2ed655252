"""Experiment procedures.

Each probe takes a :class:`ProbeContext` plus keyword parameters, leaves the
machine's control state as it found it, and returns a :class:`ProbeResult`
whose rows are written as one CSV per run.
"""

from __future__ import annotations

from .common import PowerSource, ProbeContext, ProbeError, ProbeResult
from .frequency import (
    freq_transition_probe,
    mem_perf_probe,
    mixed_freq_probe,
    sibling_freq_probe,
    throttle_probe,
)
from .idle import cstate_latency_probe, cstate_power_sweep, offline_anomaly_probe
from .rapl import rapl_accuracy_probe, rapl_data_probe

REGISTRY = {
    "freq_transition_probe": freq_transition_probe,
    "sibling_freq_probe": sibling_freq_probe,
    "mixed_freq_probe": mixed_freq_probe,
    "mem_perf_probe": mem_perf_probe,
    "throttle_probe": throttle_probe,
    "cstate_power_sweep": cstate_power_sweep,
    "cstate_latency_probe": cstate_latency_probe,
    "offline_anomaly_probe": offline_anomaly_probe,
    "rapl_accuracy_probe": rapl_accuracy_probe,
    "rapl_data_probe": rapl_data_probe,
}

# Parameter defaults at full experiment scale.
FULL_PRESET: dict[str, dict] = {
    "freq_transition_probe": {"n": 100_000},
    "mixed_freq_probe": {"duration_s": 120.0},
    "throttle_probe": {"duration_s": 120.0},
    "cstate_latency_probe": {"n": 200},
    "rapl_data_probe": {"n_blocks": 3000},
}

# Scaled down so the whole suite finishes quickly on the simulated backend.
DESK_PRESET: dict[str, dict] = {
    "freq_transition_probe": {"n": 1000},
    "mixed_freq_probe": {"duration_s": 10.0},
    "throttle_probe": {"duration_s": 20.0},
    "cstate_latency_probe": {"n": 50},
    "rapl_data_probe": {"n_blocks": 60},
}

PRESETS = {"full": FULL_PRESET, "desk": DESK_PRESET}


def run_probe(name: str, ctx: ProbeContext, preset: str = "desk", **params) -> ProbeResult:
    try:
        fn = REGISTRY[name]
    except KeyError:
        raise ProbeError(f"unknown probe {name!r}; known: {', '.join(REGISTRY)}") from None
    merged = dict(PRESETS[preset].get(name, {}))
    merged.update(params)
    return fn(ctx, **merged)


__all__ = [
    "DESK_PRESET",
    "FULL_PRESET",
    "PRESETS",
    "REGISTRY",
    "PowerSource",
    "ProbeContext",
    "ProbeError",
    "ProbeResult",
    "run_probe",
    *REGISTRY,
]
