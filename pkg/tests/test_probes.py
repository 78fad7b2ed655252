import numpy as np
import pytest

from pmchar.probes import REGISTRY, ProbeContext, ProbeError, run_probe
from pmchar.probes import frequency, idle, rapl
from pmchar.simcpu import SimModel, SimulatedBackend


def ctx_for(seed=1, hold_s=10.0, **model):
    return ProbeContext(SimulatedBackend(SimModel(**model), seed=seed), seed=seed, hold_s=hold_s)


def test_discard_bookkeeping():
    ctx = ctx_for(disturbance_prob=0.003)
    res = frequency.freq_transition_probe(ctx, n=400)
    s = res.records
    assert sum(r.valid for r in s) + sum(not r.valid for r in s) == 400
    failed = [r.index for r in s if r.discard_reason == "validation_failed"]
    assert failed, "expected some validation failures with frequent disturbances"
    for i in failed:
        if i + 1 < len(s):
            assert not s[i + 1].valid
    assert all(r.discard_reason for r in s if not r.valid)
    assert all(r.delay_us >= 0 for r in s)
    assert res.summary["n_valid"] + res.summary["n_discarded"] == 400


def test_transition_probe_restores_state():
    ctx = ctx_for()
    before = ctx.backend.control_state()
    frequency.freq_transition_probe(ctx, n=20)
    ctx.backend.sleep_ns(5e6)
    assert ctx.backend.control_state() == before


def test_transition_probe_rejects_bad_wait():
    with pytest.raises(ProbeError):
        frequency.freq_transition_probe(ctx_for(), n=5, wait_min_ms=3, wait_max_ms=2)


def test_header_fields():
    ctx = ctx_for(seed=42)
    res = frequency.sibling_freq_probe(ctx)
    head = res.header(ctx)
    for key in ("probe", "backend", "seed", "topology_hash", "model_version"):
        assert key in head
    assert head["seed"] == 42


def test_sibling_elevation():
    res = frequency.sibling_freq_probe(ctx_for())
    f = [r.effective_hz / 1e9 for r in res.records]
    assert f[0] == pytest.approx(1.499, abs=1e-3)
    assert f[1] == pytest.approx(2.497, abs=1e-3)
    assert f[2] == pytest.approx(2.497, abs=1e-3)


def test_sweep_monotone_after_first_point():
    res = idle.cstate_power_sweep(ctx_for(power_noise_w=0.0), max_steps=12)
    c1 = [p.power_w for p in res.records if p.phase == "c1"]
    assert all(b >= a - 1e-9 for a, b in zip(c1, c1[1:]))
    assert len(res.schedule) == len(res.records)


def test_sweep_restores_cstates():
    ctx = ctx_for()
    idle.cstate_power_sweep(ctx, max_steps=4)
    b = ctx.backend
    assert all(b.cstate_enabled(c, 2) for c in b.topology.cpus)


def test_offline_anomaly_detected_only_when_modelled():
    plain = idle.offline_anomaly_probe(ctx_for())
    quirky = idle.offline_anomaly_probe(ctx_for(offline_anomaly=True))
    assert plain.summary["anomaly"] is False
    assert quirky.summary["anomaly"] is True
    ctx = ctx_for(offline_anomaly=True)
    idle.offline_anomaly_probe(ctx)
    assert all(ctx.backend.is_online(c) for c in ctx.backend.topology.cpus)


def test_rapl_data_zero_blocks():
    res = rapl.rapl_data_probe(ctx_for(), n_blocks=0)
    assert res.rows == []


def test_rapl_data_weights_and_energy_between_blocks():
    res = rapl.rapl_data_probe(ctx_for(), n_blocks=12)
    assert {r.weight for r in res.records} <= {0.0, 0.5, 1.0}
    for r in res.records:
        assert r.pkg_w == pytest.approx(r.pkg_j / (r.duration_ns / 1e9))
    # blocks are back to back: each schedule entry starts where the previous ended
    ends = [e.end_ns for e in res.schedule[:-1]]
    starts = [e.start_ns for e in res.schedule[1:]]
    assert all(s >= e for s, e in zip(starts, ends))


def test_unknown_probe():
    with pytest.raises(ProbeError):
        run_probe("nope", ctx_for())


def test_registry_has_every_probe():
    assert len(REGISTRY) == 10


def test_probe_rng_independent_of_order():
    ctx = ctx_for(seed=5)
    a = ctx.rng("x").random(3)
    ctx.rng("y").random(10)
    assert np.array_equal(a, ctx.rng("x").random(3))


def test_hardware_reference_missing_gives_nan():
    from pmchar.probes import PowerSource
    from pmchar.powertrace import ScheduleEntry

    class Hw:
        is_simulated = False

    src = PowerSource(Hw())
    out = src.merge([ScheduleEntry("a", 0, 10_000_000_000)])
    assert np.isnan(out[0].mean_w) and out[0].insufficient
