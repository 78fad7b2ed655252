import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmchar import kernels
from pmchar.kernels import KernelError, KernelSpec
from pmchar.simcpu import SimModel, SimulatedBackend
from pmchar.sysif import FreqSetting

GHZ = 1e9


def at(freq_ghz, seed=0, **model):
    b = SimulatedBackend(SimModel(runtime_noise_rel=0.0, disturbance_prob=0.0, **model), seed=seed)
    b.set_frequencies(b.topology.cpus, freq_ghz * GHZ)
    b.sleep_ns(5e6)
    return b


def test_minimal_timed_closed_form():
    b = at(2.5)
    t = kernels.run_minimal_timed(b, 0, 1000)
    assert t == pytest.approx(1000 * 4 / b.effective_frequency(0) * 1e9, rel=1e-9)


def test_minimal_timed_frequency_ratio():
    fast = kernels.run_minimal_timed(at(2.5), 0, 5000)
    slow = kernels.run_minimal_timed(at(1.5), 0, 5000)
    assert fast / slow == pytest.approx(0.6, rel=0.02)


def test_minimal_timed_zero_iterations():
    assert kernels.run_minimal_timed(at(2.5), 0, 0) < 1e3


def test_minimal_batch_shapes():
    starts, durs = kernels.run_minimal_batch(at(2.5), 0, 100, 7)
    assert len(starts) == len(durs) == 7
    assert np.all(np.diff(starts) > 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3000), st.integers(0, 2**32 - 1))
def test_chase_cycle_visits_every_element_once(n, seed):
    nxt = kernels.build_chase_cycle(n, np.random.default_rng(seed))
    assert sorted(nxt.tolist()) == list(range(n))
    assert kernels.cycle_length(nxt) == n


def test_pointer_chase_l1_below_l3():
    b = at(2.5)
    l1 = kernels.run_pointer_chase(b, 0, 16 * 1024, repeats=5)
    l3 = kernels.run_pointer_chase(b, 0, 4 * 1024 * 1024, repeats=5)
    assert l1 < l3


def test_pointer_chase_min_filter():
    b = SimulatedBackend(SimModel(), seed=4)
    two = kernels.run_pointer_chase(b, 0, 4 * 1024 * 1024, repeats=2, seed=9)
    b = SimulatedBackend(SimModel(), seed=4)
    twenty = kernels.run_pointer_chase(b, 0, 4 * 1024 * 1024, repeats=20, seed=9)
    assert twenty <= two


def test_pointer_chase_faster_neighbours_lower_latency():
    b = at(1.5)
    base = kernels.run_pointer_chase(b, 0, 4 * 1024 * 1024, repeats=5)
    others = [c for core in b.topology.ccx(0).cores[1:] for c in core.cpus]
    b.set_frequencies(others, 2.5 * GHZ)
    b.sleep_ns(5e6)
    mixed = kernels.run_pointer_chase(b, 0, 4 * 1024 * 1024, repeats=5)
    assert mixed < base


def test_triad_two_cores_saturate_ccx():
    b = at(2.5)
    cores = [c.cpus[0] for c in b.topology.ccx(0).cores]
    bw = [kernels.run_triad(b, 1 << 30, cores[:k]) for k in (1, 2, 3, 4)]
    assert bw[0] < bw[1]
    assert bw[2] <= bw[1] and bw[3] <= bw[1]


def test_triad_empty_set_rejected():
    with pytest.raises(KernelError):
        kernels.run_triad(at(2.5), 1 << 30, [])


def test_fma_zero_duration_empty():
    assert kernels.run_fma_saturate(at(2.5), 0.0, [0]) == []


def test_weight_patterns():
    assert kernels.weight_pattern(0.0) == 0
    assert kernels.weight_pattern(1.0) == 2**64 - 1
    assert kernels.weight_pattern(0.5) == 0x5555555555555555
    with pytest.raises(ValueError):
        kernels.weight_pattern(0.25)


def test_instr_block_has_no_dependency_chains():
    spec = KernelSpec("instr_block", unroll=32, weight=0.5)
    plan = spec.registers()
    written = {d for d, _, _ in plan}
    read = {r for _, a, b in plan for r in (a, b)}
    assert not written & read
    assert all(p[0] != q[0] for p, q in zip(plan, plan[1:]))
    assert set(spec.seeds()) == read
    assert set(spec.seeds().values()) == {0x5555555555555555}


def test_instr_block_unsupported_instruction():
    with pytest.raises(KernelError):
        kernels.run_instr_block(at(2.5), KernelSpec("instr_block", instruction="popcnt"), 10)


def test_instr_block_linear_in_count():
    b = at(2.5)
    spec = KernelSpec("instr_block", instruction="wide_xor", weight=1.0)
    full = kernels.run_instr_block(b, spec, 2000, [0])
    half = kernels.run_instr_block(b, spec, 1000, [0])
    assert half / full == pytest.approx(0.5, rel=0.02)


def test_instr_block_duration_stable():
    b = SimulatedBackend(SimModel(), seed=2)
    spec = KernelSpec("instr_block", instruction="wide_xor", weight=0.5)
    t = np.array([kernels.run_instr_block(b, spec, 5000, [0]) for _ in range(30)])
    assert t.std(ddof=1) / t.mean() < 0.01


def test_background_load_restores_idle():
    b = at(2.5)
    idle = b.system_power(noise=False)
    with kernels.BackgroundLoad(b, [0, 1], "busy_loop"):
        assert b.system_power(noise=False) > idle
    assert b.system_power(noise=False) == pytest.approx(idle)
