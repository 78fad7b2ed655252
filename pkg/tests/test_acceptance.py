"""End-to-end acceptance checks on the simulated backend.

Each test records one PASS/FAIL line; the lines are printed in the pytest
terminal summary (and immediately when run with ``-s``). Tolerances are the
contract values and must not be loosened.
"""

import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmchar import analysis
from pmchar.cli import main
from pmchar.probes import REGISTRY, PRESETS, ProbeContext, frequency, idle, rapl
from pmchar.simcpu import SimModel, SimulatedBackend
from pmchar.sysif import HardwareBackend

from conftest import FakeMsr, make_msr, make_sysfs

RESULTS: dict[int, str] = {}


def report(n: int, title: str, checks: dict[str, bool], detail: str) -> None:
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    line = f"ACCEPTANCE {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    if failed:
        line += f"  [failed: {', '.join(failed)}]"
    RESULTS[n] = line
    print(line)
    assert ok, line


def ctx_for(seed: int, **model) -> ProbeContext:
    return ProbeContext(SimulatedBackend(SimModel(**model), seed=seed), seed=seed)


def test_01_transition_delay_recovery():
    t0 = time.perf_counter()
    res = frequency.freq_transition_probe(ctx_for(2024), from_hz=2.2e9, to_hz=1.5e9, n=10_000)
    wall = time.perf_counter() - t0
    fit = res.summary["uniform_fit"]
    report(1, "transition-delay recovery", {
        "T_hat": abs(fit["T_hat_us"] - 1000) <= 0.02 * 1000,
        "d_hat": abs(fit["d_hat_us"] - 390) <= 0.03 * 390,
        "runtime": wall < 30,
    }, f"T_hat={fit['T_hat_us']:.1f} us d_hat={fit['d_hat_us']:.1f} us n_valid={res.summary['n_valid']} "
       f"wall={wall:.1f} s")


def test_02_revert_subpopulation():
    short = frequency.freq_transition_probe(ctx_for(7), from_hz=2.2e9, to_hz=2.5e9, n=1000, wait_max_ms=4.0)
    long = frequency.freq_transition_probe(ctx_for(7), from_hz=2.2e9, to_hz=2.5e9, n=1000,
                                           wait_min_ms=5.0, wait_max_ms=10.0)
    f_short = short.summary["below_floor_fraction"]
    n_long = long.summary["below_floor"]
    report(2, "revert subpopulation", {
        "short_waits": f_short >= 0.01,
        "long_waits": n_long == 0,
    }, f"wait<=4 ms: {f_short:.1%} below 100 us; wait 5-10 ms: {n_long} below 100 us")


TABLE1 = {
    "1.5/1.5": 1.499, "1.5/2.2": 1.466, "1.5/2.5": 1.428,
    "2.2/1.5": 2.200, "2.2/2.2": 2.199, "2.2/2.5": 2.000,
    "2.5/1.5": 2.497, "2.5/2.2": 2.499, "2.5/2.5": 2.499,
}


def test_03_coupling_table():
    res = frequency.mixed_freq_probe(ctx_for(3), duration_s=10.0)
    got = res.summary["effective_ghz"]
    errs = {k: abs(got[k] - v) * 1e3 for k, v in TABLE1.items()}
    report(3, "coupling table", {k: e <= 1.0 for k, e in errs.items()},
           f"9 cells, max error {max(errs.values()):.3f} MHz")


def test_04_idle_power_sweep():
    s = idle.cstate_power_sweep(ctx_for(4)).summary
    report(4, "idle-power sweep", {
        "baseline": abs(s["baseline_w"] - 99.1) <= 0.5,
        "first_c1": abs(s["first_c1_w"] - 180.3) <= 0.5,
        "c1_slope": abs(s["c1_slope_w"] - 0.09) <= 0.01,
        "active_slope": abs(s["active_slope_w"] - 0.33) <= 0.02,
        "sibling_slope": abs(s["sibling_slope_w"] - 0.05) <= 0.01,
    }, f"baseline={s['baseline_w']:.2f} W first_c1={s['first_c1_w']:.2f} W slopes c1={s['c1_slope_w']:.4f} "
       f"active={s['active_slope_w']:.4f} sibling={s['sibling_slope_w']:.4f} W")


def test_05_wakeup_latencies():
    res = idle.cstate_latency_probe(ctx_for(5), n=200)
    med = res.summary["median_us"]
    c2_local = [r.latency_us for r in res.records if r.cstate == 2 and not r.remote]
    gaps = [med[k.replace("local", "remote")] - med[k] for k in med if k.endswith("local")]
    report(5, "wakeup latencies", {
        "c1_2.5": abs(med["c1_2.5_local"] - 1.0) <= 0.1,
        "c1_2.2": abs(med["c1_2.2_local"] - 1.0) <= 0.1,
        "c1_1.5": abs(med["c1_1.5_local"] - 1.5) <= 0.15,
        "c2_range": all(20.0 <= x <= 25.0 for x in c2_local),
        "remote_gap": all(abs(g - 1.0) <= 0.5 for g in gaps),
    }, f"C1 medians {med['c1_2.5_local']:.2f}/{med['c1_2.2_local']:.2f}/{med['c1_1.5_local']:.2f} us; "
       f"C2 local in [{min(c2_local):.1f}, {max(c2_local):.1f}] us; remote-local {min(gaps):.2f}..{max(gaps):.2f} us")


def test_06_throttling():
    one = frequency.throttle_probe(ctx_for(6), duration_s=20.0, threads_per_core=1).summary
    two = frequency.throttle_probe(ctx_for(6), duration_s=20.0, threads_per_core=2).summary

    def near(x, target):
        return abs(x - target) <= 0.01 * target

    checks = {
        "1T_freq": near(one["frequency_mean_ghz"], 2.1),
        "1T_ipc": near(one["ipc_mean"], 3.23),
        "1T_power": near(one["system_w"], 489.0),
        "2T_freq": near(two["frequency_mean_ghz"], 2.0),
        "2T_ipc": near(two["ipc_mean"], 3.56),
        "2T_power": near(two["system_w"], 509.0),
        "rapl": all(near(p, 170.0) for p in one["rapl_package_w"] + two["rapl_package_w"]),
        "sigma_reported": one["frequency_std_mhz"] > 0 and two["frequency_std_mhz"] > 0,
    }
    report(6, "throttling", checks,
           f"1T {one['frequency_mean_ghz']:.3f} GHz (sd {one['frequency_std_mhz']:.2f} MHz) IPC {one['ipc_mean']:.3f} "
           f"{one['system_w']:.1f} W; 2T {two['frequency_mean_ghz']:.3f} GHz (sd {two['frequency_std_mhz']:.2f} MHz) "
           f"IPC {two['ipc_mean']:.3f} {two['system_w']:.1f} W; RAPL "
           f"{'/'.join(f'{p:.1f}' for p in two['rapl_package_w'])} W")


def test_07_rapl_accuracy_structure():
    s = rapl.rapl_accuracy_probe(ctx_for(8)).summary
    report(7, "RAPL accuracy structure", {
        "memory_excess": s["memory_min_excess"] >= 1.20,
        "core_affine": s["core_vs_pkg"]["max_rel_residual"] < 0.02,
    }, f"memory reference/implied >= {s['memory_min_excess']:.3f}; core->package affine residual "
       f"{s['core_vs_pkg']['max_rel_residual']:.4f}")


def test_08_data_dependence():
    xor = rapl.rapl_data_probe(ctx_for(9), instruction="wide_xor", n_blocks=300).summary
    shr = rapl.rapl_data_probe(ctx_for(9), instruction="shift_right", n_blocks=300).summary
    report(8, "data dependence", {
        "xor_gap": abs(xor["gap_system_w"] - 0.076) <= 0.005,
        "no_overlap": not xor["system_overlap"],
        "core_gap": xor["gap_core_w"] <= 0.001,
        "shr_gap": shr["gap_system_w"] <= 0.009,
    }, f"xor system gap {xor['gap_system_w']:.4f} (overlap={xor['system_overlap']}), core gap "
       f"{xor['gap_core_w']:.5f}; shr system gap {shr['gap_system_w']:.4f}")


def test_09_statistics_properties():
    checks = {}

    rng = np.random.default_rng(99)
    fit = analysis.fit_uniform_window(rng.uniform(390, 1390, 100_000))
    checks["uniform_convergence"] = abs(fit.d_hat - 390) <= 3.9 and abs(fit.T_hat - 1000) <= 10

    def holds(prop) -> bool:
        try:
            prop()
            return True
        except AssertionError:
            return False

    @settings(max_examples=25, deadline=None, database=None)
    @given(st.integers(0, 2**32 - 1))
    def dkw(seed):
        r = np.random.default_rng(seed)
        m, k = 200, 10
        recs = [{"weight": 0.0, "system_w": float(v)} for v in r.normal(280, 2, m * k)]
        series = analysis.ecdf_with_subsets(recs, k, seed=seed)
        worst = max(analysis.ks_distance(a.values, b.values) for a in series for b in series if a is not b)
        assert worst < analysis.dkw_bound(m, 0.01)

    @settings(max_examples=150, deadline=None, database=None)
    @given(st.lists(st.floats(-1e4, 1e4), max_size=200), st.floats(0.05, 1e4))
    def hist(samples, width):
        assert analysis.make_histogram(samples, width).total == len(samples)
        assert sum(analysis.make_histogram(samples, width).counts) == len(samples)

    @settings(max_examples=100, deadline=None, database=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200))
    def ecdf(values):
        s = analysis.EcdfSeries(np.sort(np.array(values)), 0.0, 0)
        y = s(np.linspace(min(values) - 1, max(values) + 1, 257))
        assert np.all(np.diff(y) >= 0) and y[0] == 0.0 and y[-1] == 1.0

    @settings(max_examples=150, deadline=None, database=None)
    @given(st.floats(-1e3, 1e3), st.floats(-100, 100), st.integers(3, 50))
    def line(a, b, n):
        x = np.arange(n, dtype=float)
        f = analysis.fit_line(x, a + b * x)
        assert abs(f.intercept - a) <= 1e-6 * (1 + abs(a) + abs(b) * n)
        assert abs(f.slope - b) <= 1e-8 * (1 + abs(a) + abs(b))

    for name, prop in (("dkw", dkw), ("histogram_total", hist), ("ecdf_monotone", ecdf), ("linear_exact", line)):
        checks[name] = holds(prop)
    report(9, "statistics properties", checks,
           f"uniform fit n=1e5 d_hat={fit.d_hat:.2f} T_hat={fit.T_hat:.2f}; " + ", ".join(checks))


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_10_determinism_and_hygiene(tmp_path):
    t0 = time.perf_counter()
    codes = [main(["run", "--out", str(tmp_path / d), "--seed", "11", "--preset", "desk"]) for d in ("a", "b")]
    wall = (time.perf_counter() - t0) / 2
    identical = _tree(tmp_path / "a") == _tree(tmp_path / "b")

    # every probe in sequence on one backend, then back to the startup snapshot
    ctx = ctx_for(12)
    snap = ctx.backend.control_state()
    for name, fn in REGISTRY.items():
        fn(ctx, **PRESETS["desk"].get(name, {}))
    sim_restored = ctx.backend.control_state() == snap

    sysfs = make_sysfs(tmp_path / "sys")
    msr = make_msr(tmp_path / "dev", 16)
    (sysfs / "cpu2/cpuidle/state2/disable").write_text("1")
    (sysfs / "cpu6/online").write_text("0")
    rc = main(["restore", "--i-know-this-changes-machine-state", "--sysfs-root", str(sysfs), "--msr-root", str(msr)])
    hw = HardwareBackend(sysfs, msr)
    hw.msr = FakeMsr(msr)
    st_ = hw.control_state()
    hw_restored = rc == 0 and all(st_.online.values()) and not any(any(d) for d in st_.cstate_disabled.values())

    report(10, "determinism and hygiene", {
        "exit_codes": codes == [0, 0],
        "byte_identical": identical,
        "sim_restore": sim_restored,
        "hw_restore": hw_restored,
        "suite_time": wall < 300,
    }, f"{len(_tree(tmp_path / 'a'))} files identical={identical}; restore sim={sim_restored} hw={hw_restored}; "
       f"full suite {wall:.1f} s")
