import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmchar import powertrace
from pmchar.powertrace import PowerTrace, ScheduleEntry, TraceError
from pmchar.simcpu import SimModel, SimulatedBackend
from pmchar.sysif import CStateControl

NS = 1_000_000_000


def step_trace(levels, seconds=10.0, rate=20.0, start=0):
    """Piecewise-constant trace: one level per ``seconds`` interval."""
    n = int(seconds * rate)
    t = start + np.arange(n * len(levels)) * int(NS / rate)
    p = np.repeat(levels, n).astype(float)
    return PowerTrace(t.astype(np.int64), p, rate)


def schedule(k, seconds=10.0, start=0):
    return [ScheduleEntry(f"c{i}", start + int(i * seconds * NS), start + int((i + 1) * seconds * NS)) for i in range(k)]


def test_merge_step_function():
    out = powertrace.merge(step_trace([99.1, 180.3]), schedule(2))
    assert [w.mean_w for w in out] == [pytest.approx(99.1), pytest.approx(180.3)]
    assert not any(w.insufficient for w in out)
    assert all(w.end_ns - w.start_ns == 8 * NS for w in out)


@settings(max_examples=60, deadline=None)
@given(st.integers(-900_000_000, 900_000_000))
def test_merge_invariant_to_clock_offset(offset):
    # trace padded by one constant interval each side so shifted windows stay covered
    tr = step_trace([99.1, 99.1, 180.3, 120.0, 120.0], start=-10 * NS)
    out = powertrace.merge(tr.shifted(offset), schedule(3))
    assert [w.mean_w for w in out] == [pytest.approx(99.1), pytest.approx(180.3), pytest.approx(120.0)]


def test_window_counts_bounded_by_trace():
    tr = step_trace([1.0, 2.0, 3.0])
    out = powertrace.merge(tr, schedule(3))
    assert sum(w.count for w in out) <= len(tr)


def test_sparse_window_flagged_not_dropped():
    tr = step_trace([5.0, 5.0])
    keep = np.ones(len(tr), bool)
    keep[40:150] = False  # hole in the first inner window
    holey = PowerTrace(tr.timestamps[keep], tr.power[keep])
    out = powertrace.merge(holey, schedule(2))
    assert out[0].insufficient and not out[1].insufficient


def test_schedule_outside_trace():
    with pytest.raises(TraceError, match="outside"):
        powertrace.merge(step_trace([1.0]), schedule(2))


def test_schedule_wrong_length_rejected():
    bad = [ScheduleEntry("x", 0, 5 * NS)]
    with pytest.raises(TraceError, match="interval"):
        powertrace.merge(step_trace([1.0]), bad)


def write(tmp_path, body):
    p = tmp_path / "t.csv"
    p.write_text(body)
    return p


def test_load_round_trip(tmp_path):
    tr = step_trace([99.1, 180.3])
    p = tr.save(tmp_path / "t.csv", {"source": "test"})
    back = powertrace.load_trace(p)
    assert np.array_equal(back.timestamps, tr.timestamps)
    assert np.allclose(back.power, tr.power)


@pytest.mark.parametrize(
    "body,msg",
    [
        ("timestamp_ns,power_w\n0,1.0\n50000000,x\n", ":3: malformed"),
        ("0,1.0\n0,2.0\n", ":2: duplicate"),
        ("# hdr\n100,1.0\n50,2.0\n", ":3: non-monotone"),
        ("0,1.0,3\n", ":1: expected"),
        ("# only a comment\n", "empty"),
    ],
)
def test_load_errors_name_line(tmp_path, body, msg):
    with pytest.raises(TraceError, match=msg):
        powertrace.load_trace(write(tmp_path, body))


def test_load_rejects_wrong_rate(tmp_path):
    rows = "\n".join(f"{i * 100_000_000},1.0" for i in range(200))  # 10 Sa/s
    with pytest.raises(TraceError, match="sample rate"):
        powertrace.load_trace(write(tmp_path, rows + "\n"))


def test_schedule_file_round_trip(tmp_path):
    s = schedule(3)
    p = powertrace.write_schedule(tmp_path / "s.csv", s)
    assert powertrace.read_schedule(p) == s


def test_sim_stream_idle_level_and_count():
    b = SimulatedBackend(SimModel(), seed=4)
    b.sleep_ns(10 * NS)
    tr = powertrace.sim_power_stream(b, 20.0, 0, 10 * NS)
    assert len(tr) == 200
    assert tr.power.mean() == pytest.approx(99.1, abs=0.2)
    exact = powertrace.sim_power_stream(b, 20.0, 0, 10 * NS, noise_w=0.0)
    assert np.all(exact.power == 99.1)


def test_sim_stream_step_merges_to_model_values():
    b = SimulatedBackend(SimModel(), seed=4)
    b.sleep_ns(10 * NS)
    for t in b.topology.cores[0].cpus:
        b.set_cstate(CStateControl(t, 2, False))
    b.sleep_ns(10 * NS)
    out = powertrace.merge(powertrace.sim_power_stream(b, 20.0, 0, 20 * NS), schedule(2))
    assert out[0].mean_w == pytest.approx(99.1, abs=0.5)
    assert out[1].mean_w == pytest.approx(180.3, abs=0.5)


def test_sim_stream_refuses_hardware():
    class Hw:
        is_simulated = False

    with pytest.raises(TraceError):
        powertrace.sim_power_stream(Hw())
