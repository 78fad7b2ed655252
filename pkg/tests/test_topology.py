import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmchar.topology import CpuSet, TopologyError, discover, epyc_7502_dual, parse_cpu_list, synthetic

from conftest import make_sysfs


def test_epyc_layout_counts():
    t = epyc_7502_dual()
    assert t.n_cpus == 128
    assert t.n_cores == 64
    assert len(t.ccxs) == 16
    assert len(t.packages) == 2


def test_cpu0_and_its_sibling_are_in_ccx0():
    t = epyc_7502_dual()
    assert t.ccx_of(0) == 0
    for s in t.siblings(0):
        assert t.ccx_of(s) == 0


def test_ccx_members_map_back_exhaustively():
    t = epyc_7502_dual()
    for ccx in t.ccxs:
        assert len(ccx.cpus) == 8
        assert {t.ccx_of(c) for c in ccx.cpus} == {ccx.index}


def test_unknown_cpu_rejected():
    with pytest.raises(TopologyError):
        epyc_7502_dual().ccx_of(999)


@settings(max_examples=30, deadline=None)
@given(
    st.integers(1, 2), st.integers(1, 3), st.integers(1, 2), st.integers(1, 4), st.integers(1, 2),
)
def test_partition_and_round_trip(p, d, x, c, t):
    topo = synthetic(p, d, x, c, t)
    seen = []
    for ccx in topo.ccxs:
        seen.extend(ccx.cpus)
    assert sorted(seen) == sorted(topo.cpus)
    assert len(seen) == len(set(seen))
    for cpu in topo.cpus:
        assert cpu in topo.ccx(topo.ccx_of(cpu)).cpus


def test_parse_cpu_list():
    assert parse_cpu_list("0-3,8,10-11") == [0, 1, 2, 3, 8, 10, 11]
    assert parse_cpu_list("") == []
    with pytest.raises(TopologyError):
        parse_cpu_list("3-1")


def test_cpuset_rejects_duplicates_and_unknown():
    t = synthetic(1, 1, 1, 2, 2)
    with pytest.raises(TopologyError):
        CpuSet([0, 0], t)
    with pytest.raises(TopologyError):
        CpuSet([99], t)


def test_discover_fake_tree(tmp_path):
    root = make_sysfs(tmp_path, packages=2, ccxs=4, cores_per_ccx=4, threads=2)
    t = discover(root)
    assert t.n_cpus == 64
    assert len(t.ccxs) == 8
    assert t.ccx_of(0) == t.ccx_of(32) == 0
    assert t.siblings(5) == (37,)
    assert t.package_of(63) == 1


def test_discover_names_missing_file(tmp_path):
    root = make_sysfs(tmp_path)
    (root / "cpu3" / "topology" / "thread_siblings_list").unlink()
    with pytest.raises(TopologyError, match="cpu3/topology/thread_siblings_list"):
        discover(root)


def test_discover_rejects_heterogeneous(tmp_path):
    root = make_sysfs(tmp_path, threads=2)
    (root / "cpu0" / "topology" / "thread_siblings_list").write_text("0\n")
    with pytest.raises(TopologyError, match="heterogeneous"):
        discover(root)


def test_hash_is_stable_and_layout_sensitive():
    assert epyc_7502_dual().hash() == epyc_7502_dual().hash()
    assert synthetic(1).hash() != synthetic(2).hash()
