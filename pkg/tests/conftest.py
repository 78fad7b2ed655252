import os
import struct
from pathlib import Path

import pytest

from pmchar.simcpu import SimModel, SimulatedBackend
from pmchar.sysif import MSR_RAPL_PWR_UNIT


def _w(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text + "\n")


def _span(cpus) -> str:
    return ",".join(str(c) for c in sorted(cpus))


def make_sysfs(root: Path, packages=1, ccxs=2, cores_per_ccx=4, threads=2, governor="userspace"):
    """Linux-style cpu tree: thread 0 of every core first, then the siblings."""
    n_cores = packages * ccxs * cores_per_ccx
    n_cpus = n_cores * threads
    _w(root / "present", f"0-{n_cpus - 1}")
    for cpu in range(n_cpus):
        core = cpu % n_cores
        pkg = core // (ccxs * cores_per_ccx)
        ccx = core // cores_per_ccx
        sib = [core + t * n_cores for t in range(threads)]
        l3 = [c + t * n_cores for t in range(threads) for c in range(ccx * cores_per_ccx, (ccx + 1) * cores_per_ccx)]
        d = root / f"cpu{cpu}"
        _w(d / "topology" / "physical_package_id", str(pkg))
        _w(d / "topology" / "thread_siblings_list", _span(sib))
        _w(d / "cache" / "index0" / "level", "1")
        _w(d / "cache" / "index3" / "level", "3")
        _w(d / "cache" / "index3" / "shared_cpu_list", _span(l3))
        if cpu:
            _w(d / "online", "1")
        f = d / "cpufreq"
        _w(f / "scaling_available_frequencies", "2500000 2200000 1500000")
        _w(f / "scaling_available_governors", "performance schedutil userspace")
        _w(f / "scaling_governor", governor)
        _w(f / "scaling_setspeed", "2500000" if governor == "userspace" else "<unsupported>")
        _w(f / "scaling_cur_freq", "2500000")
        for s in range(3):
            _w(d / "cpuidle" / f"state{s}" / "disable", "0")
    return root


def write_msr(root: Path, cpu: int, register: int, value: int) -> None:
    """Store one register in a sparse file at offset ``register``.

    Adjacent register numbers overlap in such a file, so only isolated
    registers can be faked this way; see :class:`FakeMsr` for the rest.
    """
    path = root / str(cpu) / "msr"
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o600)
    try:
        os.pwrite(fd, struct.pack("<Q", value), register)
    finally:
        os.close(fd)


class FakeMsr:
    def __init__(self, root: Path, esu: int = 16):
        self.root = root
        self.regs: dict[tuple[int, int], int] = {}
        self.esu = esu

    def read(self, cpu, register):
        if register == MSR_RAPL_PWR_UNIT:
            return (self.esu << 8) | 0x3
        return self.regs.get((cpu, register), 0)

    def write(self, cpu, register, value):
        self.regs[(cpu, register)] = value

    def close(self):
        pass


def make_msr(root: Path, n_cpus: int):
    """Device nodes that exist and are readable, for prerequisite checks."""
    for cpu in range(n_cpus):
        write_msr(root, cpu, 0x10, 0)
    return root


@pytest.fixture
def fake_machine(tmp_path):
    sysfs = make_sysfs(tmp_path / "sys")
    msr = make_msr(tmp_path / "dev", 16)
    return sysfs, msr


@pytest.fixture
def sim():
    return SimulatedBackend(SimModel(), seed=1)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
