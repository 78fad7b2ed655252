"""Platform control and sensing.

One interface, two implementations: :class:`HardwareBackend` drives a real
machine through cpufreq/cpuidle/hotplug sysfs files and the ``msr`` device;
:class:`pmchar.simcpu.SimulatedBackend` implements the same surface from a
behavioral model. Effective frequency is always derived from aperf/mperf
deltas, never from a "current frequency" file, because requested and applied
frequencies differ for up to a millisecond or more.
"""

from __future__ import annotations

import abc
import enum
import os
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .topology import SYSFS_CPU_ROOT, Topology, discover

ENERGY_RAW_BITS = 32
ENERGY_RAW_MOD = 1 << ENERGY_RAW_BITS

# Vendor-documented register addresses (family 17h).
MSR_MPERF = 0xE7
MSR_APERF = 0xE8
MSR_RAPL_PWR_UNIT = 0xC0010299
MSR_CORE_ENERGY_STAT = 0xC001029A
MSR_PKG_ENERGY_STAT = 0xC001029B

N_CSTATES = 3


class SysifError(RuntimeError):
    """Base class for platform interface failures."""


class PermissionDeniedError(SysifError):
    pass


class InvalidFrequencyError(SysifError, ValueError):
    pass


class OfflineCpuError(SysifError):
    pass


class UnsupportedDomainError(SysifError, ValueError):
    pass


class CStateError(SysifError, ValueError):
    pass


class BootCpuError(SysifError, ValueError):
    pass


class EnergyDomain(str, enum.Enum):
    PACKAGE = "package"
    CORE = "core"


@dataclass(frozen=True)
class FreqSetting:
    cpu: int
    frequency: float  # Hz


@dataclass(frozen=True)
class CounterSnapshot:
    cpu: int
    timestamp: int  # ns
    cycles: int
    aperf: int
    mperf: int


def effective_frequency(a: CounterSnapshot, b: CounterSnapshot, nominal: float) -> float:
    """Mean applied frequency between two snapshots: Δaperf/Δmperf × nominal."""
    dm = b.mperf - a.mperf
    if dm <= 0:
        return 0.0
    return (b.aperf - a.aperf) / dm * nominal


@dataclass(frozen=True)
class EnergyReading:
    """Energy-counter snapshot.

    ``raw`` is the register value, ``joules = raw * unit``; ``accumulated`` is
    the reader's wrap-corrected running total for this locus.
    """

    domain: EnergyDomain
    locus: int
    raw: int
    unit: float
    timestamp: int  # ns
    accumulated: float = 0.0

    @property
    def joules(self) -> float:
        return self.raw * self.unit


def energy_delta(a: EnergyReading, b: EnergyReading) -> float:
    """Wrap-corrected energy in J between two readings of the same locus.

    Correct as long as the counter wraps at most once between readings.
    """
    if (a.domain, a.locus) != (b.domain, b.locus):
        raise ValueError("energy readings belong to different loci")
    return ((b.raw - a.raw) % ENERGY_RAW_MOD) * b.unit


@dataclass(frozen=True)
class CStateControl:
    cpu: int
    state: int
    enabled: bool


@dataclass
class ControlState:
    """Every piece of machine state the probes may mutate."""

    frequencies: dict[int, float] = field(default_factory=dict)
    governors: dict[int, str] = field(default_factory=dict)
    cstate_disabled: dict[int, tuple[bool, ...]] = field(default_factory=dict)
    online: dict[int, bool] = field(default_factory=dict)


class Backend(abc.ABC):
    """Platform control-and-sensing surface shared by both backends."""

    name: str = "abstract"
    is_simulated: bool = False

    topology: Topology

    @property
    @abc.abstractmethod
    def frequencies(self) -> tuple[float, ...]:
        """Available discrete P-state frequencies in Hz, ascending."""

    @property
    def nominal_frequency(self) -> float:
        return max(self.frequencies)

    @property
    def min_frequency(self) -> float:
        return min(self.frequencies)

    def check_frequency(self, frequency: float) -> float:
        for f in self.frequencies:
            if abs(f - frequency) < 1.0:
                return f
        valid = ", ".join(f"{f / 1e9:g} GHz" for f in self.frequencies)
        raise InvalidFrequencyError(f"{frequency / 1e9:g} GHz is not available; valid: {valid}")

    @abc.abstractmethod
    def set_frequency(self, s: FreqSetting) -> None: ...

    @abc.abstractmethod
    def requested_frequency(self, cpu: int) -> float: ...

    @abc.abstractmethod
    def read_counters(self, cpu: int) -> CounterSnapshot: ...

    @abc.abstractmethod
    def read_energy(self, domain: EnergyDomain | str, locus: int) -> EnergyReading: ...

    @abc.abstractmethod
    def set_cstate(self, c: CStateControl) -> None: ...

    @abc.abstractmethod
    def cstate_enabled(self, cpu: int, state: int) -> bool: ...

    @abc.abstractmethod
    def set_online(self, cpu: int, flag: bool) -> None: ...

    @abc.abstractmethod
    def is_online(self, cpu: int) -> bool: ...

    @abc.abstractmethod
    def pin_current_thread(self, cpu: int) -> None: ...

    @abc.abstractmethod
    def now_ns(self) -> int: ...

    @abc.abstractmethod
    def sleep_ns(self, duration: int) -> None: ...

    @abc.abstractmethod
    def control_state(self) -> ControlState: ...

    @abc.abstractmethod
    def apply_control_state(self, state: ControlState) -> list[str]:
        """Restore ``state``; return per-item failure messages."""

    # -- conveniences shared by both backends ------------------------------

    def set_frequencies(self, cpus, frequency: float) -> None:
        for cpu in cpus:
            self.set_frequency(FreqSetting(cpu, frequency))

    def deepest_enabled_cstate(self, cpu: int) -> int:
        for state in range(N_CSTATES - 1, 0, -1):
            if self.cstate_enabled(cpu, state):
                return state
        return 0

    def model_version(self) -> str:
        return "hardware"

    def default_control_state(self) -> ControlState:
        """All threads online, all C-states enabled, nominal frequency."""
        cpus = self.topology.cpus
        return ControlState(
            frequencies={c: self.nominal_frequency for c in cpus},
            governors={},
            cstate_disabled={c: (False,) * N_CSTATES for c in cpus},
            online={c: True for c in cpus},
        )


class MsrDevice:
    """Reads 64-bit model-specific registers through ``/dev/cpu/N/msr``."""

    def __init__(self, root: Path | str = "/dev/cpu") -> None:
        self.root = Path(root)
        self._fds: dict[int, int] = {}
        self._lock = threading.Lock()

    def _fd(self, cpu: int) -> int:
        with self._lock:
            fd = self._fds.get(cpu)
            if fd is None:
                path = self.root / str(cpu) / "msr"
                try:
                    fd = os.open(path, os.O_RDONLY)
                except PermissionError as exc:
                    raise PermissionDeniedError(f"permission denied opening {path}") from exc
                except OSError as exc:
                    raise SysifError(f"cannot open {path}: {exc.strerror}") from exc
                self._fds[cpu] = fd
            return fd

    def read(self, cpu: int, register: int) -> int:
        data = os.pread(self._fd(cpu), 8, register)
        if len(data) != 8:
            raise SysifError(f"short MSR read of {register:#x} on CPU {cpu}")
        return struct.unpack("<Q", data)[0]

    def close(self) -> None:
        with self._lock:
            for fd in self._fds.values():
                os.close(fd)
            self._fds.clear()


class HardwareBackend(Backend):
    """Real-machine implementation over sysfs and the ``msr`` device.

    Both roots are parameters so the logic can be exercised against a fake
    tree. Frequency control assumes the ``userspace`` governor; call
    :meth:`prepare` to select it (recorded by :meth:`control_state`).
    """

    name = "hardware"

    def __init__(
        self,
        sysfs_root: Path | str = SYSFS_CPU_ROOT,
        msr_root: Path | str = "/dev/cpu",
        topology: Topology | None = None,
    ) -> None:
        self.root = Path(sysfs_root)
        self.msr = MsrDevice(msr_root)
        self.topology = topology if topology is not None else discover(self.root)
        self._energy_lock = threading.Lock()
        self._energy_acc: dict[tuple[EnergyDomain, int], tuple[int, float]] = {}
        self._unit: float | None = None

    # -- sysfs helpers -----------------------------------------------------

    def _path(self, cpu: int, *parts: str) -> Path:
        return self.root.joinpath(f"cpu{cpu}", *parts)

    def _read(self, path: Path) -> str:
        try:
            return path.read_text().strip()
        except PermissionError as exc:
            raise PermissionDeniedError(f"permission denied reading {path}") from exc
        except OSError as exc:
            raise SysifError(f"cannot read {path}: {exc.strerror}") from exc

    def _write(self, path: Path, value: str) -> None:
        try:
            path.write_text(value)
        except PermissionError as exc:
            raise PermissionDeniedError(f"permission denied writing {path}") from exc
        except OSError as exc:
            raise SysifError(f"cannot write {path}: {exc.strerror}") from exc

    @property
    def frequencies(self) -> tuple[float, ...]:
        text = self._read(self._path(0, "cpufreq", "scaling_available_frequencies"))
        return tuple(sorted(float(k) * 1e3 for k in text.split()))

    def prepare(self) -> None:
        for cpu in self.topology.cpus:
            if self.is_online(cpu):
                self._write(self._path(cpu, "cpufreq", "scaling_governor"), "userspace")

    def check_prerequisites(self) -> list[str]:
        """Return actionable problems that would make control operations fail."""
        problems = []
        if hasattr(os, "geteuid") and os.geteuid() != 0:
            problems.append("permission: root privileges are required for frequency, C-state and MSR access")
        gov = self._path(0, "cpufreq", "scaling_available_governors")
        if not gov.exists():
            problems.append(f"missing cpufreq interface: {gov}")
        elif "userspace" not in self._read(gov).split():
            problems.append("the 'userspace' cpufreq governor is not available (load cpufreq_userspace)")
        if not self._path(0, "cpuidle").exists():
            problems.append(f"missing cpuidle interface: {self._path(0, 'cpuidle')}")
        msr = self.msr.root / "0" / "msr"
        if not msr.exists():
            problems.append(f"permission/interface: {msr} not found (modprobe msr)")
        elif not os.access(msr, os.R_OK):
            problems.append(f"permission: cannot read {msr}")
        return problems

    # -- control -----------------------------------------------------------

    def set_frequency(self, s: FreqSetting) -> None:
        freq = self.check_frequency(s.frequency)
        if not self.is_online(s.cpu):
            raise OfflineCpuError(f"CPU {s.cpu} is offline")
        self._write(self._path(s.cpu, "cpufreq", "scaling_setspeed"), str(int(round(freq / 1e3))))

    def requested_frequency(self, cpu: int) -> float:
        text = self._read(self._path(cpu, "cpufreq", "scaling_setspeed"))
        try:
            return float(text) * 1e3
        except ValueError:  # "<unsupported>" under non-userspace governors
            return float(self._read(self._path(cpu, "cpufreq", "scaling_cur_freq"))) * 1e3

    def set_cstate(self, c: CStateControl) -> None:
        if not 0 <= c.state < N_CSTATES:
            raise CStateError(f"invalid C-state index {c.state}")
        if c.state == 0 and not c.enabled:
            raise CStateError("C-state 0 (active) cannot be disabled")
        self._write(self._path(c.cpu, "cpuidle", f"state{c.state}", "disable"), "0" if c.enabled else "1")

    def cstate_enabled(self, cpu: int, state: int) -> bool:
        return self._read(self._path(cpu, "cpuidle", f"state{state}", "disable")) == "0"

    def set_online(self, cpu: int, flag: bool) -> None:
        if cpu == 0:
            raise BootCpuError("the boot CPU cannot be taken offline")
        self._write(self._path(cpu, "online"), "1" if flag else "0")

    def is_online(self, cpu: int) -> bool:
        path = self._path(cpu, "online")
        if not path.exists():  # the boot CPU has no online file
            return True
        return self._read(path) == "1"

    def pin_current_thread(self, cpu: int) -> None:
        if not self.is_online(cpu):
            raise OfflineCpuError(f"CPU {cpu} is offline")
        try:
            os.sched_setaffinity(0, {cpu})
        except OSError as exc:
            raise SysifError(f"cannot pin to CPU {cpu}: {exc.strerror}") from exc

    # -- sensing -----------------------------------------------------------

    def read_counters(self, cpu: int) -> CounterSnapshot:
        if not self.is_online(cpu):
            raise OfflineCpuError(f"CPU {cpu} is offline")
        ts = time.monotonic_ns()
        aperf = self.msr.read(cpu, MSR_APERF)
        mperf = self.msr.read(cpu, MSR_MPERF)
        # aperf counts actual cycles in C0, which is what cycles means here.
        return CounterSnapshot(cpu, ts, aperf, aperf, mperf)

    def energy_unit(self) -> float:
        if self._unit is None:
            raw = self.msr.read(0, MSR_RAPL_PWR_UNIT)
            esu = (raw >> 8) & 0x1F
            self._unit = 2.0 ** -esu
        return self._unit

    def read_energy(self, domain: EnergyDomain | str, locus: int) -> EnergyReading:
        try:
            domain = EnergyDomain(domain)
        except ValueError:
            raise UnsupportedDomainError(f"unsupported energy domain {domain!r}") from None
        if domain is EnergyDomain.PACKAGE:
            pkg = self.topology.packages[locus]
            cpu, register = pkg.cpus[0], MSR_PKG_ENERGY_STAT
        else:
            cpu, register = locus, MSR_CORE_ENERGY_STAT
        unit = self.energy_unit()
        with self._energy_lock:
            raw = self.msr.read(cpu, register) & (ENERGY_RAW_MOD - 1)
            ts = time.monotonic_ns()
            key = (domain, locus)
            last = self._energy_acc.get(key)
            acc = 0.0 if last is None else last[1] + ((raw - last[0]) % ENERGY_RAW_MOD) * unit
            self._energy_acc[key] = (raw, acc)
        return EnergyReading(domain, locus, raw, unit, ts, acc)

    def now_ns(self) -> int:
        return time.monotonic_ns()

    def sleep_ns(self, duration: int) -> None:
        if duration > 0:
            time.sleep(duration / 1e9)

    # -- snapshot / restore ------------------------------------------------

    def control_state(self) -> ControlState:
        st = ControlState()
        for cpu in self.topology.cpus:
            online = self.is_online(cpu)
            st.online[cpu] = online
            if not online:
                continue
            st.governors[cpu] = self._read(self._path(cpu, "cpufreq", "scaling_governor"))
            if st.governors[cpu] == "userspace":
                st.frequencies[cpu] = self.requested_frequency(cpu)
            st.cstate_disabled[cpu] = tuple(
                not self.cstate_enabled(cpu, s) for s in range(N_CSTATES)
            )
        return st

    def apply_control_state(self, state: ControlState) -> list[str]:
        failures = []

        def attempt(desc, fn, *args):
            try:
                fn(*args)
            except SysifError as exc:
                failures.append(f"{desc}: {exc}")

        for cpu, online in sorted(state.online.items()):
            if cpu != 0 and self.is_online(cpu) != online:
                attempt(f"cpu{cpu} online", self.set_online, cpu, online)
        for cpu, gov in sorted(state.governors.items()):
            attempt(f"cpu{cpu} governor", self._write, self._path(cpu, "cpufreq", "scaling_governor"), gov)
        for cpu, freq in sorted(state.frequencies.items()):
            if state.governors.get(cpu, "userspace") == "userspace":
                attempt(f"cpu{cpu} frequency", self.set_frequency, FreqSetting(cpu, freq))
        for cpu, disabled in sorted(state.cstate_disabled.items()):
            for s, dis in enumerate(disabled):
                if s == 0:
                    continue
                attempt(f"cpu{cpu} state{s}", self.set_cstate, CStateControl(cpu, s, not dis))
        return failures

    def default_control_state(self) -> ControlState:
        st = super().default_control_state()
        st.frequencies = {}
        st.governors = {}
        for cpu in self.topology.cpus:
            path = self._path(cpu, "cpufreq", "scaling_available_governors")
            if path.exists():
                govs = self._read(path).split()
                st.governors[cpu] = "schedutil" if "schedutil" in govs else govs[0]
        return st
