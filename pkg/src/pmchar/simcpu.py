"""Simulated processor backend.

:class:`SimModel` holds the behavioral parameters (defaults are the values
measured on a dual EPYC 7502 system); :class:`SimulatedBackend` implements the
:class:`~pmchar.sysif.Backend` surface on top of it with a single logical
clock. Time only moves through :meth:`SimulatedBackend.step` (directly or via
``sleep_ns`` and kernel execution), so a whole probe run is deterministic for a
given seed.

Frequency requests are applied at the next update-slot boundary plus a fixed
transition delay. System and RAPL power are piecewise constant between state
changes; the backend keeps the history so an external-analyzer trace can be
synthesized after the fact.
"""

from __future__ import annotations

import bisect
import dataclasses
import hashlib
import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np

from .sysif import (
    ENERGY_RAW_MOD,
    N_CSTATES,
    Backend,
    BootCpuError,
    ControlState,
    CounterSnapshot,
    CStateControl,
    CStateError,
    EnergyDomain,
    EnergyReading,
    FreqSetting,
    OfflineCpuError,
    SysifError,
    UnsupportedDomainError,
)
from .topology import Topology, epyc_7502_dual

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

MODEL_VERSION = "1"


class SimTimeError(SysifError):
    """Raised when the simulated clock would move backwards."""


class ModelError(ValueError):
    """Raised for model parameter sets violating their invariants."""


def _ghz_key(f_hz: float) -> str:
    return f"{f_hz / 1e9:g}"


@dataclass
class WorkloadClass:
    """Per-thread power characteristics of one workload class at nominal frequency."""

    system_w: float = 0.0  # dynamic AC power per active thread
    rapl_core_w: float = 0.0  # RAPL core-domain power for the first thread of a core
    memory: float = 0.0  # share of the CCX memory bandwidth demand (0 = compute only)
    data_delta: float = 0.0  # system power fraction added at operand Hamming weight 1
    ipc: float = 1.0


def default_classes() -> dict[str, WorkloadClass]:
    return {
        "idle": WorkloadClass(),
        "pause": WorkloadClass(0.0, 0.35, ipc=0.2),
        "busy": WorkloadClass(0.40, 0.90, ipc=1.0),
        "add": WorkloadClass(0.50, 1.10, ipc=3.0),
        "mul": WorkloadClass(1.00, 1.60, ipc=2.0),
        "fma": WorkloadClass(0.0, 0.0, ipc=3.23),  # derived from the throttle targets
        "sqrt": WorkloadClass(0.60, 1.50, ipc=0.25),
        "mem_read": WorkloadClass(0.30, 0.80, memory=1.0, ipc=0.5),
        "mem_write": WorkloadClass(0.35, 0.90, memory=1.0, ipc=0.5),
        "triad": WorkloadClass(0.35, 0.90, memory=1.0, ipc=0.6),
        "xor": WorkloadClass(0.56, 1.30, data_delta=0.076, ipc=3.0),
        "shr": WorkloadClass(0.45, 1.00, data_delta=0.005, ipc=2.0),
        "chase": WorkloadClass(0.20, 0.60, ipc=0.05),
    }


@dataclass
class IdlePower:
    base_all_c2_w: float = 99.1
    first_c1_delta_w: float = 81.2
    per_extra_c1_core_w: float = 0.09
    per_active_core_w: float = 0.33
    per_active_sibling_w: float = 0.05
    first_active_total_w: float = 180.4


@dataclass
class CStateLatency:
    c1_us: dict[str, float] = field(default_factory=lambda: {"1.5": 1.5, "2.2": 1.0, "2.5": 1.0})
    c1_jitter_us: float = 0.02
    c2_min_us: float = 20.0
    c2_max_us: float = 25.0
    remote_overhead_us: float = 1.0


@dataclass
class Throttle:
    freq_1t_ghz: float = 2.1
    freq_2t_ghz: float = 2.0
    ipc_1t: float = 3.23
    ipc_2t: float = 3.56
    system_1t_w: float = 489.0
    system_2t_w: float = 509.0
    freq_sigma_1t_mhz: float = 0.82
    freq_sigma_2t_mhz: float = 3.04
    ipc_sigma_1t: float = 0.004
    ipc_sigma_2t: float = 0.008


@dataclass
class Rapl:
    esu: int = 16
    update_ms: float = 1.0
    package_cap_w: float = 170.0
    uncore_active_w: float = 30.0
    uncore_c1_w: float = 18.0
    uncore_idle_w: float = 8.0
    mem_uncore_w: float = 6.0
    sibling_factor: float = 0.35
    noise_rel: float = 3e-4  # package domain, per segment
    core_noise_rel: float = 4e-3  # per core, per segment
    rapl_data_delta: float = 0.0008


@dataclass
class Memory:
    ccx_max_gbs: float = 22.0
    single_core_fraction: float = 0.6
    extra_core_degradation: float = 0.02
    socket_max_gbs: float = 130.0
    dram_w_per_socket: float = 60.0
    # Only the ordering is calibrated: auto matches P0 in bandwidth and beats it in latency.
    io_die: dict[str, dict[str, float]] = field(
        default_factory=lambda: {
            "auto": {"latency_ns": 92.0, "bandwidth": 1.0},
            "P0": {"latency_ns": 96.0, "bandwidth": 1.0},
            "P1": {"latency_ns": 103.0, "bandwidth": 0.9},
            "P2": {"latency_ns": 108.0, "bandwidth": 0.8},
            "P3": {"latency_ns": 115.0, "bandwidth": 0.7},
        }
    )


@dataclass
class SimModel:
    """Behavioral parameter set; every default traces to a measured value.

    The L3 latency table is a monotone placeholder (absolute values were never
    published numerically); only its ordering is meaningful.
    """

    version: str = MODEL_VERSION
    frequencies_ghz: tuple[float, ...] = (1.5, 2.2, 2.5)
    nominal_ghz: float = 2.5
    update_interval_us: float = 1000.0
    transition_down_us: float = 390.0
    transition_up_us: float = 360.0
    revert_window_ms: float = 5.0
    revert_latency_us: float = 1.0
    revert_pairs_ghz: tuple[tuple[float, float], ...] = ((2.2, 2.5),)
    ccx_coupling_ghz: dict[str, dict[str, float]] = field(
        default_factory=lambda: {
            "1.5": {"1.5": 1.499, "2.2": 1.466, "2.5": 1.428},
            "2.2": {"1.5": 2.200, "2.2": 2.199, "2.5": 2.000},
            "2.5": {"1.5": 2.497, "2.2": 2.499, "2.5": 2.499},
        }
    )
    l3_latency_ns: dict[str, float] = field(
        default_factory=lambda: {"1.5": 24.0, "2.2": 19.0, "2.5": 17.5}
    )
    l1_latency_cycles: float = 4.0
    l2_latency_cycles: float = 12.0
    l1_bytes: int = 32 * 1024
    l2_bytes: int = 512 * 1024
    l3_bytes: int = 16 * 1024 * 1024
    latency_noise_rel: float = 0.02
    idle_power: IdlePower = field(default_factory=IdlePower)
    active_freq_exponent: float = 2.0
    power_noise_w: float = 0.5
    cstate_latency: CStateLatency = field(default_factory=CStateLatency)
    throttle: Throttle = field(default_factory=Throttle)
    rapl: Rapl = field(default_factory=Rapl)
    memory: Memory = field(default_factory=Memory)
    classes: dict[str, WorkloadClass] = field(default_factory=default_classes)
    minimal_cycles_per_iter: float = 4.0
    runtime_noise_rel: float = 1e-3
    disturbance_prob: float = 1e-4
    disturbance_us: float = 30.0
    offline_anomaly: bool = False
    offline_anomaly_threads: int = 1

    def __post_init__(self) -> None:
        self.validate()

    # -- derived values in SI units ----------------------------------------

    @property
    def frequencies(self) -> tuple[float, ...]:
        return tuple(sorted(f * 1e9 for f in self.frequencies_ghz))

    @property
    def nominal(self) -> float:
        return self.nominal_ghz * 1e9

    def coupling_matrix(self) -> np.ndarray:
        """Effective frequency in Hz indexed [own setting, max other setting]."""
        keys = [_ghz_key(f) for f in self.frequencies]
        return np.array([[self.ccx_coupling_ghz[a][b] * 1e9 for b in keys] for a in keys])

    def l3_latency(self, max_setting_hz: float) -> float:
        return self.l3_latency_ns[_ghz_key(max_setting_hz)]

    def validate(self) -> None:
        freqs = self.frequencies
        keys = [_ghz_key(f) for f in freqs]
        if self.nominal not in freqs:
            raise ModelError("nominal frequency must be one of the available frequencies")
        if not self.update_interval_us > self.transition_down_us >= 0 or self.transition_up_us < 0:
            raise ModelError("require update_interval > transition_down >= 0 and transition_up >= 0")
        for a in keys:
            row = self.ccx_coupling_ghz.get(a)
            if row is None or any(b not in row for b in keys):
                raise ModelError(f"coupling table must cover every frequency pair (missing row/col for {a})")
            if abs(row[a] - float(a)) > 0.005 * float(a):
                raise ModelError(f"coupling diagonal must equal the set frequency ({a} -> {row[a]})")
        for k in keys:
            if k not in self.l3_latency_ns:
                raise ModelError(f"L3 latency table lacks {k} GHz")
        lat = [self.l3_latency_ns[k] for k in keys]
        if any(b > a for a, b in zip(lat, lat[1:])):
            raise ModelError("L3 latency must be non-increasing in frequency")
        powers = dataclasses.asdict(self.idle_power)
        powers.update({"power_noise_floor": 1.0})
        t = self.throttle
        for name, v in list(powers.items()) + [
            ("system_1t_w", t.system_1t_w), ("system_2t_w", t.system_2t_w),
            ("package_cap_w", self.rapl.package_cap_w),
        ]:
            if v <= 0:
                raise ModelError(f"power {name} must be positive")
        if self.power_noise_w < 0:
            raise ModelError("power noise must be >= 0")

    # -- serialization ------------------------------------------------------

    def to_mapping(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        doc = json.dumps(self.to_mapping(), sort_keys=True, default=list)
        return hashlib.sha256(doc.encode()).hexdigest()[:8]

    @classmethod
    def from_mapping(cls, data: dict[str, Any]) -> "SimModel":
        base = cls()
        return _merge(base, data)

    @classmethod
    def load(cls, path: Path | str) -> "SimModel":
        with open(path, "rb") as fh:
            return cls.from_mapping(tomllib.load(fh))


def _merge(obj, data):
    if not isinstance(data, dict):
        raise ModelError(f"expected a table, got {data!r}")
    changes = {}
    fields_ = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        if key not in fields_:
            raise ModelError(f"unknown model parameter {key!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            changes[key] = _merge(current, value)
        elif key == "classes":
            merged = dict(current)
            for name, spec in value.items():
                merged[name] = _merge(current.get(name, WorkloadClass()), spec)
            changes[key] = merged
        elif isinstance(current, dict):
            merged = dict(current)
            merged.update(value)
            changes[key] = merged
        elif isinstance(current, tuple):
            changes[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            changes[key] = type(current)(value) if current is not None else value
    try:
        return dataclasses.replace(obj, **changes)
    except TypeError as exc:
        raise ModelError(str(exc)) from exc


class Rates(NamedTuple):
    """Piecewise-constant quantities for one state of the machine."""

    system_w: float
    core_w: np.ndarray  # RAPL core domain per core
    pkg_w: np.ndarray  # RAPL package domain per package
    aperf_hz: np.ndarray  # per CPU, counts/s
    mperf_hz: np.ndarray
    eff_hz: np.ndarray  # per core


@dataclass(frozen=True)
class SimState:
    time_ns: int
    applied: tuple[float, ...]
    pending: int


IDLE = 0
C0, C1, C2 = 0, 1, 2


class SimulatedBackend(Backend):
    """Desk-scale stand-in for the real machine.

    Single writer: every mutation happens under one lock and closes the current
    power/counter segment first, so histories are consistent for readers.
    """

    name = "simulated"
    is_simulated = True

    def __init__(
        self,
        model: SimModel | None = None,
        topology: Topology | None = None,
        seed: int = 0,
        energy_raw_offset: int = 0,
    ) -> None:
        self.model = model if model is not None else SimModel()
        self.topology = topology if topology is not None else epyc_7502_dual()
        self.seed = int(seed)
        self._rng = np.random.default_rng(np.random.SeedSequence([self.seed, 1]))
        self._noise_rng = np.random.default_rng(np.random.SeedSequence([self.seed, 2]))
        self._lock = threading.RLock()
        self.bios = {"io_die_pstate": "auto", "dram_mhz": 1600}

        topo = self.topology
        n_cpu = max(topo.cpus) + 1
        self._n_cpu = n_cpu
        self._cpu_core = np.full(n_cpu, -1, dtype=np.int64)
        for core in topo.cores:
            for c in core.cpus:
                self._cpu_core[c] = core.index
        self._core_threads = np.array([core.cpus for core in topo.cores], dtype=np.int64)
        self._ccx_cores = np.array([[c.index for c in ccx.cores] for ccx in topo.ccxs], dtype=np.int64)
        self._core_ccx = np.empty(topo.n_cores, dtype=np.int64)
        for ccx in topo.ccxs:
            for c in ccx.cores:
                self._core_ccx[c.index] = ccx.index
        self._core_pkg = np.array([topo.package_of(core.cpus[0]) for core in topo.cores], dtype=np.int64)
        self._ccx_pkg = np.array([topo.package_of(ccx.cpus[0]) for ccx in topo.ccxs], dtype=np.int64)
        self._n_pkg = len(topo.packages)
        self._cores_per_pkg = topo.n_cores // self._n_pkg

        m = self.model
        self._freqs = np.array(m.frequencies)
        self._coupling = m.coupling_matrix()
        self._class_names = list(m.classes)
        self._class_code = {n: i for i, n in enumerate(self._class_names)}
        if "idle" not in self._class_code or self._class_code["idle"] != IDLE:
            raise ModelError("workload class 'idle' must be the first class")
        cls = [m.classes[n] for n in self._class_names]
        self._cls_sys = np.array([c.system_w for c in cls])
        self._cls_core = np.array([c.rapl_core_w for c in cls])
        self._cls_mem = np.array([c.memory for c in cls])
        self._cls_data = np.array([c.data_delta for c in cls])
        self._fma = self._class_code.get("fma", -1)
        self._pause = self._class_code.get("pause", IDLE)
        self._fma_core_w = self._derive_fma_power()

        nom = m.nominal
        self._requested = np.full(n_cpu, nom)
        self._applied = np.full(n_cpu, nom)
        self._pending_target = np.full(n_cpu, nom)
        self._pending_at = np.full(n_cpu, np.inf)
        self._prev = np.full(n_cpu, nom)
        self._done_at = np.full(n_cpu, -np.inf)
        self._pending_revert = np.zeros(n_cpu, dtype=bool)
        self._online = np.zeros(n_cpu, dtype=bool)
        self._online[list(topo.cpus)] = True
        self._cdis = np.zeros((n_cpu, N_CSTATES), dtype=bool)
        self._activity = np.zeros(n_cpu, dtype=np.int64)
        self._weight = np.zeros(n_cpu)
        self._pinned: dict[int, int] = {}

        self._t = 0.0
        self._seg_t0 = 0.0
        self._rates: Rates | None = None
        self._rapl_noise: tuple[np.ndarray, np.ndarray] | None = None
        self._cum_core = np.zeros(topo.n_cores)
        self._cum_pkg = np.zeros(self._n_pkg)
        self._cum_aperf = np.zeros(n_cpu)
        self._cum_mperf = np.zeros(n_cpu)
        self._energy_offset = int(energy_raw_offset)
        # closed-segment history: start time, system power, cumulative energies at start, rates
        self._h_t0: list[float] = []
        self._h_sys: list[float] = []
        self._h_core: list[tuple[np.ndarray, np.ndarray]] = []
        self._h_pkg: list[tuple[np.ndarray, np.ndarray]] = []
        self._stream_count = 0

    # -- Backend basics ----------------------------------------------------

    @property
    def frequencies(self) -> tuple[float, ...]:
        return tuple(float(f) for f in self._freqs)

    def model_version(self) -> str:
        return f"{self.model.version}-{self.model.digest()}"

    def now_ns(self) -> int:
        return int(round(self._t))

    @property
    def now(self) -> float:
        return self._t

    def sleep_ns(self, duration: float) -> None:
        if duration < 0:
            raise SimTimeError("negative sleep")
        self.step(self._t + duration)

    def step(self, now: float) -> SimState:
        """Advance the clock to ``now``, applying requests whose time has come."""
        with self._lock:
            if now < self._t - 1e-6:
                raise SimTimeError(f"time regression: {now} < {self._t}")
            while True:
                ev = float(self._pending_at.min())
                if ev > now:
                    break
                self._t = max(self._t, ev)
                for cpu in np.flatnonzero(self._pending_at <= ev):
                    self._apply(int(cpu))
            self._t = max(self._t, now)
            return SimState(self.now_ns(), tuple(self._applied[list(self.topology.cpus)]), int(np.isfinite(self._pending_at).sum()))

    def next_event(self) -> float:
        return float(self._pending_at.min())

    # -- segment bookkeeping -----------------------------------------------

    def _current_rates(self) -> Rates:
        if self._rates is None:
            self._rates = self._evaluate(self._applied, self._online, self._cdis, self._activity, self._weight)
            rp = self.model.rapl
            self._rapl_noise = (
                1.0 + rp.core_noise_rel * self._noise_rng.standard_normal(self.topology.n_cores),
                1.0 + rp.noise_rel * self._noise_rng.standard_normal(self._n_pkg),
            )
        return self._rates

    def _noisy_rapl(self) -> tuple[np.ndarray, np.ndarray]:
        r = self._current_rates()
        nc, npk = self._rapl_noise
        return r.core_w * nc, r.pkg_w * npk

    def _mutate(self) -> None:
        """Close the open segment at the current time; call before any state change."""
        t = self._t
        if t > self._seg_t0:
            r = self._current_rates()
            core_w, pkg_w = self._noisy_rapl()
            dt = (t - self._seg_t0) / 1e9
            self._h_t0.append(self._seg_t0)
            self._h_sys.append(r.system_w)
            self._h_core.append((self._cum_core.copy(), core_w))
            self._h_pkg.append((self._cum_pkg.copy(), pkg_w))
            self._cum_core += core_w * dt
            self._cum_pkg += pkg_w * dt
            self._cum_aperf += r.aperf_hz * dt
            self._cum_mperf += r.mperf_hz * dt
            self._seg_t0 = t
        self._rates = None

    # -- model evaluation --------------------------------------------------

    def _thread_states(self, online, cdis, activity) -> np.ndarray:
        st = np.where(cdis[:, 2] == False, C2, np.where(cdis[:, 1] == False, C1, C0))  # noqa: E712
        st = np.where(activity != IDLE, C0, st)
        st = np.where(online, st, C2)
        if self.model.offline_anomaly:
            offline = [c for c in self.topology.cpus if not online[c]]
            for c in offline[: self.model.offline_anomaly_threads]:
                st[c] = C1
        return st

    def _effective(self, applied, activity) -> np.ndarray:
        """Effective frequency per core (Hz) from CCX coupling and FMA throttling."""
        thr = self._core_threads
        core_set = applied[thr].max(axis=1)
        idx = np.searchsorted(self._freqs, core_set)
        idx = np.clip(idx, 0, len(self._freqs) - 1)
        by_ccx = idx[self._ccx_cores]
        cpc = by_ccx.shape[1]
        if cpc == 1:
            others = by_ccx
        else:
            others = np.empty_like(by_ccx)
            for k in range(cpc):
                others[:, k] = np.delete(by_ccx, k, axis=1).max(axis=1)
        eff_ccx = self._coupling[by_ccx, others]
        eff = np.empty(len(core_set))
        eff[self._ccx_cores.ravel()] = eff_ccx.ravel()
        if self._fma >= 0:
            n_fma = (activity[thr] == self._fma).sum(axis=1)
            t = self.model.throttle
            cap = np.where(n_fma >= 2, t.freq_2t_ghz * 1e9, t.freq_1t_ghz * 1e9)
            eff = np.where(n_fma > 0, np.minimum(eff, cap), eff)
        return eff

    def _derive_fma_power(self) -> dict[int, float]:
        """Per-core FMA system power such that full occupancy hits the measured totals."""
        m, t = self.model, self.model.throttle
        n = self.topology.n_cores
        ip = m.idle_power
        out = {}
        for k, f_ghz, target in ((1, t.freq_1t_ghz, t.system_1t_w), (2, t.freq_2t_ghz, t.system_2t_w)):
            k = min(k, self.topology.threads_per_core)
            s = (f_ghz / m.nominal_ghz) ** m.active_freq_exponent
            struct = ip.first_active_total_w + ip.per_active_core_w * s * (n - 1) + ip.per_active_sibling_w * s * n * (k - 1)
            out[k] = (target - struct) / n
        return out

    def _memory_bandwidth(self, activity, online) -> np.ndarray:
        """Bandwidth per package in GB/s from memory-class occupancy."""
        mem = self.model.memory
        io = mem.io_die.get(str(self.bios["io_die_pstate"]), {"bandwidth": 1.0})
        thr = self._core_threads
        intensity = np.where(online[thr], self._cls_mem[activity[thr]], 0.0).max(axis=1)
        busy = intensity > 0
        n_ccx = np.zeros(len(self._ccx_cores))
        np.add.at(n_ccx, self._core_ccx[busy], 1)
        frac = np.where(
            n_ccx <= 0, 0.0,
            np.where(n_ccx < 2, mem.single_core_fraction * n_ccx, 1.0 - mem.extra_core_degradation * np.maximum(0, n_ccx - 2)),
        )
        bw_ccx = mem.ccx_max_gbs * frac * io["bandwidth"]
        bw_pkg = np.zeros(self._n_pkg)
        np.add.at(bw_pkg, self._ccx_pkg, bw_ccx)
        return np.minimum(bw_pkg, mem.socket_max_gbs * io["bandwidth"])

    def _evaluate(self, applied, online, cdis, activity, weight) -> Rates:
        m = self.model
        ip = m.idle_power
        nom = m.nominal
        thr = self._core_threads
        activity = np.where(online, activity, IDLE)
        st = self._thread_states(online, cdis, activity)
        # polling idle (all idle states disabled) behaves like a pause loop
        act = np.where((st == C0) & (activity == IDLE) & online, self._pause, activity)
        eff = self._effective(applied, act)
        core_state = st[thr].min(axis=1)
        th_active = (st[thr] == C0) & online[thr]
        n_active_threads = th_active.sum(axis=1)
        c0 = core_state == C0
        n_c0 = int(c0.sum())
        n_c1 = int((core_state == C1).sum())
        fscale = (eff / nom) ** m.active_freq_exponent

        if n_c0 == 0 and n_c1 == 0:
            system = ip.base_all_c2_w
        elif n_c0 == 0:
            system = ip.base_all_c2_w + ip.first_c1_delta_w + ip.per_extra_c1_core_w * (n_c1 - 1)
        else:
            system = (
                ip.first_active_total_w
                + ip.per_active_core_w * fscale[c0].sum() * (n_c0 - 1) / n_c0
                + ip.per_active_sibling_w * (fscale * np.maximum(n_active_threads - 1, 0)).sum()
                + ip.per_extra_c1_core_w * n_c1
            )

        act_thr = np.where(th_active, act[thr], IDLE)
        w_thr = np.where(th_active, weight[thr], 0.0)
        dyn = (self._cls_sys[act_thr] * fscale[:, None]).sum()
        if self._fma >= 0:
            n_fma = (act_thr == self._fma).sum(axis=1)
            t = m.throttle
            f_thr = np.where(n_fma >= 2, t.freq_2t_ghz, t.freq_1t_ghz) * 1e9
            fs = (eff / f_thr) ** m.active_freq_exponent
            per = np.array([0.0] + [self._fma_core_w.get(min(k, max(self._fma_core_w)), 0.0) for k in range(1, thr.shape[1] + 1)])
            dyn += (per[n_fma] * fs).sum()
        bw = self._memory_bandwidth(act, online)
        bw_frac = bw / m.memory.socket_max_gbs
        system += dyn + m.memory.dram_w_per_socket * bw_frac.sum()
        data = (self._cls_data[act_thr] * w_thr).sum() / max(self.topology.n_cpus, 1)
        system *= 1.0 + data

        # RAPL: modeled core energy plus a package uncore term; DRAM is not covered.
        rp = m.rapl
        sib = np.ones(thr.shape[1])
        sib[1:] = rp.sibling_factor
        order = np.cumsum(act_thr != IDLE, axis=1) - 1
        thread_factor = np.where(act_thr != IDLE, sib[np.clip(order, 0, len(sib) - 1)], 0.0)
        core_w = (self._cls_core[act_thr] * thread_factor * (1.0 + rp.rapl_data_delta * w_thr * (self._cls_data[act_thr] > 0))).sum(axis=1) * fscale
        if self._fma >= 0:
            fma_core = (rp.package_cap_w - rp.uncore_active_w) / self._cores_per_pkg
            core_w = np.where(n_fma > 0, fma_core * fs, core_w)
        pkg_any_c0 = np.zeros(self._n_pkg, dtype=bool)
        np.logical_or.at(pkg_any_c0, self._core_pkg, c0)
        all_deep = n_c0 == 0 and n_c1 == 0
        uncore = np.where(pkg_any_c0, rp.uncore_active_w, rp.uncore_idle_w if all_deep else rp.uncore_c1_w)
        pkg_w = np.zeros(self._n_pkg)
        np.add.at(pkg_w, self._core_pkg, core_w)
        pkg_w = np.minimum(pkg_w + uncore + rp.mem_uncore_w * bw_frac, rp.package_cap_w)

        cpu_core = self._cpu_core
        valid = cpu_core >= 0
        in_c0 = valid & online & (st == C0)
        aperf = np.where(in_c0, eff[np.where(valid, cpu_core, 0)], 0.0)
        mperf = np.where(in_c0, nom, 0.0)
        return Rates(float(system), core_w, pkg_w, aperf, mperf, eff)

    # -- frequency control -------------------------------------------------

    def _apply(self, cpu: int) -> None:
        self._mutate()
        prev = self._applied[cpu]
        target = self._pending_target[cpu]
        self._pending_at[cpu] = np.inf
        if self._pending_revert[cpu]:
            self._pending_revert[cpu] = False
            self._done_at[cpu] = -np.inf  # voltage never moved; nothing left pending
        else:
            self._prev[cpu] = prev
            self._done_at[cpu] = self._t
        self._applied[cpu] = target

    def set_frequency(self, s: FreqSetting) -> None:
        with self._lock:
            f = self.check_frequency(s.frequency)
            self._check_cpu(s.cpu)
            if not self._online[s.cpu]:
                raise OfflineCpuError(f"CPU {s.cpu} is offline")
            m = self.model
            cpu, t = s.cpu, self._t
            self._requested[cpu] = f
            cur = self._applied[cpu]
            if f == cur:
                self._pending_at[cpu] = np.inf
                self._pending_revert[cpu] = False
                return
            self._pending_target[cpu] = f
            if (
                f == self._prev[cpu]
                and f > cur
                and t < self._done_at[cpu] + m.revert_window_ms * 1e6
                and self._revert_pair(cur, f)
            ):
                self._pending_at[cpu] = t + m.revert_latency_us * 1e3
                self._pending_revert[cpu] = True
                return
            self._pending_revert[cpu] = False
            slot = m.update_interval_us * 1e3
            boundary = math.ceil(t / slot) * slot
            if boundary <= t:
                boundary += slot
            delay = m.transition_down_us if f < cur else m.transition_up_us
            self._pending_at[cpu] = boundary + delay * 1e3

    def _revert_pair(self, a: float, b: float) -> bool:
        pair = {round(a / 1e9, 6), round(b / 1e9, 6)}
        return any(pair == {round(x, 6), round(y, 6)} for x, y in self.model.revert_pairs_ghz)

    def requested_frequency(self, cpu: int) -> float:
        self._check_cpu(cpu)
        return float(self._requested[cpu])

    def applied_frequency(self, cpu: int) -> float:
        self._check_cpu(cpu)
        return float(self._applied[cpu])

    def effective_frequency(self, cpu: int) -> float:
        """Frequency the core of ``cpu`` actually runs at, in Hz."""
        self._check_cpu(cpu)
        with self._lock:
            return float(self._current_rates().eff_hz[self._cpu_core[cpu]])

    # -- other control -----------------------------------------------------

    def _check_cpu(self, cpu: int) -> None:
        if not 0 <= cpu < self._n_cpu or self._cpu_core[cpu] < 0:
            raise SysifError(f"unknown CPU id {cpu}")

    def set_cstate(self, c: CStateControl) -> None:
        with self._lock:
            self._check_cpu(c.cpu)
            if not 0 <= c.state < N_CSTATES:
                raise CStateError(f"invalid C-state index {c.state}")
            if c.state == 0 and not c.enabled:
                raise CStateError("C-state 0 (active) cannot be disabled")
            if self._cdis[c.cpu, c.state] != (not c.enabled):
                self._mutate()
                self._cdis[c.cpu, c.state] = not c.enabled

    def cstate_enabled(self, cpu: int, state: int) -> bool:
        self._check_cpu(cpu)
        return not bool(self._cdis[cpu, state])

    def set_online(self, cpu: int, flag: bool) -> None:
        with self._lock:
            self._check_cpu(cpu)
            if cpu == 0:
                raise BootCpuError("the boot CPU cannot be taken offline")
            if bool(self._online[cpu]) != bool(flag):
                self._mutate()
                self._online[cpu] = bool(flag)
                if not flag:
                    self._activity[cpu] = IDLE
                    self._weight[cpu] = 0.0

    def is_online(self, cpu: int) -> bool:
        self._check_cpu(cpu)
        return bool(self._online[cpu])

    def pin_current_thread(self, cpu: int) -> None:
        self._check_cpu(cpu)
        if not self._online[cpu]:
            raise OfflineCpuError(f"CPU {cpu} is offline")
        self._pinned[threading.get_ident()] = cpu

    def pinned_cpu(self) -> int | None:
        return self._pinned.get(threading.get_ident())

    def set_activity(self, cpus, workload_class: str, weight: float = 0.0) -> None:
        """Mark ``cpus`` as running ``workload_class`` (``idle`` stops them)."""
        code = self._class_code.get(workload_class)
        if code is None:
            raise ValueError(f"unknown workload class {workload_class!r}")
        with self._lock:
            cpus = list(cpus)
            for cpu in cpus:
                self._check_cpu(cpu)
                if code != IDLE and not self._online[cpu]:
                    raise OfflineCpuError(f"CPU {cpu} is offline")
            self._mutate()
            self._activity[cpus] = code
            self._weight[cpus] = weight

    def activity(self, cpu: int) -> str:
        return self._class_names[self._activity[cpu]]

    # -- sensing -----------------------------------------------------------

    def read_counters(self, cpu: int) -> CounterSnapshot:
        with self._lock:
            self._check_cpu(cpu)
            if not self._online[cpu]:
                raise OfflineCpuError(f"CPU {cpu} is offline")
            r = self._current_rates()
            dt = (self._t - self._seg_t0) / 1e9
            aperf = int(self._cum_aperf[cpu] + r.aperf_hz[cpu] * dt)
            mperf = int(self._cum_mperf[cpu] + r.mperf_hz[cpu] * dt)
            return CounterSnapshot(cpu, self.now_ns(), aperf, aperf, mperf)

    @property
    def energy_unit(self) -> float:
        return 2.0 ** -self.model.rapl.esu

    def _energy_at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        if t >= self._seg_t0:
            core_w, pkg_w = self._noisy_rapl()
            dt = (t - self._seg_t0) / 1e9
            return self._cum_core + core_w * dt, self._cum_pkg + pkg_w * dt
        i = bisect.bisect_right(self._h_t0, t) - 1
        if i < 0:
            return np.zeros_like(self._cum_core), np.zeros_like(self._cum_pkg)
        dt = (t - self._h_t0[i]) / 1e9
        (cc, cw), (pc, pw) = self._h_core[i], self._h_pkg[i]
        return cc + cw * dt, pc + pw * dt

    def read_energy(self, domain: EnergyDomain | str, locus: int) -> EnergyReading:
        try:
            domain = EnergyDomain(domain)
        except ValueError:
            raise UnsupportedDomainError(f"unsupported energy domain {domain!r}") from None
        with self._lock:
            upd = self.model.rapl.update_ms * 1e6
            tq = math.floor(self._t / upd) * upd
            core_e, pkg_e = self._energy_at(tq)
            if domain is EnergyDomain.PACKAGE:
                if not 0 <= locus < self._n_pkg:
                    raise SysifError(f"unknown package {locus}")
                joules = float(pkg_e[locus])
            else:
                self._check_cpu(locus)
                joules = float(core_e[self._cpu_core[locus]])
            unit = self.energy_unit
            raw = (int(joules / unit) + self._energy_offset) % ENERGY_RAW_MOD
            return EnergyReading(domain, locus, raw, unit, int(round(tq)), joules)

    def system_power(self, noise: bool = True) -> float:
        """Instantaneous full-system AC power in W."""
        with self._lock:
            p = self._current_rates().system_w
        if noise and self.model.power_noise_w > 0:
            p += self.model.power_noise_w * self._noise_rng.standard_normal()
        return p

    def power_at(self, times_ns) -> np.ndarray:
        """Noise-free system power at the given past or present times."""
        with self._lock:
            t = np.asarray(times_ns, dtype=float)
            if np.any(t > self._t + 1e-6):
                raise SimTimeError("cannot sample power in the future")
            starts = np.array(self._h_t0 + [self._seg_t0])
            values = np.array(self._h_sys + [self._current_rates().system_w])
            idx = np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(values) - 1)
            return values[idx]

    def noise_stream(self) -> np.random.Generator:
        """Fresh generator for one derived output stream (power traces)."""
        self._stream_count += 1
        return np.random.default_rng(np.random.SeedSequence([self.seed, 100, self._stream_count]))

    def rapl_power(self, domain: EnergyDomain | str, workload_class: str, weight: float = 0.0,
                   threads_per_core: int | None = None) -> float:
        """Model RAPL power per package with ``workload_class`` on every core.

        ``core`` returns the summed core domain of one package. Evaluated at
        nominal frequency on a hypothetical machine state; the live state is
        untouched.
        """
        domain = EnergyDomain(domain)
        code = self._class_code[workload_class]
        tpc = threads_per_core or self.topology.threads_per_core
        act = np.zeros(self._n_cpu, dtype=np.int64)
        w = np.zeros(self._n_cpu)
        for core in self.topology.cores:
            for c in core.cpus[:tpc]:
                act[c] = code
                w[c] = weight
        online = np.zeros(self._n_cpu, dtype=bool)
        online[list(self.topology.cpus)] = True
        r = self._evaluate(np.full(self._n_cpu, self.model.nominal), online,
                           np.zeros((self._n_cpu, N_CSTATES), dtype=bool), act, w)
        if domain is EnergyDomain.PACKAGE:
            return float(r.pkg_w[0])
        return float(r.core_w[self._core_pkg == 0].sum())

    # -- kernel execution --------------------------------------------------

    def _eff_cpu(self, cpu: int) -> float:
        return float(self._current_rates().eff_hz[self._cpu_core[cpu]])

    def execute_cycles(self, cpu: int, cycles: float, count: int) -> tuple[np.ndarray, np.ndarray]:
        """Run ``count`` back-to-back blocks of ``cycles`` on ``cpu``.

        Returns start times and durations (ns). Blocks straddling a frequency
        change are integrated piecewise.
        """
        m = self.model
        starts = np.empty(count)
        durs = np.empty(count)
        i = 0
        with self._lock:
            if not self._online[cpu]:
                raise OfflineCpuError(f"CPU {cpu} is offline")
            while i < count:
                r = cycles / self._eff_cpu(cpu) * 1e9
                horizon = self.next_event() - self._t
                n = count - i
                if math.isfinite(horizon):
                    n = min(n, int(horizon // (r * 1.01 + 1e-9)))
                if n >= 1:
                    d = self._jitter(np.full(n, r))
                    cum = np.cumsum(d)
                    k = int(np.searchsorted(cum, horizon, side="right")) if math.isfinite(horizon) else n
                    if k >= 1:
                        starts[i:i + k] = self._t + np.concatenate(([0.0], cum[:k - 1]))
                        durs[i:i + k] = d[:k]
                        self.step(self._t + cum[k - 1])
                        i += k
                        continue
                t0 = self._t
                remaining = cycles
                while True:
                    f = self._eff_cpu(cpu)
                    need = remaining / f * 1e9
                    ev = self.next_event()
                    if self._t + need <= ev:
                        self.step(self._t + need)
                        break
                    remaining -= (ev - self._t) * f / 1e9
                    self.step(ev)
                base = self._t - t0
                extra = self._jitter(np.array([base]))[0] - base
                if extra > 0:
                    self.step(self._t + extra)
                starts[i] = t0
                durs[i] = self._t - t0
                i += 1
        return starts, durs

    def _jitter(self, d: np.ndarray) -> np.ndarray:
        m = self.model
        out = d * (1.0 + m.runtime_noise_rel * np.abs(self._rng.standard_normal(len(d))))
        if m.disturbance_prob > 0:
            hit = self._rng.random(len(d)) < m.disturbance_prob
            out = out + hit * m.disturbance_us * 1e3
        return out

    def run_block(self, cpu: int, workload_class: str, instructions: float) -> float:
        """Execute ``instructions`` of an already-running class on ``cpu``; returns ns."""
        with self._lock:
            ipc = self.model.classes[workload_class].ipc
            base = instructions / (ipc * self._eff_cpu(cpu)) * 1e9
            d = float(self._jitter(np.array([base]))[0])
            self.step(self._t + d)
            return d

    def fma_intervals(self, cpus, n: int, interval_s: float) -> list[tuple[int, float, float]]:
        """Per-interval (start ns, frequency Hz, IPC) measured on ``cpus[0]`` under FMA load."""
        t = self.model.throttle
        probe = cpus[0]
        core = self._core_threads[self._cpu_core[probe]]
        k = int((self._activity[core] == self._fma).sum())
        f_sig, i_sig, ipc = (
            (t.freq_sigma_2t_mhz, t.ipc_sigma_2t, t.ipc_2t) if k >= 2 else (t.freq_sigma_1t_mhz, t.ipc_sigma_1t, t.ipc_1t)
        )
        out = []
        for _ in range(n):
            a = self.read_counters(probe)
            self.sleep_ns(interval_s * 1e9)
            b = self.read_counters(probe)
            f = (b.aperf - a.aperf) / (b.mperf - a.mperf) * self.model.nominal
            f += f_sig * 1e6 * self._rng.standard_normal()
            out.append((a.timestamp, float(f), float(ipc + i_sig * self._rng.standard_normal())))
        return out

    def wakeup(self, caller: int, callee: int) -> float:
        """Signal ``callee`` from ``caller``; return the wake latency in µs."""
        with self._lock:
            for cpu in (caller, callee):
                if not self._online[cpu]:
                    raise OfflineCpuError(f"CPU {cpu} is offline")
            st = self._thread_states(self._online, self._cdis, self._activity)
            core = self._core_threads[self._cpu_core[callee]]
            state = int(st[core].min())
            remote = self.topology.package_of(caller) != self.topology.package_of(callee)
            lat = 0.0 if state == C0 else self.wakeup_latency(state, self._eff_cpu(callee), remote)
            if state == C0 and remote:
                lat = self.model.cstate_latency.remote_overhead_us
            self.step(self._t + lat * 1e3)
            return lat

    def wakeup_latency(self, cstate: int, frequency: float, remote: bool = False) -> float:
        """Exit latency in µs for a core in ``cstate`` running at ``frequency`` Hz."""
        cl = self.model.cstate_latency
        if cstate == 1:
            keys = sorted(cl.c1_us, key=float)
            nearest = min(keys, key=lambda k: abs(float(k) * 1e9 - frequency))
            lat = cl.c1_us[nearest]
            if cl.c1_jitter_us > 0:
                lat = max(lat + cl.c1_jitter_us * self._rng.standard_normal(), 0.05)
        elif cstate == 2:
            lat = self._rng.uniform(cl.c2_min_us, cl.c2_max_us)
        else:
            raise CStateError(f"invalid idle state {cstate}; expected 1 or 2")
        if remote:
            lat += cl.remote_overhead_us
        return float(lat)

    def memory_latency_ns(self) -> float:
        io = self.model.memory.io_die.get(str(self.bios["io_die_pstate"]))
        if io is None:
            raise ValueError(f"unknown I/O die P-state label {self.bios['io_die_pstate']!r}")
        return io["latency_ns"]

    def configure_bios(self, **settings) -> None:
        """Simulated firmware settings (I/O die P-state, DRAM clock)."""
        with self._lock:
            self._mutate()
            self.bios.update(settings)

    def access_latency_ns(self, cpu: int, nbytes: int) -> float:
        m = self.model
        f = self._eff_cpu(cpu)
        if nbytes <= m.l1_bytes:
            return m.l1_latency_cycles / f * 1e9
        if nbytes <= m.l2_bytes:
            return m.l2_latency_cycles / f * 1e9
        if nbytes <= m.l3_bytes:
            ccx = self.topology.ccx_of(cpu)
            cores = self._ccx_cores[ccx]
            top = self._applied[self._core_threads[cores]].max()
            return m.l3_latency(top)
        return self.memory_latency_ns()

    def pointer_chase_samples(self, cpu: int, nbytes: int, accesses: int, repeats: int) -> np.ndarray:
        """Per-repeat mean access latency (ns); interference only ever adds time."""
        with self._lock:
            base = self.access_latency_ns(cpu, nbytes)
            noise = self._rng.exponential(self.model.latency_noise_rel * base, size=repeats)
            samples = base + noise
            self.step(self._t + float(samples.sum()) * accesses)
            return samples

    def triad_bandwidth(self, cpus) -> float:
        """Aggregate STREAM-Triad bandwidth in bytes/s for ``cpus``."""
        with self._lock:
            act = np.zeros(self._n_cpu, dtype=np.int64)
            act[list(cpus)] = self._class_code["triad"]
            return float(self._memory_bandwidth(act, self._online).sum() * 1e9)

    # -- control state -----------------------------------------------------

    def control_state(self) -> ControlState:
        cpus = self.topology.cpus
        return ControlState(
            frequencies={c: float(self._requested[c]) for c in cpus},
            governors={},
            cstate_disabled={c: tuple(bool(x) for x in self._cdis[c]) for c in cpus},
            online={c: bool(self._online[c]) for c in cpus},
        )

    def apply_control_state(self, state: ControlState) -> list[str]:
        failures = []
        for cpu, online in sorted(state.online.items()):
            if cpu != 0 and self.is_online(cpu) != online:
                self.set_online(cpu, online)
        for cpu, freq in sorted(state.frequencies.items()):
            if self._online[cpu]:
                try:
                    self.set_frequency(FreqSetting(cpu, freq))
                except SysifError as exc:
                    failures.append(f"cpu{cpu} frequency: {exc}")
        for cpu, disabled in sorted(state.cstate_disabled.items()):
            for s, dis in enumerate(disabled):
                if s:
                    self.set_cstate(CStateControl(cpu, s, not dis))
        return failures
