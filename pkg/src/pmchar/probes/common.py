"""Shared probe plumbing: run context, result container, CSV output, power source."""

from __future__ import annotations

import contextlib
import dataclasses
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

from .. import powertrace
from ..powertrace import MergedWindow, PowerTrace, ScheduleEntry
from ..sysif import Backend, EnergyDomain, energy_delta

NS = 1_000_000_000


class ProbeError(RuntimeError):
    pass


class PowerSource:
    """Reference (external) system power for held configurations.

    Simulated runs synthesize the analyzer trace from the backend history.
    Hardware runs use a trace loaded from file, if given; otherwise reference
    values are NaN and the schedule is kept for a later ``merge``.
    """

    def __init__(self, backend: Backend, trace: PowerTrace | None = None, rate: float = powertrace.NOMINAL_RATE):
        self.backend = backend
        self.trace = trace
        self.rate = rate

    @property
    def available(self) -> bool:
        return self.backend.is_simulated or self.trace is not None

    def trace_between(self, start_ns: float, end_ns: float) -> PowerTrace | None:
        if self.backend.is_simulated:
            return powertrace.sim_power_stream(self.backend, self.rate, start_ns, end_ns)
        return self.trace

    def merge(self, schedule: Sequence[ScheduleEntry], duration_s: float = powertrace.CONFIG_SECONDS) -> list[MergedWindow]:
        if not schedule:
            return []
        start = min(e.start_ns for e in schedule)
        end = max(e.end_ns for e in schedule)
        trace = self.trace_between(start, end)
        if trace is None:
            return [MergedWindow(e.config_id, e.start_ns, e.end_ns, float("nan"), 0, True) for e in schedule]
        return powertrace.merge(trace, schedule, duration_s=duration_s)


@dataclass
class ProbeContext:
    backend: Backend
    seed: int = 0
    power: PowerSource | None = None
    hold_s: float = 10.0

    def __post_init__(self) -> None:
        if self.power is None:
            self.power = PowerSource(self.backend)

    def rng(self, name: str) -> np.random.Generator:
        """Generator for one probe, stable across runs and probe orderings."""
        return np.random.default_rng(np.random.SeedSequence([self.seed, zlib.crc32(name.encode())]))

    def now(self) -> int:
        return self.backend.now_ns()

    def sleep(self, seconds: float) -> None:
        if self.backend.is_simulated:
            self.backend.sleep_ns(seconds * NS)
        else:
            time.sleep(seconds)

    def hold(self, config_id: str, schedule: list[ScheduleEntry], seconds: float | None = None,
             inner: bool = False) -> dict | None:
        """Keep the current configuration for ``seconds`` and log it in ``schedule``.

        With ``inner`` set, RAPL energies are read 1 s after the start and 1 s
        before the end, matching the reference averaging window, and their mean
        powers are returned.
        """
        seconds = self.hold_s if seconds is None else seconds
        start = self.now()
        energy = None
        if inner:
            self.sleep(1.0)
            a = read_all_energy(self.backend)
            t0 = self.now()
            self.sleep(seconds - 2.0)
            b = read_all_energy(self.backend)
            t1 = self.now()
            energy = energy_power(a, b, (t1 - t0) / NS)
            self.sleep(1.0)
        else:
            self.sleep(seconds)
        schedule.append(ScheduleEntry(config_id, start, self.now()))
        return energy


def read_all_energy(backend: Backend) -> dict[str, list]:
    topo = backend.topology
    pkgs = [backend.read_energy(EnergyDomain.PACKAGE, p.id) for p in topo.packages]
    cores = [backend.read_energy(EnergyDomain.CORE, c.cpus[0]) for c in topo.cores if backend.is_online(c.cpus[0])]
    return {"package": pkgs, "core": cores}


def energy_power(a: dict, b: dict, seconds: float) -> dict[str, float]:
    """Mean package and summed core power between two full readouts."""
    pkg = sum(energy_delta(x, y) for x, y in zip(a["package"], b["package"]))
    core = sum(energy_delta(x, y) for x, y in zip(a["core"], b["core"]))
    per_pkg = [energy_delta(x, y) / seconds for x, y in zip(a["package"], b["package"])] if seconds > 0 else []
    return {
        "pkg_w": pkg / seconds if seconds > 0 else float("nan"),
        "core_w": core / seconds if seconds > 0 else float("nan"),
        "pkg_w_per_socket": per_pkg,
        "pkg_j": pkg,
        "core_j": core,
    }


@contextlib.contextmanager
def preserved_state(backend: Backend) -> Iterator[None]:
    """Snapshot control state on entry and restore it on exit, even on error."""
    snap = backend.control_state()
    try:
        yield
    finally:
        if backend.is_simulated:
            backend.set_activity(backend.topology.cpus, "idle")
        failures = backend.apply_control_state(snap)
        if failures:
            raise ProbeError("could not restore control state: " + "; ".join(failures))


def wait_applied(ctx: ProbeContext) -> None:
    """Sleep long enough for any pending frequency request to take effect."""
    ctx.sleep(0.005)


@dataclass
class ProbeResult:
    name: str
    columns: list[str]
    rows: list[tuple]
    params: dict[str, Any] = field(default_factory=dict)
    summary: dict[str, Any] = field(default_factory=dict)
    records: list = field(default_factory=list)
    schedule: list[ScheduleEntry] = field(default_factory=list)
    plots: dict[str, dict[str, list]] = field(default_factory=dict)

    def header(self, ctx: ProbeContext) -> dict[str, Any]:
        b = ctx.backend
        head = {
            "probe": self.name,
            "backend": b.name,
            "seed": ctx.seed,
            "topology_hash": b.topology.hash(),
            "model_version": b.model_version(),
        }
        for k, v in self.params.items():
            head[f"param.{k}"] = v
        return head

    def write_csv(self, path: Path | str, ctx: ProbeContext) -> Path:
        path = Path(path)
        lines = [f"# {k}={_fmt(v)}" for k, v in self.header(ctx).items()]
        lines.append(",".join(self.columns))
        for row in self.rows:
            lines.append(",".join(_fmt(v) for v in row))
        path.write_text("\n".join(lines) + "\n")
        return path


def rows_from(records: Sequence, columns: Sequence[str]) -> list[tuple]:
    return [tuple(getattr(r, c) for c in columns) for r in records]


def record_columns(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    if isinstance(v, (list, tuple)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def ghz(f_hz: float) -> float:
    return round(f_hz / 1e9, 6)
