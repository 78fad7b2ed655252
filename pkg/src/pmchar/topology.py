"""Processor layout: package -> CCD -> CCX -> core -> hardware thread.

Probes place work by CCX and core, so everything downstream asks this module
where an OS CPU lives. A CCX is the set of cores sharing one L3 slice; the
hardware discovery path delineates CCXs from the L3 ``shared_cpu_list`` files.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

SYSFS_CPU_ROOT = Path("/sys/devices/system/cpu")


class TopologyError(ValueError):
    """Raised for inconsistent layouts or failed enumeration."""


@dataclass(frozen=True)
class HwThread:
    cpu: int


@dataclass(frozen=True)
class Core:
    id: int
    threads: tuple[HwThread, ...]
    index: int = 0  # system-wide dense core number

    @property
    def cpus(self) -> tuple[int, ...]:
        return tuple(t.cpu for t in self.threads)


@dataclass(frozen=True)
class Ccx:
    id: int
    cores: tuple[Core, ...]
    index: int = 0  # system-wide dense CCX number

    @property
    def cpus(self) -> tuple[int, ...]:
        return tuple(c for core in self.cores for c in core.cpus)


@dataclass(frozen=True)
class Ccd:
    id: int
    ccxs: tuple[Ccx, ...]


@dataclass(frozen=True)
class Package:
    id: int
    ccds: tuple[Ccd, ...]

    @property
    def cores(self) -> tuple[Core, ...]:
        return tuple(core for ccd in self.ccds for ccx in ccd.ccxs for core in ccx.cores)

    @property
    def cpus(self) -> tuple[int, ...]:
        return tuple(c for core in self.cores for c in core.cpus)


@dataclass(frozen=True)
class Topology:
    """Immutable, uniform processor layout.

    All CCXs carry ``cores_per_ccx`` cores and all cores ``threads_per_core``
    threads; heterogeneous layouts are rejected at construction.
    """

    packages: tuple[Package, ...]
    cores_per_ccx: int
    threads_per_core: int
    _cpu_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        index: dict[int, tuple[Package, Ccd, Ccx, Core]] = {}
        for pi, pkg in enumerate(self.packages):
            if pkg.id != pi:
                raise TopologyError(f"package ids must be dense, got {pkg.id} at position {pi}")
            for di, ccd in enumerate(pkg.ccds):
                if ccd.id != di:
                    raise TopologyError(f"CCD ids must be dense within package {pkg.id}")
                for xi, ccx in enumerate(ccd.ccxs):
                    if ccx.id != xi:
                        raise TopologyError(f"CCX ids must be dense within CCD {ccd.id}")
                    if len(ccx.cores) != self.cores_per_ccx:
                        raise TopologyError(
                            f"heterogeneous layout: CCX {ccx.index} has {len(ccx.cores)} cores, "
                            f"expected {self.cores_per_ccx}"
                        )
                    for ci, core in enumerate(ccx.cores):
                        if core.id != ci:
                            raise TopologyError(f"core ids must be dense within CCX {ccx.index}")
                        if len(core.threads) != self.threads_per_core:
                            raise TopologyError(
                                f"heterogeneous layout: core {core.index} has {len(core.threads)} "
                                f"threads, expected {self.threads_per_core}"
                            )
                        for t in core.threads:
                            if t.cpu in index:
                                raise TopologyError(f"CPU {t.cpu} appears in more than one thread")
                            index[t.cpu] = (pkg, ccd, ccx, core)
        if not index:
            raise TopologyError("topology contains no CPUs")
        ccx_idx = [ccx.index for ccx in self.ccxs]
        core_idx = [core.index for core in self.cores]
        if sorted(ccx_idx) != list(range(len(ccx_idx))):
            raise TopologyError("CCX indices must be dense and unique system-wide")
        if sorted(core_idx) != list(range(len(core_idx))):
            raise TopologyError("core indices must be dense and unique system-wide")
        object.__setattr__(self, "_cpu_index", index)

    # -- traversal ---------------------------------------------------------

    @cached_property
    def ccxs(self) -> tuple[Ccx, ...]:
        return tuple(ccx for pkg in self.packages for ccd in pkg.ccds for ccx in ccd.ccxs)

    @cached_property
    def cores(self) -> tuple[Core, ...]:
        return tuple(core for ccx in self.ccxs for core in ccx.cores)

    @cached_property
    def cpus(self) -> tuple[int, ...]:
        return tuple(sorted(self._cpu_index))

    @property
    def n_cpus(self) -> int:
        return len(self._cpu_index)

    @property
    def n_cores(self) -> int:
        return len(self.cores)

    def _lookup(self, cpu: int) -> tuple[Package, Ccd, Ccx, Core]:
        try:
            return self._cpu_index[cpu]
        except KeyError:
            raise TopologyError(f"unknown CPU id {cpu}") from None

    def ccx_of(self, cpu: int) -> int:
        """Return the system-wide index of the CCX enclosing ``cpu``."""
        return self._lookup(cpu)[2].index

    def core_of(self, cpu: int) -> int:
        return self._lookup(cpu)[3].index

    def package_of(self, cpu: int) -> int:
        return self._lookup(cpu)[0].id

    def siblings(self, cpu: int) -> tuple[int, ...]:
        """Other hardware threads sharing the core of ``cpu``."""
        return tuple(c for c in self._lookup(cpu)[3].cpus if c != cpu)

    def ccx(self, index: int) -> Ccx:
        return self.ccxs[index]

    def core(self, index: int) -> Core:
        return self.cores[index]

    def first_threads(self) -> list[int]:
        return [core.cpus[0] for core in self.cores]

    def hash(self) -> str:
        """Short stable digest of the layout, recorded in probe headers."""
        doc = [
            [[[list(core.cpus) for core in ccx.cores] for ccx in ccd.ccxs] for ccd in pkg.ccds]
            for pkg in self.packages
        ]
        return hashlib.sha256(json.dumps(doc).encode()).hexdigest()[:12]

    def describe(self) -> dict:
        return {
            "packages": len(self.packages),
            "ccds": sum(len(p.ccds) for p in self.packages),
            "ccxs": len(self.ccxs),
            "cores": self.n_cores,
            "cpus": self.n_cpus,
            "cores_per_ccx": self.cores_per_ccx,
            "threads_per_core": self.threads_per_core,
        }


@dataclass(frozen=True)
class CpuSet:
    """Ordered, duplicate-free list of OS CPU ids."""

    cpus: tuple[int, ...]

    def __init__(self, cpus: Iterable[int], topology: Topology | None = None) -> None:
        cpus = tuple(int(c) for c in cpus)
        if len(set(cpus)) != len(cpus):
            raise TopologyError(f"duplicate CPU ids in set {list(cpus)}")
        if topology is not None:
            for c in cpus:
                topology.ccx_of(c)
        object.__setattr__(self, "cpus", cpus)

    def __iter__(self):
        return iter(self.cpus)

    def __len__(self) -> int:
        return len(self.cpus)

    def __bool__(self) -> bool:
        return bool(self.cpus)


def synthetic(
    packages: int = 2,
    ccds_per_package: int = 4,
    ccxs_per_ccd: int = 2,
    cores_per_ccx: int = 4,
    threads_per_core: int = 2,
) -> Topology:
    """Build a uniform layout with Linux-style CPU numbering.

    Linux enumerates the first thread of every core (package by package)
    before any second thread, so thread ``t`` of global core ``c`` gets CPU
    ``t * n_cores + c``.
    """
    n_cores = packages * ccds_per_package * ccxs_per_ccd * cores_per_ccx
    pkgs = []
    core_idx = 0
    ccx_idx = 0
    for p in range(packages):
        ccds = []
        for d in range(ccds_per_package):
            ccxs = []
            for x in range(ccxs_per_ccd):
                cores = []
                for c in range(cores_per_ccx):
                    threads = tuple(HwThread(t * n_cores + core_idx) for t in range(threads_per_core))
                    cores.append(Core(c, threads, core_idx))
                    core_idx += 1
                ccxs.append(Ccx(x, tuple(cores), ccx_idx))
                ccx_idx += 1
            ccds.append(Ccd(d, tuple(ccxs)))
        pkgs.append(Package(p, tuple(ccds)))
    return Topology(tuple(pkgs), cores_per_ccx, threads_per_core)


def epyc_7502_dual() -> Topology:
    """Dual-socket layout of the reference machine: 2 x 4 CCDs x 2 CCXs x 4 cores x 2 threads."""
    return synthetic(2, 4, 2, 4, 2)


def parse_cpu_list(text: str) -> list[int]:
    """Parse the kernel's ``0-3,8,10-11`` list format."""
    out: list[int] = []
    for part in text.strip().split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                lo, hi = (int(x) for x in part.split("-", 1))
                if hi < lo:
                    raise ValueError
                out.extend(range(lo, hi + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise TopologyError(f"malformed CPU list {text.strip()!r}") from None
    return out


def _read(path: Path) -> str:
    try:
        return path.read_text().strip()
    except OSError as exc:
        raise TopologyError(f"cannot read topology file {path}: {exc.strerror or exc}") from exc


def _l3_index_dir(cpu_dir: Path) -> Path:
    cache = cpu_dir / "cache"
    if not cache.is_dir():
        raise TopologyError(f"cannot read topology file {cache}: no cache directory")
    for idx in sorted(cache.glob("index*")):
        level = idx / "level"
        if level.exists() and _read(level) == "3":
            return idx
    raise TopologyError(f"cannot read topology file {cache}/index*/level: no L3 cache entry")


def discover(root: Path | str = SYSFS_CPU_ROOT, ccxs_per_ccd: int = 2) -> Topology:
    """Enumerate the layout from the OS-exported topology tree.

    Reads ``cpuN/topology/physical_package_id``, ``thread_siblings_list`` and
    the L3 ``shared_cpu_list``. The kernel does not expose CCDs on this
    architecture, so consecutive CCXs of a package are grouped ``ccxs_per_ccd``
    at a time. All CPUs must be online.
    """
    root = Path(root)
    present = root / "present"
    if present.exists():
        cpus = parse_cpu_list(_read(present))
    else:
        cpus = sorted(int(p.name[3:]) for p in root.glob("cpu[0-9]*"))
    if not cpus:
        raise TopologyError(f"cannot read topology file {present}: no CPUs found")

    pkg_of: dict[int, int] = {}
    core_key: dict[int, tuple[int, ...]] = {}
    ccx_key: dict[int, tuple[int, ...]] = {}
    for cpu in cpus:
        cpu_dir = root / f"cpu{cpu}"
        pkg_of[cpu] = int(_read(cpu_dir / "topology" / "physical_package_id"))
        core_key[cpu] = tuple(parse_cpu_list(_read(cpu_dir / "topology" / "thread_siblings_list")))
        l3 = _l3_index_dir(cpu_dir)
        ccx_key[cpu] = tuple(parse_cpu_list(_read(l3 / "shared_cpu_list")))

    return _assemble(cpus, pkg_of, core_key, ccx_key, ccxs_per_ccd)


def _assemble(
    cpus: Sequence[int],
    pkg_of: dict[int, int],
    core_key: dict[int, tuple[int, ...]],
    ccx_key: dict[int, tuple[int, ...]],
    ccxs_per_ccd: int,
) -> Topology:
    pkg_ids = sorted(set(pkg_of.values()))
    packages = []
    core_idx = 0
    ccx_idx = 0
    tpc = {len(k) for k in core_key.values()}
    if len(tpc) != 1:
        raise TopologyError(f"heterogeneous layout: thread counts per core {sorted(tpc)}")
    for p_dense, pid in enumerate(pkg_ids):
        members = [c for c in cpus if pkg_of[c] == pid]
        l3_sets = sorted({ccx_key[c] for c in members}, key=min)
        ccx_objs = []
        for x, l3 in enumerate(l3_sets):
            cores_in = sorted({core_key[c] for c in l3}, key=min)
            cores = []
            for ci, sib in enumerate(cores_in):
                cores.append(Core(ci, tuple(HwThread(c) for c in sorted(sib)), core_idx))
                core_idx += 1
            ccx_objs.append((x, tuple(cores)))
        cpc = {len(cs) for _, cs in ccx_objs}
        if len(cpc) != 1:
            raise TopologyError(f"heterogeneous layout: cores per CCX {sorted(cpc)}")
        per_ccd = ccxs_per_ccd if len(ccx_objs) % ccxs_per_ccd == 0 else 1
        ccds = []
        for d in range(len(ccx_objs) // per_ccd):
            group = ccx_objs[d * per_ccd:(d + 1) * per_ccd]
            ccxs = []
            for local, (_, cores) in enumerate(group):
                ccxs.append(Ccx(local, cores, ccx_idx))
                ccx_idx += 1
            ccds.append(Ccd(d, tuple(ccxs)))
        packages.append(Package(p_dense, tuple(ccds)))
    first = packages[0].ccds[0].ccxs[0]
    return Topology(tuple(packages), len(first.cores), len(first.cores[0].threads))
