"""Pinned, self-timing workload kernels.

Every entry point takes the backend it runs on. On the simulated backend a
kernel is a workload class plus a duration computed from the model; on the
hardware backend it is real code pinned to one CPU per worker. Hardware
kernels are best effort: portable Python cannot reach vendor IPC figures, and
numba is used for the inner loops when it is installed.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass

import numpy as np

from .sysif import Backend

KINDS = (
    "busy_loop",
    "pause_loop",
    "minimal_timed",
    "pointer_chase",
    "stream_triad",
    "fma_saturate",
    "instr_block",
    "mem_read",
    "mem_write",
)

# instr_block instruction -> simulated workload class
INSTRUCTIONS = {
    "wide_xor": "xor",
    "shift_right": "shr",
    "scalar_add": "add",
    "wide_mul": "mul",
    "wide_fma": "fma",
    "sqrt": "sqrt",
}

KIND_CLASS = {
    "busy_loop": "busy",
    "pause_loop": "pause",
    "minimal_timed": "busy",
    "pointer_chase": "chase",
    "stream_triad": "triad",
    "fma_saturate": "fma",
    "mem_read": "mem_read",
    "mem_write": "mem_write",
}

WEIGHTS = (0.0, 0.5, 1.0)


class KernelError(RuntimeError):
    pass


N_VREGS = 16


def weight_pattern(weight: float, bits: int = 64) -> int:
    """Operand bit pattern for a relative Hamming weight (0.5 is alternating bits)."""
    full = (1 << bits) - 1
    if weight == 0.0:
        return 0
    if weight == 1.0:
        return full
    if weight == 0.5:
        return int("01" * (bits // 2), 2)
    raise ValueError(f"operand weight must be one of {WEIGHTS}, got {weight}")


@dataclass(frozen=True)
class KernelSpec:
    kind: str
    buffer_bytes: int = 0
    stride: int = 64
    unroll: int = 16
    instructions: int = 4096  # per block
    weight: float = 0.0
    instruction: str = "wide_xor"

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise KernelError(f"unknown kernel kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.kind == "instr_block":
            if self.instruction not in INSTRUCTIONS:
                raise KernelError(
                    f"unsupported instruction {self.instruction!r}; expected one of {', '.join(INSTRUCTIONS)}"
                )
            weight_pattern(self.weight)
        if self.stride <= 0 or self.unroll <= 0 or self.instructions <= 0:
            raise KernelError("stride, unroll and instructions must be positive")

    @property
    def workload_class(self) -> str:
        if self.kind == "instr_block":
            return INSTRUCTIONS[self.instruction]
        return KIND_CLASS[self.kind]

    def registers(self) -> list[tuple[int, int, int]]:
        """(dst, src_a, src_b) per unrolled slot over a 16-entry vector file.

        The two sources are seeded with the operand pattern and never
        written; destinations rotate over the remaining registers and are
        never read, so no slot depends on another.
        """
        return [(2 + i % (N_VREGS - 2), 0, 1) for i in range(self.unroll)]

    def seeds(self) -> dict[int, int]:
        p = weight_pattern(self.weight)
        return {0: p, 1: p}


# -- optional native loops ------------------------------------------------

_native = None


def _native_loops():
    global _native
    if _native is None:
        try:
            import numba
        except ImportError:
            _native = False
        else:
            @numba.njit(cache=False)
            def chain(n):
                x = 1
                for _ in range(n):
                    x = (x * 3 + 1) & 0xFFFFFFFF
                return x

            @numba.njit(cache=False)
            def walk(nxt, steps):
                i = 0
                for _ in range(steps):
                    i = nxt[i]
                return i

            _native = {"chain": chain, "walk": walk}
    return _native or None


def _chain_py(n: int) -> int:
    x = 1
    for _ in range(n):
        x = (x * 3 + 1) & 0xFFFFFFFF
    return x


# -- minimal timed loop ---------------------------------------------------

def run_minimal_batch(backend: Backend, cpu: int, iterations: int, count: int):
    """Time ``count`` back-to-back runs; returns (start_ns, runtime_ns) arrays."""
    if iterations < 0 or count < 0:
        raise ValueError("iterations and count must be >= 0")
    if backend.is_simulated:
        cycles = iterations * backend.model.minimal_cycles_per_iter
        if cycles == 0:
            t = float(backend.now)
            return np.full(count, t), np.zeros(count)
        return backend.execute_cycles(cpu, cycles, count)
    native = _native_loops()
    fn = native["chain"] if native else _chain_py
    starts = np.empty(count)
    durs = np.empty(count)
    clock = time.perf_counter_ns
    for i in range(count):
        t0 = clock()
        fn(iterations)
        starts[i] = t0
        durs[i] = clock() - t0
    return starts, durs


def run_minimal_timed(backend: Backend, cpu: int, iterations: int) -> float:
    """Runtime (ns) of one dependency-chained arithmetic loop."""
    return float(run_minimal_batch(backend, cpu, iterations, 1)[1][0])


# -- pointer chasing --------------------------------------------------------

def build_chase_cycle(n: int, rng: np.random.Generator) -> np.ndarray:
    """Successor array linking all ``n`` slots into one cycle in random order."""
    if n < 1:
        raise KernelError("pointer-chase buffer must hold at least one element")
    order = rng.permutation(n)
    nxt = np.empty(n, dtype=np.int64)
    nxt[order] = np.roll(order, -1)
    return nxt


def cycle_length(nxt: np.ndarray) -> int:
    """Steps until the walk from slot 0 returns to 0."""
    i, steps = int(nxt[0]), 1
    while i != 0:
        i = int(nxt[i])
        steps += 1
        if steps > len(nxt):
            break
    return steps


def run_pointer_chase(backend: Backend, cpu: int, buffer_bytes: int, repeats: int,
                      stride: int = 64, seed: int = 0) -> float:
    """Minimum over ``repeats`` of the mean latency per access (ns)."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    n = buffer_bytes // stride
    if n < 1:
        raise KernelError("buffer smaller than one stride")
    if backend.is_simulated:
        return float(backend.pointer_chase_samples(cpu, buffer_bytes, n, repeats).min())
    try:
        nxt = build_chase_cycle(n, np.random.default_rng(seed))
    except MemoryError as exc:
        raise KernelError(f"cannot allocate {buffer_bytes} bytes") from exc
    native = _native_loops()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        if native:
            native["walk"](nxt, n)
        else:
            i = 0
            for _ in range(n):
                i = nxt[i]
        best = min(best, (time.perf_counter_ns() - t0) / n)
    return best


# -- multi-threaded kernels ------------------------------------------------

def _run_pinned(backend: Backend, cpus, fn):
    """Run ``fn(cpu)`` on one pinned thread per cpu with a start barrier."""
    barrier = threading.Barrier(len(cpus))
    results: list = [None] * len(cpus)
    errors: list = []

    def worker(slot, cpu):
        try:
            backend.pin_current_thread(cpu)
            barrier.wait()
            results[slot] = fn(cpu)
        except Exception as exc:  # surfaced to the caller below
            errors.append(exc)
            barrier.abort()

    threads = [threading.Thread(target=worker, args=(k, c), daemon=True) for k, c in enumerate(cpus)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise KernelError(f"worker failed: {errors[0]}") from errors[0]
    return results


def run_triad(backend: Backend, buffer_bytes: int, cpus) -> float:
    """Aggregate STREAM-Triad bandwidth (bytes/s) over ``cpus``."""
    cpus = list(cpus)
    if not cpus:
        raise KernelError("triad needs at least one CPU")
    if backend.is_simulated:
        bw = backend.triad_bandwidth(cpus)
        backend.sleep_ns(3 * buffer_bytes / bw * 1e9)
        return bw
    n = max(buffer_bytes // 24, 1)

    def body(cpu):
        try:
            a, b, c = np.zeros(n), np.ones(n), np.full(n, 2.0)
        except MemoryError as exc:
            raise KernelError(f"cannot allocate {buffer_bytes} bytes") from exc
        t0 = time.perf_counter_ns()
        np.multiply(c, 3.0, out=a)
        np.add(a, b, out=a)
        return 3 * 8 * n / ((time.perf_counter_ns() - t0) / 1e9)

    return float(sum(_run_pinned(backend, cpus, body)))


@dataclass(frozen=True)
class IntervalRecord:
    t_start_ns: int
    frequency: float  # Hz
    ipc: float


def run_fma_saturate(backend: Backend, duration_s: float, cpus, interval_s: float = 1.0) -> list[IntervalRecord]:
    """Saturate ``cpus`` with FMA work; one record per interval, measured on ``cpus[0]``.

    Hardware IPC is NaN: only aperf/mperf are read, there is no instruction counter.
    """
    cpus = list(cpus)
    n = int(duration_s // interval_s)
    if n <= 0:
        return []
    if backend.is_simulated:
        backend.set_activity(cpus, "fma")
        try:
            return [IntervalRecord(*r) for r in backend.fma_intervals(cpus, n, interval_s)]
        finally:
            backend.set_activity(cpus, "idle")
    stop = threading.Event()
    records: list[IntervalRecord] = []

    def body(cpu):
        a = np.full(4096, 1.0001)
        b = np.full(4096, 0.9999)
        while not stop.is_set():
            for _ in range(64):
                a = a * b + b
        return None

    runner = threading.Thread(target=_run_pinned, args=(backend, cpus, body), daemon=True)
    runner.start()
    nominal = backend.nominal_frequency
    probe = cpus[0]
    for _ in range(n):
        a0 = backend.read_counters(probe)
        time.sleep(interval_s)
        a1 = backend.read_counters(probe)
        dm = a1.mperf - a0.mperf
        f = (a1.aperf - a0.aperf) / dm * nominal if dm else float("nan")
        records.append(IntervalRecord(a0.timestamp, f, float("nan")))
    stop.set()
    runner.join()
    return records


def run_instr_block(backend: Backend, spec: KernelSpec, count: int, cpus=None) -> float:
    """Run ``count`` unrolled blocks of ``spec.instruction`` on every cpu; wall time in ns."""
    if spec.kind != "instr_block":
        raise KernelError("run_instr_block needs an instr_block spec")
    if count < 0:
        raise ValueError("count must be >= 0")
    cpus = list(backend.topology.cpus if cpus is None else cpus)
    cpus = [c for c in cpus if backend.is_online(c)]
    if backend.is_simulated:
        t0 = backend.now
        backend.set_activity(cpus, spec.workload_class, spec.weight)
        try:
            backend.run_block(cpus[0], spec.workload_class, spec.instructions * count)
        finally:
            backend.set_activity(cpus, "idle")
        return backend.now - t0
    seeds = spec.seeds()
    plan = spec.registers()
    # one vector lane per unrolled slot; sources are read-only, destinations write-only
    ops = {
        "wide_xor": lambda d, a, b: np.bitwise_xor(a, b, out=d),
        "shift_right": lambda d, a, b: np.right_shift(a, np.uint64(1), out=d),
        "scalar_add": lambda d, a, b: np.add(a, b, out=d),
        "wide_mul": lambda d, a, b: np.multiply(a, b, out=d),
        "wide_fma": lambda d, a, b: np.add(a * b, b, out=d),
        "sqrt": lambda d, a, b: np.sqrt(a.astype(float)),
    }
    op = ops[spec.instruction]

    def body(cpu):
        a = np.full(len(plan), seeds[plan[0][1]], dtype=np.uint64)
        b = np.full(len(plan), seeds[plan[0][2]], dtype=np.uint64)
        d = np.empty(len(plan), dtype=np.uint64)
        for _ in range(count * max(spec.instructions // spec.unroll, 1)):
            op(d, a, b)

    t0 = time.perf_counter_ns()
    _run_pinned(backend, cpus, body)
    return float(time.perf_counter_ns() - t0)


class BackgroundLoad:
    """Keep ``cpus`` running a workload class until stopped (context manager).

    ``workload`` is a kernel kind or a simulated workload class. On hardware,
    memory classes stream over a large buffer and every other class falls back
    to an arithmetic loop.
    """

    def __init__(self, backend: Backend, cpus, workload: str = "pause_loop", weight: float = 0.0) -> None:
        self.backend = backend
        self.cpus = list(cpus)
        self.workload = KIND_CLASS.get(workload, workload)
        self.weight = weight
        self._stop = threading.Event()
        self._runner: threading.Thread | None = None

    def start(self) -> "BackgroundLoad":
        if not self.cpus:
            return self
        if self.backend.is_simulated:
            self.backend.set_activity(self.cpus, self.workload, self.weight)
            return self
        if self.workload == "idle":
            return self
        mem = self.workload in ("mem_read", "mem_write", "triad")
        buf = np.zeros(1 << 22) if mem else None

        def body(cpu):
            while not self._stop.is_set():
                if buf is None:
                    _chain_py(1000)
                elif self.workload == "mem_read":
                    buf.sum()
                else:
                    buf.fill(1.0)

        self._runner = threading.Thread(target=_run_pinned, args=(self.backend, self.cpus, body), daemon=True)
        self._runner.start()
        return self

    def stop(self) -> None:
        if not self.cpus:
            return
        if self.backend.is_simulated:
            self.backend.set_activity(self.cpus, "idle")
            return
        self._stop.set()
        if self._runner is not None:
            self._runner.join()

    def __enter__(self) -> "BackgroundLoad":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def wake_pair(backend: Backend, caller: int, callee: int, n: int, settle_ns: int = 2_000_000) -> tuple[list[float], float]:
    """Wakeup latencies (µs) of ``callee`` signalled by ``caller``.

    Also returns the user-space signalling overhead measured with the callee
    spinning instead of sleeping; it is reported, never subtracted.
    """
    if backend.is_simulated:
        out = []
        for _ in range(n):
            backend.sleep_ns(settle_ns)
            out.append(backend.wakeup(caller, callee))
        return out, 0.0
    return _hw_wake_pair(backend, caller, callee, n, settle_ns)


def _hw_wake_pair(backend, caller, callee, n, settle_ns):
    clock = time.perf_counter_ns

    def measure(spin: bool) -> list[float]:
        go = threading.Event()
        done = threading.Event()
        stamp = [0, 0]
        lat: list[float] = []

        def callee_fn():
            backend.pin_current_thread(callee)
            for _ in range(n):
                if spin:
                    while not go.is_set():
                        pass
                else:
                    go.wait()
                stamp[1] = clock()
                go.clear()
                done.set()

        t = threading.Thread(target=callee_fn, daemon=True)
        t.start()
        backend.pin_current_thread(caller)
        for _ in range(n):
            time.sleep(settle_ns / 1e9)
            stamp[0] = clock()
            go.set()
            done.wait()
            done.clear()
            d = stamp[1] - stamp[0]
            if d > 0:  # non-monotone pair: drop and keep going
                lat.append(d / 1e3)
        t.join()
        return lat

    overhead = measure(spin=True)
    return measure(spin=False), float(np.median(overhead)) if overhead else 0.0
