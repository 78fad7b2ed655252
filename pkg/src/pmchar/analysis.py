"""Statistics over probe outputs.

Pure functions: histograms, the uniform-window estimator for transition
delays, subset ECDFs, mean gaps, linear increment fits and summaries. Records
are read by attribute (or key), so both probe dataclasses and rows loaded from
CSV work.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from scipy import stats


class AnalysisError(ValueError):
    pass


def _get(rec: Any, name: str):
    if isinstance(rec, dict):
        return rec[name]
    return getattr(rec, name)


# -- histogram -------------------------------------------------------------

@dataclass(frozen=True)
class Histogram:
    bin_width: float
    bins: tuple[tuple[float, int], ...]  # (lower edge, count)
    total: int

    @property
    def edges(self) -> np.ndarray:
        return np.array([b[0] for b in self.bins])

    @property
    def counts(self) -> np.ndarray:
        return np.array([b[1] for b in self.bins], dtype=np.int64)


MAX_BINS = 1_000_000


def make_histogram(samples: Iterable[float], bin_width: float = 25.0, origin: float | None = None) -> Histogram:
    """Contiguous fixed-width bins anchored at ``origin`` (default: smallest sample).

    A sample lying on an edge is counted in the bin that starts there.
    """
    if not bin_width > 0:
        raise AnalysisError("bin width must be > 0")
    x = np.asarray(list(samples), dtype=float)
    if x.size == 0:
        return Histogram(bin_width, (), 0)
    lo = float(x.min()) if origin is None else float(origin)
    if x.min() < lo:
        raise AnalysisError("origin lies above the smallest sample")
    span = (float(x.max()) - lo) / bin_width
    if span > MAX_BINS:
        raise AnalysisError(f"{span:.3g} bins exceed the limit of {MAX_BINS}; widen the bins")
    idx = np.floor((x - lo) / bin_width).astype(np.int64)
    counts = np.bincount(idx)
    bins = tuple((lo + i * bin_width, int(c)) for i, c in enumerate(counts))
    return Histogram(bin_width, bins, int(x.size))


# -- uniform window --------------------------------------------------------

@dataclass(frozen=True)
class UniformFit:
    d_hat: float  # µs
    T_hat: float  # µs
    ks_stat: float
    n: int
    excluded: int  # samples below the floor


def fit_uniform_window(samples: Iterable[float], d_floor: float = 100.0, min_samples: int = 100) -> UniformFit:
    """Estimate the offset and width of a uniform delay window.

    Range-based order statistics: ``d_hat = min - range/(n-1)`` and
    ``T_hat = range * (n+1)/(n-1)``, both unbiased for uniform data.
    """
    x = np.asarray(list(samples), dtype=float)
    if x.size and np.ptp(x) == 0:
        raise AnalysisError("no window detected: all samples are equal")
    kept = x[x >= d_floor]
    n = kept.size
    if n < min_samples:
        raise AnalysisError(f"need at least {min_samples} samples at or above {d_floor} µs, got {n}")
    lo, hi = float(kept.min()), float(kept.max())
    rng = hi - lo
    if rng == 0:
        raise AnalysisError("no window detected: all samples are equal")
    d_hat = lo - rng / (n - 1)
    T_hat = rng * (n + 1) / (n - 1)
    ks = stats.kstest(kept, "uniform", args=(d_hat, T_hat)).statistic
    return UniformFit(max(d_hat, 0.0), T_hat, float(ks), n, int(x.size - n))


# -- ECDFs -----------------------------------------------------------------

@dataclass(frozen=True)
class EcdfSeries:
    values: np.ndarray  # sorted
    weight: float
    subset: int

    def __call__(self, x) -> np.ndarray:
        """Right-continuous ECDF evaluated at ``x``."""
        return np.searchsorted(self.values, np.asarray(x, dtype=float), side="right") / len(self.values)

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        n = len(self.values)
        return self.values, np.arange(1, n + 1) / n


def ecdf_with_subsets(records: Sequence, k: int, field_name: str = "system_w", seed: int = 0) -> list[EcdfSeries]:
    """Split records into ``k`` random subsets; one ECDF per weight and subset."""
    n = len(records)
    if k < 1:
        raise AnalysisError("k must be >= 1")
    if k > n:
        raise AnalysisError(f"k={k} exceeds the record count {n}")
    order = np.random.default_rng(seed).permutation(n)
    out = []
    for sid, part in enumerate(np.array_split(order, k)):
        by_weight: dict[float, list[float]] = {}
        for i in part:
            rec = records[int(i)]
            by_weight.setdefault(float(_get(rec, "weight")), []).append(float(_get(rec, field_name)))
        for w in sorted(by_weight):
            out.append(EcdfSeries(np.sort(np.array(by_weight[w])), w, sid))
    return out


def ks_distance(a: Iterable[float], b: Iterable[float]) -> float:
    """Two-sample Kolmogorov-Smirnov statistic (max vertical ECDF distance)."""
    return float(stats.ks_2samp(np.asarray(list(a)), np.asarray(list(b))).statistic)


def ranges_overlap(a: Iterable[float], b: Iterable[float]) -> bool:
    a, b = np.asarray(list(a)), np.asarray(list(b))
    return bool(a.max() >= b.min() and b.max() >= a.min())


def dkw_bound(m: int, alpha: float = 0.01) -> float:
    """Bound on the distance between two size-``m`` ECDFs of one distribution."""
    return 2.0 * math.sqrt(math.log(2.0 / alpha) / (2.0 * m))


def group_values(records: Sequence, weight: float, field_name: str) -> np.ndarray:
    return np.array([float(_get(r, field_name)) for r in records if float(_get(r, "weight")) == weight])


def mean_gap(records: Sequence, weight_a: float, weight_b: float, field_name: str = "system_w") -> float:
    """``|mean_a - mean_b| / mean_a`` over records grouped by operand weight."""
    a = group_values(records, weight_a, field_name)
    b = group_values(records, weight_b, field_name)
    if a.size == 0 or b.size == 0:
        raise AnalysisError(f"no records for weight {weight_a if a.size == 0 else weight_b}")
    return float(abs(a.mean() - b.mean()) / a.mean())


# -- fits ------------------------------------------------------------------

@dataclass(frozen=True)
class LinearFit:
    intercept: float
    slope: float
    residual_sigma: float
    n: int


SEGMENTS = ("c1", "active", "sibling")


def segment_xy(points: Sequence, segment: str) -> tuple[np.ndarray, np.ndarray]:
    """Select one sweep segment and its abscissa.

    ``c1``: C1 sweep beyond the first-C1 jump, x = cores in C1.
    ``active``: C0 sweep over first threads, x = active cores.
    ``sibling``: C0 sweep over second threads, x = active sibling threads.
    """
    if segment == "c1":
        sel = [p for p in points if _get(p, "phase") == "c1" and _get(p, "n_c1_cores") >= 2]
        x = [_get(p, "n_c1_cores") for p in sel]
    elif segment == "active":
        sel = [p for p in points if _get(p, "phase") == "c0" and _get(p, "n_siblings") == 0 and _get(p, "n_active_cores") >= 1]
        x = [_get(p, "n_active_cores") for p in sel]
    elif segment == "sibling":
        sel = [p for p in points if _get(p, "phase") == "c0" and _get(p, "n_siblings") >= 1]
        x = [_get(p, "n_siblings") for p in sel]
    else:
        raise AnalysisError(f"unknown segment {segment!r}; expected one of {SEGMENTS}")
    return np.array(x, dtype=float), np.array([_get(p, "power_w") for p in sel], dtype=float)


def fit_line(x, y) -> LinearFit:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 3:
        raise AnalysisError(f"under-determined fit: {x.size} points, need at least 3")
    if np.ptp(y) == 0:
        return LinearFit(float(y[0]), 0.0, 0.0, int(x.size))
    if np.ptp(x) == 0:
        raise AnalysisError("under-determined fit: all abscissae equal")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (intercept + slope * x)
    sigma = float(np.sqrt((resid**2).sum() / (x.size - 2))) if x.size > 2 else 0.0
    return LinearFit(float(intercept), float(slope), sigma, int(x.size))


def fit_linear_increments(points: Sequence, segment: str) -> LinearFit:
    return fit_line(*segment_xy(points, segment))


@dataclass(frozen=True)
class AffineFit:
    intercept: float
    slope: float
    max_rel_residual: float


def fit_affine(x, y) -> AffineFit:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2 or np.ptp(x) == 0:
        raise AnalysisError("affine fit needs two distinct abscissae")
    slope, intercept = np.polyfit(x, y, 1)
    rel = np.abs(y - (intercept + slope * x)) / np.abs(y)
    return AffineFit(float(intercept), float(slope), float(rel.max()))


# -- summaries -------------------------------------------------------------

@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    min: float
    max: float
    n: int
    flags: tuple[str, ...] = field(default=())


def summarize(values: Iterable[float]) -> Summary:
    x = np.asarray(list(values), dtype=float)
    if x.size == 0:
        raise AnalysisError("cannot summarize an empty sample")
    if x.size == 1:
        return Summary(float(x[0]), 0.0, float(x[0]), float(x[0]), 1, ("single_value_std_undefined",))
    return Summary(float(x.mean()), float(x.std(ddof=1)), float(x.min()), float(x.max()), int(x.size))


# -- RAPL structure ----------------------------------------------------------

MEMORY_CLASSES = ("mem_read", "mem_write", "triad")
COMPUTE_CLASSES = ("pause", "busy", "add", "mul", "fma", "sqrt")


@dataclass(frozen=True)
class RaplStructure:
    ref_vs_pkg: AffineFit  # reference power predicted from package power, compute configs
    core_vs_pkg: AffineFit  # package from core, compute configs
    memory_excess: tuple[float, ...]  # reference / implied reference, memory configs

    @property
    def min_memory_excess(self) -> float:
        return min(self.memory_excess) if self.memory_excess else float("nan")


def rapl_structure(records: Sequence) -> RaplStructure:
    """Relate RAPL domains and the reference across workload classes."""
    comp = [r for r in records if _get(r, "workload") in COMPUTE_CLASSES]
    mem = [r for r in records if _get(r, "workload") in MEMORY_CLASSES]
    if not comp:
        raise AnalysisError("no compute-class records")
    pkg = [float(_get(r, "pkg_w")) for r in comp]
    ref_fit = fit_affine(pkg, [float(_get(r, "ref_w")) for r in comp])
    core_fit = fit_affine([float(_get(r, "core_w")) for r in comp], pkg)
    excess = tuple(
        float(_get(r, "ref_w")) / (ref_fit.intercept + ref_fit.slope * float(_get(r, "pkg_w"))) for r in mem
    )
    return RaplStructure(ref_fit, core_fit, excess)


# -- plot data -----------------------------------------------------------------

def write_plot_data(path: Path | str, columns: dict[str, Sequence], comment: str = "") -> Path:
    """Whitespace-separated columns with a ``#`` header, readable by gnuplot."""
    path = Path(path)
    names = list(columns)
    n = len(next(iter(columns.values()))) if names else 0
    if any(len(v) != n for v in columns.values()):
        raise AnalysisError("plot data columns differ in length")
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append("# " + " ".join(names))
    for i in range(n):
        lines.append(" ".join(_fmt(columns[k][i]) for k in names))
    path.write_text("\n".join(lines) + "\n")
    return path


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)
