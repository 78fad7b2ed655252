"""Command-line entry point.

``pmchar run`` executes probes and writes an artifact directory;
``pmchar restore`` resets a machine's power-management controls;
``pmchar merge`` aligns an analyzer trace with a probe schedule.

Exit codes: 0 success, 1 configuration error, 2 prerequisite error,
3 probe or restore failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import analysis, powertrace
from .config import ConfigError, RunConfig, from_mapping, load_config
from .probes import REGISTRY, PowerSource, ProbeContext
from .simcpu import ModelError, SimModel, SimulatedBackend
from .sysif import SysifError
from .topology import TopologyError

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_FAILURE = 0, 1, 2, 3

log = logging.getLogger("pmchar")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, tuple)):
        return list(o)
    return str(o)


def _clean(o):
    """Replace NaN with None so the JSON stays standard."""
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, (float, np.floating)) and math.isnan(o):
        return None
    return o


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(_clean(data), indent=2, sort_keys=True, default=_json_default) + "\n")


def versions() -> dict[str, str]:
    try:
        own = metadata.version("pmchar")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"pmchar": own, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


def hardware_backend(roots: dict | None = None):
    from .sysif import HardwareBackend

    return HardwareBackend(**{k: v for k, v in (roots or {}).items() if v is not None})


def build_backend(cfg: RunConfig, roots: dict | None = None):
    if cfg.backend == "simulated":
        model = SimModel.load(cfg.model) if cfg.model else SimModel()
        return SimulatedBackend(model, seed=cfg.seed)
    return hardware_backend(roots)


def run(cfg: RunConfig, roots: dict | None = None) -> int:
    """Execute ``cfg``; ``roots`` overrides the sysfs and msr device roots."""
    try:
        cfg.validate()
        backend = build_backend(cfg, roots)
    except (ConfigError, ModelError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SysifError, TopologyError) as exc:
        print(f"prerequisite error: {exc}", file=sys.stderr)
        return EXIT_PREREQ

    trace = None
    if not backend.is_simulated:
        problems = backend.check_prerequisites()
        if problems:
            for p in problems:
                print(f"prerequisite error: {p}", file=sys.stderr)
            return EXIT_PREREQ
        if cfg.trace:
            try:
                trace = powertrace.load_trace(cfg.trace)
            except (OSError, powertrace.TraceError) as exc:
                print(f"config error: {exc}", file=sys.stderr)
                return EXIT_CONFIG

    out = Path(cfg.out)
    plots = out / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    ctx = ProbeContext(backend, seed=cfg.seed, power=PowerSource(backend, trace), hold_s=cfg.hold_s)
    snapshot = backend.control_state()
    manifest = {
        "config": cfg.echo(),
        "backend": backend.name,
        "topology_hash": backend.topology.hash(),
        "topology": backend.topology.describe(),
        "model_version": backend.model_version(),
        "versions": versions(),
        "probes": {},
    }
    failed = False
    try:
        if not backend.is_simulated:
            backend.prepare()
        for name in cfg.probes:
            entry = manifest["probes"].setdefault(name, {})
            log.info("running %s", name)
            start = backend.now_ns()
            try:
                result = REGISTRY[name](ctx, **cfg.probe_params(name))
            except Exception as exc:  # keep going; the manifest records it
                log.exception("probe %s failed", name)
                entry.update(status="failed", error=f"{type(exc).__name__}: {exc}")
                failed = True
                continue
            files = [result.write_csv(out / f"{name}.csv", ctx).name]
            if result.schedule:
                files.append(powertrace.write_schedule(out / f"{name}.schedule.csv", result.schedule).name)
            write_json(out / f"{name}.summary.json", result.summary)
            files.append(f"{name}.summary.json")
            for plot, cols in result.plots.items():
                if cols and len(next(iter(cols.values()))):
                    p = analysis.write_plot_data(plots / f"{name}.{plot}.dat", cols, comment=name)
                    files.append(f"plots/{p.name}")
            if backend.is_simulated and result.schedule:
                tr = powertrace.sim_power_stream(backend, ctx.power.rate, start, backend.now_ns())
                tr.save(out / f"{name}.trace.csv", {"source": "simulated", "seed": cfg.seed})
                files.append(f"{name}.trace.csv")
            entry.update(status="ok", files=files)
    finally:
        failures = backend.apply_control_state(snapshot)
        manifest["restore_failures"] = failures
        write_json(out / "manifest.json", manifest)
    if failures:
        for f in failures:
            print(f"restore failure: {f}", file=sys.stderr)
        return EXIT_FAILURE
    n_ok = sum(1 for e in manifest["probes"].values() if e.get("status") == "ok")
    print(f"{n_ok}/{len(cfg.probes)} probes ok; artifacts in {out}")
    return EXIT_FAILURE if failed else EXIT_OK


def restore(args) -> int:
    if args.backend == "simulated":
        print("simulated backend holds no persistent state; nothing to restore")
        return EXIT_OK
    if not args.i_know_this_changes_machine_state:
        print("config error: restore changes machine state; pass --i-know-this-changes-machine-state", file=sys.stderr)
        return EXIT_CONFIG
    try:
        backend = hardware_backend(_roots(args))
    except (SysifError, TopologyError) as exc:
        print(f"prerequisite error: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    problems = backend.check_prerequisites()
    if problems:
        for p in problems:
            print(f"prerequisite error: {p}", file=sys.stderr)
        return EXIT_PREREQ
    failures = backend.apply_control_state(backend.default_control_state())
    for f in failures:
        print(f"restore failure: {f}", file=sys.stderr)
    return EXIT_FAILURE if failures else EXIT_OK


def merge_cmd(args) -> int:
    try:
        trace = powertrace.load_trace(args.trace, rate=args.rate)
        schedule = powertrace.read_schedule(args.schedule)
        windows = powertrace.merge(trace, schedule)
    except (OSError, powertrace.TraceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    lines = ["config_id,start_ns,end_ns,mean_w,count,insufficient"]
    lines += [f"{w.config_id},{w.start_ns},{w.end_ns},{w.mean_w:.6f},{w.count},{int(w.insufficient)}" for w in windows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _root_args(p: argparse.ArgumentParser) -> None:
    # alternate roots let the hardware paths run against a copied or fake tree
    p.add_argument("--sysfs-root", type=Path, help=argparse.SUPPRESS)
    p.add_argument("--msr-root", type=Path, help=argparse.SUPPRESS)


def _roots(args) -> dict:
    return {"sysfs_root": args.sysfs_root, "msr_root": args.msr_root}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pmchar", description="CPU power-management characterization suite")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run probes and write an artifact directory")
    r.add_argument("--backend", choices=("simulated", "hardware"))
    r.add_argument("--config", type=Path, help="TOML run configuration")
    r.add_argument("--probe", action="append", metavar="NAME", help="probe to run (repeatable; default: all)")
    r.add_argument("--out", type=Path, help="artifact directory")
    r.add_argument("--seed", type=int)
    r.add_argument("--model", type=Path, help="simulated model parameters (TOML)")
    r.add_argument("--preset", choices=("desk", "full"))
    r.add_argument("--trace", type=Path, help="analyzer trace for hardware runs")
    r.add_argument("--i-know-this-changes-machine-state", action="store_true")
    _root_args(r)

    s = sub.add_parser("restore", help="reset frequencies, idle states and hotplug to defaults")
    s.add_argument("--backend", choices=("simulated", "hardware"), default="hardware")
    s.add_argument("--config", type=Path)
    s.add_argument("--i-know-this-changes-machine-state", action="store_true")
    _root_args(s)

    m = sub.add_parser("merge", help="inner-window means of a trace over a probe schedule")
    m.add_argument("--trace", type=Path, required=True)
    m.add_argument("--schedule", type=Path, required=True)
    m.add_argument("--rate", type=float, default=powertrace.NOMINAL_RATE)
    m.add_argument("--out", type=Path)

    sub.add_parser("list", help="list available probes")
    return p


def config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else from_mapping({})
    if args.backend:
        cfg.backend = args.backend
    if args.probe:
        cfg.probes = list(args.probe)
    if args.out:
        cfg.out = str(args.out)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.model:
        cfg.model = str(args.model)
    if args.preset:
        cfg.preset = args.preset
    if args.trace:
        cfg.trace = str(args.trace)
    if args.i_know_this_changes_machine_state:
        cfg.acknowledge_state_changes = True
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "list":
        for name, fn in REGISTRY.items():
            doc = (fn.__doc__ or "").strip().splitlines()[0] if fn.__doc__ else ""
            print(f"{name:24s} {doc}")
        return EXIT_OK
    if args.command == "merge":
        return merge_cmd(args)
    if args.command == "restore":
        if args.config:
            try:
                load_config(args.config)
            except ConfigError as exc:
                print(f"config error: {exc}", file=sys.stderr)
                return EXIT_CONFIG
        return restore(args)
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(cfg, _roots(args))


if __name__ == "__main__":
    sys.exit(main())
