"""Run configuration: a TOML file, overridable from the command line.

Example::

    backend = "simulated"
    seed = 7
    preset = "full"          # or "desk" for a quick run
    probes = ["freq_transition_probe", "cstate_power_sweep"]

    [probe.freq_transition_probe]
    n = 2000
    wait_max_ms = 4.0
"""

from __future__ import annotations

import inspect
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .probes import PRESETS, REGISTRY

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

BACKENDS = ("simulated", "hardware")
_KEYS = {"backend", "model", "seed", "out", "preset", "probes", "probe", "hold_s", "trace", "acknowledge_state_changes"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    backend: str = "simulated"
    model: str | None = None
    seed: int = 0
    out: str = "artifacts"
    preset: str = "full"
    probes: list[str] = field(default_factory=lambda: list(REGISTRY))
    params: dict[str, dict[str, Any]] = field(default_factory=dict)
    hold_s: float = 10.0
    trace: str | None = None
    acknowledge_state_changes: bool = False

    def validate(self) -> "RunConfig":
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {tuple(PRESETS)}, got {self.preset!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.hold_s <= 2.0:
            raise ConfigError("hold_s must exceed the 2 s of excluded edges")
        unknown = [p for p in self.probes if p not in REGISTRY]
        unknown += [p for p in self.params if p not in REGISTRY]
        if unknown:
            raise ConfigError(f"unknown probe {unknown[0]!r}; known: {', '.join(REGISTRY)}")
        for name, params in self.params.items():
            sig = inspect.signature(REGISTRY[name])
            accepted = [p for p in sig.parameters if p != "ctx"]
            for key in params:
                if key not in accepted:
                    raise ConfigError(f"probe {name}: unknown parameter {key!r}; accepted: {', '.join(accepted)}")
        if self.backend == "hardware" and not self.acknowledge_state_changes:
            raise ConfigError(
                "the hardware backend changes frequencies, idle states and CPU hotplug state; "
                "pass --i-know-this-changes-machine-state to proceed"
            )
        return self

    def probe_params(self, name: str) -> dict[str, Any]:
        merged = dict(PRESETS[self.preset].get(name, {}))
        merged.update(self.params.get(name, {}))
        return merged

    def echo(self) -> dict[str, Any]:
        return {
            "backend": self.backend,
            "model": self.model,
            "seed": self.seed,
            "preset": self.preset,
            "probes": list(self.probes),
            "params": {k: dict(v) for k, v in self.params.items()},
            "hold_s": self.hold_s,
            "trace": self.trace,
        }


def load_config(path: Path | str) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_mapping(data)


def from_mapping(data: dict[str, Any]) -> RunConfig:
    extra = set(data) - _KEYS
    if extra:
        raise ConfigError(f"unknown config key {sorted(extra)[0]!r}")
    cfg = RunConfig()
    for key in ("backend", "model", "out", "preset", "trace"):
        if key in data:
            setattr(cfg, key, str(data[key]))
    if "seed" in data:
        cfg.seed = int(data["seed"])
    if "hold_s" in data:
        cfg.hold_s = float(data["hold_s"])
    if "acknowledge_state_changes" in data:
        cfg.acknowledge_state_changes = bool(data["acknowledge_state_changes"])
    if "probes" in data:
        if not isinstance(data["probes"], list):
            raise ConfigError("probes must be a list of probe names")
        cfg.probes = [str(p) for p in data["probes"]]
    params = data.get("probe", {})
    if not isinstance(params, dict) or any(not isinstance(v, dict) for v in params.values()):
        raise ConfigError("[probe.<name>] entries must be tables of parameters")
    cfg.params = {k: dict(v) for k, v in params.items()}
    return cfg
