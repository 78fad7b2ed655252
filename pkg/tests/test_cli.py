import json
import subprocess
import sys
from pathlib import Path

import pytest

from pmchar.cli import main

from conftest import make_msr, make_sysfs

QUICK = ["--preset", "desk", "--probe", "sibling_freq_probe", "--probe", "cstate_latency_probe"]


def tree_snapshot(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_run_writes_artifacts(tmp_path):
    assert main(["run", "--out", str(tmp_path), "--seed", "3", *QUICK]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["backend"] == "simulated"
    assert manifest["config"]["seed"] == 3
    assert set(manifest["probes"]) == {"sibling_freq_probe", "cstate_latency_probe"}
    assert all(e["status"] == "ok" for e in manifest["probes"].values())
    for key in ("numpy", "scipy", "python", "pmchar"):
        assert key in manifest["versions"]
    csv = (tmp_path / "sibling_freq_probe.csv").read_text()
    assert "# seed=3" in csv and "# topology_hash=" in csv


def test_identical_seed_identical_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["--seed", "9", "--preset", "desk", "--probe", "freq_transition_probe", "--probe", "offline_anomaly_probe"]
    assert main(["run", "--out", str(a), *args]) == 0
    assert main(["run", "--out", str(b), *args]) == 0
    assert tree_snapshot(a) == tree_snapshot(b)


def test_different_seed_differs(tmp_path):
    main(["run", "--out", str(tmp_path / "a"), "--seed", "1", *QUICK])
    main(["run", "--out", str(tmp_path / "b"), "--seed", "2", *QUICK])
    assert tree_snapshot(tmp_path / "a") != tree_snapshot(tmp_path / "b")


def test_unknown_probe_is_config_error(tmp_path, capsys):
    assert main(["run", "--out", str(tmp_path), "--probe", "warp_drive"]) == 1
    assert "unknown probe" in capsys.readouterr().err
    assert not (tmp_path / "manifest.json").exists()


def test_config_file_and_unknown_param(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('seed = 4\npreset = "desk"\nprobes = ["sibling_freq_probe"]\n[probe.sibling_freq_probe]\nwarp = 9\n')
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    cfg.write_text('seed = 4\npreset = "desk"\nprobes = ["sibling_freq_probe"]\n[probe.sibling_freq_probe]\ncpu = 1\n')
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["config"]["params"] == {"sibling_freq_probe": {"cpu": 1}}


def test_malformed_config(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("seed = = 3\n")
    assert main(["run", "--config", str(cfg)]) == 1


def test_hardware_needs_acknowledgement(tmp_path, capsys):
    assert main(["run", "--backend", "hardware", "--out", str(tmp_path)]) == 1
    assert "--i-know-this-changes-machine-state" in capsys.readouterr().err


def test_hardware_prerequisite_failure_mutates_nothing(tmp_path, capsys):
    sysfs = make_sysfs(tmp_path / "sys", governor="schedutil")
    before = tree_snapshot(sysfs)
    code = main([
        "run", "--backend", "hardware", "--i-know-this-changes-machine-state", "--out", str(tmp_path / "o"),
        "--sysfs-root", str(sysfs), "--msr-root", str(tmp_path / "nodev"),
    ])
    assert code == 2
    assert "permission" in capsys.readouterr().err
    assert tree_snapshot(sysfs) == before


def test_restore_resets_fake_machine(tmp_path):
    sysfs = make_sysfs(tmp_path / "sys")
    msr = make_msr(tmp_path / "dev", 16)
    (sysfs / "cpu3/cpuidle/state2/disable").write_text("1")
    (sysfs / "cpu5/online").write_text("0")
    args = ["restore", "--i-know-this-changes-machine-state", "--sysfs-root", str(sysfs), "--msr-root", str(msr)]
    assert main(args) == 0
    assert (sysfs / "cpu3/cpuidle/state2/disable").read_text() == "0"
    assert (sysfs / "cpu5/online").read_text() == "1"
    assert (sysfs / "cpu1/cpufreq/scaling_governor").read_text() == "schedutil"
    # idempotent
    assert main(args) == 0


def test_restore_requires_acknowledgement():
    assert main(["restore"]) == 1


def test_restore_simulated_is_noop():
    assert main(["restore", "--backend", "simulated"]) == 0


def test_failed_probe_recorded_and_others_continue(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text(
        'preset = "desk"\nprobes = ["sibling_freq_probe", "freq_transition_probe"]\n'
        "[probe.sibling_freq_probe]\ncpu = 999\n"
    )
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["probes"]["sibling_freq_probe"]["status"] == "failed"
    assert manifest["probes"]["freq_transition_probe"]["status"] == "ok"


def test_merge_command(tmp_path):
    assert main(["run", "--out", str(tmp_path), "--seed", "1", "--preset", "desk",
                 "--probe", "offline_anomaly_probe"]) == 0
    out = tmp_path / "merged.csv"
    assert main(["merge", "--trace", str(tmp_path / "offline_anomaly_probe.trace.csv"),
                 "--schedule", str(tmp_path / "offline_anomaly_probe.schedule.csv"), "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0].startswith("config_id,")
    assert len(rows) == 1 + 4


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "pmchar", "list"], capture_output=True, text=True, check=True)
    assert "freq_transition_probe" in r.stdout
