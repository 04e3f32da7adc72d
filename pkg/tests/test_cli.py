import csv
import json
from pathlib import Path

import numpy as np
import pytest

from hamctl.cli import run

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _run(tmp_path, command, config=None, *extra, name="out"):
    out = tmp_path / name
    argv = [command, "--out", str(out)]
    if config:
        argv += ["--config", str(CONFIGS / config)]
    code = run(argv + list(extra))
    return code, out, json.loads((out / "report.json").read_text())


def test_drift_only_simulation(tmp_path):
    code, out, rep = _run(tmp_path, "simulate", "simulate_drift.json")
    assert code == 0 and rep["passed"]
    final = np.array(rep["final"])
    assert np.allclose(final, [[2.0, 1.0], [0.0, -0.5]], atol=1e-12)
    with open(out / "trajectory.csv") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows[::250]:
        assert float(row["q1"]) == pytest.approx(float(row["t"]), abs=1e-12)


def test_pendulum_energy(tmp_path):
    code, _, rep = _run(tmp_path, "simulate", "simulate_pendulum.json")
    assert code == 0
    energy = next(c for c in rep["checks"] if c["name"] == "energy_drift")
    assert energy["pass"] and energy["tol"] == 1e-4


def test_exit_codes(tmp_path):
    code, _, rep = _run(tmp_path, "simulate", "simulate_bad.json", name="bad")
    assert code == 2 and "schedule" in rep["error"]["message"]
    code, _, rep = _run(tmp_path, "rearrange", "rearrange_mismatch.json", name="mismatch")
    assert code == 3 and rep["verdict"] == "not-equivalent"
    code, _, rep = _run(tmp_path, "simulate", "simulate_blowup.json", name="blowup")
    assert code == 4 and rep["error"]["type"] == "CompletenessError"
    code, _, _ = _run(tmp_path, "simulate", None, "--tol", "-1", name="tol")
    assert code == 2
    code, _, rep = _run(tmp_path, "steer", "does_not_exist.json", name="missing")
    assert code == 2


def test_verify_orbit_match(tmp_path):
    code, out, rep = _run(tmp_path, "verify-orbit", "verify_orbit.json")
    assert code == 0 and rep["verdict"] == "match"
    assert (out / "signature.csv").exists()


def test_demo_pipeline_outputs(tmp_path):
    code, out, rep = _run(tmp_path, "rearrange", None)
    assert code == 0 and rep["verdict"] == "equivalent"
    assert {"permutation.json", "levels.csv"} <= {p.name for p in out.iterdir()}
    code, out, rep = _run(tmp_path, "compile-perm", None, name="compiled")
    assert code == 0
    assert rep["end_to_end"]["lr_error"] <= 0.15
    assert (out / "primitive_seq.json").exists() and (out / "stages.csv").exists()


@pytest.mark.parametrize("config", ["synth_kick.json", "synth_lie.json", "synth_bracket.json",
                                    "synth_dilation.json", "synth_reverse.json"])
def test_synth_configs(tmp_path, config):
    code, out, rep = _run(tmp_path, "synth", config)
    assert code == 0, rep["checks"]
    assert (out / "ladder.csv").exists()
    assert all({"name", "value", "tol", "pass"} <= set(c) for c in rep["checks"])


@pytest.mark.parametrize("config", ["steer_torus.json", "steer_plane.json"])
def test_steer_configs(tmp_path, config):
    code, out, rep = _run(tmp_path, "steer", config)
    assert code == 0
    with open(out / "endpoints.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and max(float(r["error"]) for r in rows) <= 1e-12


def test_reports_are_deterministic(tmp_path):
    for command, config in [("simulate", None), ("steer", "steer_plane.json"), ("compile-perm", None)]:
        _run(tmp_path, command, config, "--seed", "7", name="a")
        _run(tmp_path, command, config, "--seed", "7", name="b")
        a = (tmp_path / "a" / "report.json").read_bytes()
        b = (tmp_path / "b" / "report.json").read_bytes()
        assert a == b, command
