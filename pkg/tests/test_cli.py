import csv
import io
import json
import math

import numpy as np
import pytest

from levybsde.cli import config_hash, main, run
from levybsde.io import solution_from_csv, solution_to_csv
from levybsde.levy import TimeGrid
from levybsde.solver import closed_form_linear

ENVELOPE = {
    "model": {"gamma": 0.0, "sigma": 1.0, "atoms": [[0.5, 1.0]]},
    "generator": {"family": "envelope", "params": {"k": 0.0, "a": 1.0}},
    "terminal": {"family": "constant", "params": {"c": 1.0}},
    "solver": {"method": "dp", "grid": {"T": 1.0, "n_steps": 200}, "lattice": {"min": -5, "max": 5, "n": 101}},
    "seed": 3,
}

PICARD = {
    "model": {"gamma": 0.0, "sigma": 0.5, "atoms": [[0.5, 1.0]]},
    "generator": {"family": "linear", "params": {"alpha": 0.2, "beta": 0.1, "gamma": 0.1}},
    "terminal": {"family": "tanh", "params": {"scale": 1.0}},
    "bounds": "auto",
    "solver": {"method": "picard", "grid": {"T": 1.0, "n_steps": 10}, "paths": 1000, "tol": 1e-8},
    "malliavin": {"directions": "diagonal", "n_nodes": 2},
    "seed": 11,
}


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def y0(path):
    rows = list(csv.DictReader(io.StringIO(path.read_text())))
    return np.array([float(r["value"]) for r in rows if r["quantity"] == "Y" and float(r["t"]) == 0.0])


def test_solve_envelope_matches_closed_form(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["--config", str(write(tmp_path, ENVELOPE)), "--out", str(out), "--task", "solve"]) == 0
    oracle = closed_form_linear(1.0, lambda s: 1.0, lambda s: 0.0, TimeGrid.uniform(1.0, 4))[0]
    assert oracle == pytest.approx(math.e, rel=1e-10)
    assert np.allclose(y0(out / "solution.csv"), oracle, rtol=1e-2)
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 3 and man["config_hash"] == config_hash(ENVELOPE) and man["tolerances"]


def test_negative_intensity_exit_2(tmp_path, capsys):
    cfg = json.loads(json.dumps(ENVELOPE))
    cfg["model"]["atoms"] = [[0.5, -1.0]]
    assert run(write(tmp_path, cfg), tmp_path / "o") == 2
    assert "model.atoms[0].intensity" in capsys.readouterr().err


@pytest.mark.parametrize("mutate, field", [
    (lambda c: c.pop("generator"), "generator"),
    (lambda c: c["generator"].update(family="cubic"), "generator.family"),
    (lambda c: c["solver"]["grid"].update(n_steps="ten"), "solver.grid.n_steps"),
    (lambda c: c.update(extra=1), "extra"),
    (lambda c: c["generator"].update(hooks="mod:f"), "generator.hooks"),
])
def test_validation_messages(tmp_path, capsys, mutate, field):
    cfg = json.loads(json.dumps(ENVELOPE))
    mutate(cfg)
    assert run(write(tmp_path, cfg), tmp_path / "o") == 2
    assert field in capsys.readouterr().err


def test_unreadable_config_exit_2(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert run(p, tmp_path / "o") == 2


def test_verify_corrupted_exit_4(tmp_path, capsys):
    out = tmp_path / "solve"
    assert run(write(tmp_path, ENVELOPE), out, task="solve") == 0
    sol = solution_from_csv((out / "solution.csv").read_text())
    sol.Y *= 10
    bad = tmp_path / "bad.csv"
    bad.write_text(solution_to_csv(sol))
    cfg = dict(ENVELOPE, verify={"solution": str(bad)})
    assert run(write(tmp_path, cfg, "v.json"), tmp_path / "v", task="verify") == 4
    rep = json.loads((tmp_path / "v" / "verify.json").read_text())
    assert rep[0]["check"] == "bounds" and not rep[0]["y_ok"]


def test_verify_clean_exit_0(tmp_path):
    out = tmp_path / "solve"
    run(write(tmp_path, ENVELOPE), out, task="solve")
    cfg = dict(ENVELOPE, verify={"solution": str(out / "solution.csv")})
    assert run(write(tmp_path, cfg, "v.json"), tmp_path / "v", task="verify") == 0


def test_nonconvergence_exit_3(tmp_path):
    cfg = json.loads(json.dumps(PICARD))
    cfg["solver"].update(max_iter=1, tol=1e-14)
    assert run(write(tmp_path, cfg), tmp_path / "o") == 3


def test_stability_exit_2(tmp_path, capsys):
    cfg = json.loads(json.dumps(ENVELOPE))
    cfg["model"]["atoms"] = [[0.5, 50.0]]
    cfg["solver"]["grid"]["n_steps"] = 2
    cfg["pdie"] = {"space": {"min": -5, "max": 5, "n": 51}}
    assert run(write(tmp_path, cfg), tmp_path / "o", task="pdie") == 2
    assert "dt <=" in capsys.readouterr().err


@pytest.mark.parametrize("task", ["simulate", "solve", "malliavin"])
def test_determinism(tmp_path, task):
    p = write(tmp_path, PICARD)
    assert run(p, tmp_path / "a", task=task) == 0
    assert run(p, tmp_path / "b", task=task) == 0
    files = sorted(f.name for f in (tmp_path / "a").iterdir())
    assert "manifest.json" in files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    assert run(p, tmp_path / "c", seed=12, task="simulate") == 0
    if task == "simulate":
        assert (tmp_path / "a" / "paths.csv").read_bytes() != (tmp_path / "c" / "paths.csv").read_bytes()


def test_hlimit_and_pdie_tasks(tmp_path):
    cfg = json.loads(json.dumps(PICARD))
    cfg["model"]["atoms"] = [[0.1, 5.0], [0.25, 2.0]]
    cfg["solver"] = {"method": "dp", "grid": {"T": 1.0, "n_steps": 100}, "lattice": {"min": -5, "max": 5, "n": 101}}
    cfg["hlimit"] = {"alpha": 1.0, "schedule": [1, 4, 16, 64, 256], "cauchy_tol": 1e-4}
    cfg["pdie"] = {"space": {"min": -5, "max": 5, "n": 101}, "dt": 0.005, "cross_validate": True}
    p = write(tmp_path, cfg)
    assert run(p, tmp_path / "h", task="hlimit") == 0
    assert (tmp_path / "h" / "hlimit_table.csv").read_text().startswith("n,m,dY,dZ,dU")
    assert run(p, tmp_path / "p", task="pdie") == 0
    rep = json.loads((tmp_path / "p" / "cross_validation.json").read_text())
    assert rep["worst"] < 5e-3
    for d in ("h", "p"):
        man = json.loads((tmp_path / d / "manifest.json").read_text())
        assert man["config_hash"] == config_hash(cfg)


def test_density_model(tmp_path):
    cfg = json.loads(json.dumps(ENVELOPE))
    cfg["model"] = {"gamma": 0.0, "sigma": 1.0,
                    "density": {"kind": "power", "coef": 1.0, "exponent": 2.0, "support": [0.1, 1.0], "n_atoms": 4,
                                "cutoff": 0.1}}
    cfg["solver"]["grid"]["n_steps"] = 20
    assert run(write(tmp_path, cfg), tmp_path / "o") == 0
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["model_info"]["discarded_second_moment"] == 0.0
