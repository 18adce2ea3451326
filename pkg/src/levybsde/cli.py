"""Command-line experiment runner.

Exit status: 0 success, 2 invalid configuration, 3 numerical non-convergence,
4 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigurationError, DomainError, NumericalError, StabilityError
from .families import make_generator, make_terminal
from .generator import BoundCertificate, compute_bounds, truncate_generator
from .hgen import exponential_utility_hspec, solve_H_limit
from .io import bundle_to_csv, solution_from_csv, solution_to_csv
from .levy import LevyTriplet, TimeGrid, discretize_density_report, sample_paths
from .malliavin import diagonal_directions, identify_ZU, solve_derivative_bsde
from .pdie import PdieGrid, cross_validate, solve_pdie
from .solver import ForwardSpec, solve_markov_dp, solve_picard_regression
from .verify import check_bounds, check_comparison, default_slack, sandwich_envelopes

logger = logging.getLogger("levybsde")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4
TASKS = ("simulate", "solve", "verify", "malliavin", "hlimit", "pdie")
TOP_KEYS = {"model", "generator", "terminal", "bounds", "solver", "hlimit", "malliavin", "pdie", "verify", "seed"}


class VerificationFailure(Exception):
    pass


class NonConvergence(Exception):
    pass


def _get(d, key, where, typ=None, default=...):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where} must be an object")
    if key not in d:
        if default is ...:
            raise ConfigurationError(f"{where}.{key} is required")
        return default
    val = d[key]
    if typ is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
            raise ConfigurationError(f"{where}.{key} must be a finite number")
        return float(val)
    if typ is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigurationError(f"{where}.{key} must be an integer")
        return val
    return val


def build_model(cfg) -> tuple:
    m = cfg.get("model")
    if m is None:
        raise ConfigurationError("model is required")
    gamma = _get(m, "gamma", "model", float, 0.0)
    sigma = _get(m, "sigma", "model", float, 0.0)
    info = {}
    if "density" in m:
        d = m["density"]
        kind = _get(d, "kind", "model.density")
        coef = _get(d, "coef", "model.density", float, 1.0)
        if kind == "power":
            expo = _get(d, "exponent", "model.density", float)
            dens = lambda x: coef * abs(x) ** (-expo)
        elif kind == "uniform":
            dens = lambda x: coef
        else:
            raise ConfigurationError(f"model.density.kind: unknown {kind!r}")
        rep = discretize_density_report(dens, _get(d, "support", "model.density"),
                                        _get(d, "n_atoms", "model.density", int),
                                        _get(d, "cutoff", "model.density", float))
        atoms = rep.atoms
        info["discarded_second_moment"] = rep.discarded_second_moment
    else:
        raw = _get(m, "atoms", "model", None, [])
        if not isinstance(raw, list):
            raise ConfigurationError("model.atoms must be a list of [mark, intensity] pairs")
        atoms = []
        for i, a in enumerate(raw):
            if isinstance(a, dict):
                atoms.append((_get(a, "mark", f"model.atoms[{i}]", float),
                              _get(a, "intensity", f"model.atoms[{i}]", float)))
            elif isinstance(a, list) and len(a) == 2:
                atoms.append(tuple(a))
            else:
                raise ConfigurationError(f"model.atoms[{i}] must be [mark, intensity]")
    return LevyTriplet(gamma, sigma, tuple(atoms)), info


def build_generator(cfg):
    g = cfg.get("generator")
    if g is None:
        raise ConfigurationError("generator is required")
    if "hooks" in g:
        raise ConfigurationError("generator.hooks: custom hooks are disabled in the CLI")
    return make_generator(_get(g, "family", "generator"), _get(g, "params", "generator", None, {}))


def build_terminal(cfg, model):
    t = cfg.get("terminal")
    if t is None:
        raise ConfigurationError("terminal is required")
    params = dict(_get(t, "params", "terminal", None, {}))
    fam = _get(t, "family", "terminal")
    if fam in ("tanh", "tanh_average"):
        params.setdefault("sigma", model.sigma)
    term = make_terminal(fam, params)
    import dataclasses

    if "A_xi" in t:
        term = dataclasses.replace(term, A_xi=_get(t, "A_xi", "terminal", float))
    if "A_Dxi" in t:
        c = _get(t, "A_Dxi", "terminal", float)
        term = dataclasses.replace(term, A_Dxi=lambda x, c=c: c)
    return term


def build_grid(cfg):
    s = cfg.get("solver", {})
    g = _get(s, "grid", "solver", None, {"T": 1.0, "n_steps": 50})
    T = _get(g, "T", "solver.grid", float)
    n = _get(g, "n_steps", "solver.grid", int)
    return TimeGrid.uniform(T, n)


def build_lattice(cfg, key="solver"):
    s = cfg.get(key, {})
    lat = _get(s, "lattice" if key == "solver" else "space", key, None, {"min": -6.0, "max": 6.0, "n": 241})
    lo = _get(lat, "min", f"{key}.lattice", float)
    hi = _get(lat, "max", f"{key}.lattice", float)
    n = _get(lat, "n", f"{key}.lattice", int)
    if not (hi > lo and n >= 3):
        raise ConfigurationError(f"{key}.lattice needs max > min and n >= 3")
    return np.linspace(lo, hi, n)


def build_certificate(cfg, spec, term, model, T):
    b = cfg.get("bounds", None)
    if b is None:
        return None
    if b == "auto":
        return compute_bounds(spec, term, model.atoms, T)
    if isinstance(b, dict):
        R = _get(b, "R", "bounds", float)
        Q = _get(b, "Q", "bounds", float)
        P = _get(b, "P", "bounds", float)
        if min(R, Q, P) < 1:
            raise ConfigurationError("bounds.R, bounds.Q, bounds.P must be >= 1")
        auto = compute_bounds(spec, term, model.atoms, T) if math.isfinite(term.A_xi) else None
        if auto is None:
            raise ConfigurationError("explicit bounds need a bounded terminal condition for the envelopes")
        return BoundCertificate(R, Q, P, T, auto.y_envelope, auto.z_envelope, auto.u_envelope)
    raise ConfigurationError("bounds must be 'auto', an object {R, Q, P} or absent")


def config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _solve(cfg, model, spec, term, seed):
    s = cfg.get("solver", {})
    method = _get(s, "method", "solver", None, "dp")
    grid = build_grid(cfg)
    if method == "dp":
        if term.state_fn is None:
            raise ConfigurationError(f"terminal.family {term.name!r} is path-dependent; use solver.method 'picard'")
        lattice = build_lattice(cfg)
        return solve_markov_dp(ForwardSpec.from_levy(model), spec, term.state_fn, model.atoms, lattice, grid), None
    if method == "picard":
        n_paths = _get(s, "paths", "solver", int, 10000)
        bundle = sample_paths(model, grid, n_paths, seed)
        sol = solve_picard_regression(model, spec, term, bundle, basis=s.get("basis"),
                                      tol=_get(s, "tol", "solver", float, 1e-6),
                                      max_iter=_get(s, "max_iter", "solver", int, 50))
        return sol, bundle
    raise ConfigurationError(f"solver.method must be 'dp' or 'picard', got {method!r}")


def _write(out: Path, name: str, text: str):
    (out / name).write_text(text)


def _json(obj) -> str:
    def default(o):
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if isinstance(o, np.bool_):
            return bool(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, tuple):
            return list(o)
        raise TypeError(type(o).__name__)

    return json.dumps(obj, default=default, sort_keys=True, indent=2)


def run(config_path, out_dir, seed=None, task="solve") -> int:
    """Execute ``task`` on the JSON config and write artifacts to ``out_dir``."""
    try:
        return _run(config_path, out_dir, seed, task)
    except (ConfigurationError, DomainError, StabilityError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, NonConvergence) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VerificationFailure as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY


def _run(config_path, out_dir, seed, task) -> int:
    if task not in TASKS:
        raise ConfigurationError(f"--task must be one of {TASKS}")
    try:
        cfg = json.loads(Path(config_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigurationError("config must be a JSON object")
    unknown = set(cfg) - TOP_KEYS
    if unknown:
        raise ConfigurationError(f"unknown top-level config keys: {sorted(unknown)}")
    if seed is None:
        seed = cfg.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not (0 <= seed < 2**64):
        raise ConfigurationError("seed must be an unsigned 64-bit integer")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    model, model_info = build_model(cfg)
    manifest = {"task": task, "seed": seed, "config_hash": config_hash(cfg), "version": __version__,
                "numpy": np.__version__, "model_info": model_info, "tolerances": {}}
    status = EXIT_OK
    handler = globals()[f"_task_{task}"]
    status = handler(cfg, model, seed, out, manifest)
    _write(out, "manifest.json", _json(manifest))
    return status


def _task_simulate(cfg, model, seed, out, manifest):
    grid = build_grid(cfg)
    n = _get(cfg.get("solver", {}), "paths", "solver", int, 1000)
    bundle = sample_paths(model, grid, n, seed)
    _write(out, "paths.csv", bundle_to_csv(bundle))
    manifest["outputs"] = ["paths.csv"]
    return EXIT_OK


def _task_solve(cfg, model, seed, out, manifest):
    spec = build_generator(cfg)
    term = build_terminal(cfg, model)
    grid = build_grid(cfg)
    cert = build_certificate(cfg, spec, term, model, grid.T)
    if cert is not None:
        spec = truncate_generator(spec, cert, model.atoms)
        manifest["certificate"] = cert.as_dict()
    sol, _ = _solve(cfg, model, spec, term, seed)
    _write(out, "solution.csv", solution_to_csv(sol))
    s = cfg.get("solver", {})
    manifest["tolerances"] = {"picard_tol": s.get("tol", 1e-6), "fixed_point_tol": 1e-10}
    manifest["summary"] = {"Y0_mean": float(np.mean(sol.Y[0])), "converged": sol.converged}
    manifest["outputs"] = ["solution.csv"]
    if not sol.converged:
        raise NonConvergence("solver stopped before reaching its tolerance")
    return EXIT_OK


def _task_verify(cfg, model, seed, out, manifest):
    spec = build_generator(cfg)
    term = build_terminal(cfg, model)
    v = cfg.get("verify", {})
    path = _get(v, "solution", "verify", None, None)
    if path is not None:
        try:
            sol = solution_from_csv(Path(path).read_text())
        except OSError as exc:
            raise ConfigurationError(f"verify.solution: {exc}") from None
    else:
        grid = build_grid(cfg)
        cert0 = build_certificate(cfg, spec, term, model, grid.T)
        spec_s = truncate_generator(spec, cert0, model.atoms) if cert0 is not None else spec
        sol, _ = _solve(cfg, model, spec_s, term, seed)
    cert = build_certificate(cfg, spec, term, model, sol.grid.T) or compute_bounds(spec, term, model.atoms, sol.grid.T)
    C = _get(v, "C", "verify", float, 10.0)
    slack = _get(v, "slack", "verify", float, default_slack(sol, C))
    bounds = check_bounds(sol, cert, slack)
    upper, lower = sandwich_envelopes(spec, term, cert, sol.grid)
    sandwich_ok = bool(np.all(sol.Y <= upper[:, None] + slack) and np.all(sol.Y >= lower[:, None] - slack))
    reports = [bounds.as_dict(), {"check": "sandwich", "ok": sandwich_ok,
                                  "worst": float(np.max(np.abs(sol.Y) - upper[:, None])), "location": None}]
    if "compare_with" in v:
        other = solution_from_csv(Path(v["compare_with"]).read_text())
        cmp_ = check_comparison(sol, other, _get(v, "comparison_tol", "verify", float, 1e-8))
        reports.append(cmp_.as_dict())
    _write(out, "verify.json", _json(reports))
    manifest["tolerances"] = {"slack": slack, "C": C}
    manifest["outputs"] = ["verify.json"]
    if not all(r["ok"] for r in reports):
        raise VerificationFailure(", ".join(r["check"] for r in reports if not r["ok"]))
    return EXIT_OK


def _task_malliavin(cfg, model, seed, out, manifest):
    spec = build_generator(cfg)
    term = build_terminal(cfg, model)
    grid = build_grid(cfg)
    cert = build_certificate(cfg, spec, term, model, grid.T)
    if cert is not None:
        spec = truncate_generator(spec, cert, model.atoms)
    cfg_s = dict(cfg)
    cfg_s["solver"] = dict(cfg.get("solver", {}), method="picard")
    base, _ = _solve(cfg_s, model, spec, term, seed)
    mc = cfg.get("malliavin", {})
    dirs = mc.get("directions", "diagonal")
    diagonal = dirs == "diagonal"
    if diagonal:
        dirs = diagonal_directions(base, _get(mc, "n_nodes", "malliavin", int, 10),
                                   include_brownian=term.d0_xi is not None)
    elif not isinstance(dirs, list) or not all(isinstance(d, list) and len(d) == 2 for d in dirs):
        raise ConfigurationError("malliavin.directions must be 'diagonal' or a list of [r, v] pairs")
    derivs = {}
    rows = ["r,v,t,mean_DY"]
    for r, v in dirs:
        d = solve_derivative_bsde(spec, base, term, (float(r), float(v)))
        derivs[(float(r), float(v))] = d
        for i, t in enumerate(grid.nodes):
            rows.append(f"{float(r):.17g},{float(v):.17g},{t:.17g},{float(np.mean(d.Y[i])):.17g}")
    _write(out, "derivatives.csv", "\n".join(rows) + "\n")
    report = {"directions": [list(k) for k in derivs]}
    if diagonal:
        rep = identify_ZU(base, derivs)
        report.update(rep.as_dict())
    _write(out, "malliavin.json", _json(report))
    manifest["outputs"] = ["derivatives.csv", "malliavin.json"]
    if not all(d.converged for d in derivs.values()):
        raise NonConvergence("a derivative BSDE did not converge")
    return EXIT_OK


def _task_hlimit(cfg, model, seed, out, manifest):
    base = build_generator(cfg)
    term = build_terminal(cfg, model)
    h = cfg.get("hlimit", {})
    alpha = _get(h, "alpha", "hlimit", float, 1.0)
    hspec = exponential_utility_hspec(base, alpha)
    sched = _get(h, "schedule", "hlimit", None, [2**k for k in range(11)])
    tol = _get(h, "cauchy_tol", "hlimit", float, 1e-4)
    s = cfg.get("solver", {})
    method = _get(s, "method", "solver", None, "dp")
    grid = build_grid(cfg)
    if method == "dp":
        settings = {"lattice": build_lattice(cfg), "time_grid": grid}
    else:
        settings = {"bundle": sample_paths(model, grid, _get(s, "paths", "solver", int, 10000), seed),
                    "basis": s.get("basis"), "tol": _get(s, "tol", "solver", float, 1e-6)}
    res = solve_H_limit(hspec, term, model, solver=method, settings=settings, n_schedule=sched, cauchy_tol=tol)
    _write(out, "hlimit_table.csv", res.table_csv())
    _write(out, "solution.csv", solution_to_csv(res.solution))
    bounds = check_bounds(res.solution, res.certificate) if res.certificate is not None else None
    _write(out, "hlimit.json", _json({"converged": res.converged, "n_final": res.n_final,
                                      "bounds": bounds.as_dict() if bounds else None}))
    manifest["tolerances"] = {"cauchy_tol": tol}
    manifest["outputs"] = ["hlimit_table.csv", "solution.csv", "hlimit.json"]
    if not res.converged:
        raise NonConvergence("cutoff schedule exhausted before the Cauchy tolerance")
    if bounds is not None and not bounds.ok:
        raise VerificationFailure("bounds")
    return EXIT_OK


def _task_pdie(cfg, model, seed, out, manifest):
    spec = build_generator(cfg)
    term = build_terminal(cfg, model)
    if term.state_fn is None:
        raise ConfigurationError("pdie needs a Markov terminal condition")
    p = cfg.get("pdie", {})
    v = build_lattice(cfg, "pdie")
    grid = build_grid(cfg)
    dt = _get(p, "dt", "pdie", float, None)
    pgrid_t = TimeGrid.uniform(grid.T, int(round(grid.T / dt))) if dt else grid
    forward = ForwardSpec.from_levy(model)
    pg = solve_pdie(forward, spec, term.state_fn, PdieGrid(v, pgrid_t), model.atoms)
    _write(out, "pdie.csv", pg.to_csv())
    manifest["outputs"] = ["pdie.csv"]
    if p.get("cross_validate", False):
        sol = solve_markov_dp(forward, spec, term.state_fn, model.atoms, v, grid)
        rep = cross_validate(pg, sol)
        _write(out, "cross_validation.json", _json(rep.as_dict()))
        manifest["outputs"].append("cross_validation.json")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="levybsde", description=__doc__.splitlines()[0])
    parser.add_argument("--config", required=True, help="JSON experiment description")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    parser.add_argument("--task", default="solve", choices=TASKS)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return run(args.config, args.out, args.seed, args.task)


if __name__ == "__main__":
    sys.exit(main())
