"""Command-line driver for batch experiments.

Every run reads a sectioned ``key = value`` config file, validates all of it
before touching the output directory, runs one pipeline and writes its CSVs
together with ``run.json`` (resolved config, library versions, wall time).

Exit codes: 0 on success, 2 when the config or command line is invalid,
3 when a solver fails.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import platform
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__, inviscid, masterweak, selection, viscous
from .kernels import BACKEND
from .model import BUILTIN_MODELS, ModelSpec, NoiseConfig, random_potential_model
from .simplex import GridField, SimplexGrid, interpolate, read_field_csv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_SOLVER = 3

MODEL_NAMES = tuple(BUILTIN_MODELS) + ("random_potential",)
FORMATS = ("csv", "plot")


class ConfigError(ValueError):
    """Raised for any invalid config entry or command-line value."""


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(";", ",").split(",") if x.strip())


def _names(text: str) -> tuple:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _optional_float(text: str):
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


# section -> key -> (parser, default)
SCHEMA = {
    "model": {
        "name": (str, "d2_benchmark"),
        "d": (int, 2),
        "T": (float, 3.0),
        "M": (_optional_float, None),
        "potential_seed": (int, 0),
        "p0": (_floats, (0.75, 0.25)),
    },
    "grid": {
        "h": (float, 0.01),
        "dt": (_optional_float, None),
        "dm": (float, 0.01),
        "max_slices": (int, 101),
        "margin": (float, 0.1),
    },
    "solver": {
        "n_steps": (int, 300),
        "multistart": (int, 20),
        "damping": (float, 0.5),
    },
    "mc": {
        "n_paths": (int, 2000),
        "dt_sde": (float, 1e-3),
        "seed": (int, 0),
    },
    "schedule": {
        "eps_list": (_floats, (0.3, 0.2, 0.1)),
        "eps": (float, 0.2),
        "a": (float, 0.5),
        "prefactor": (float, 0.01),
        "kappa0": (float, 0.045),
        "kappa2": (_optional_float, None),
    },
    "output": {
        "directory": (str, "potmfg_out"),
        "formats": (_names, ("csv", "plot")),
    },
}


def _config_value(value):
    if isinstance(value, tuple):
        return list(value)
    return value


@dataclass
class Experiment:
    """A validated config with every object the pipelines need."""

    settings: dict
    model: ModelSpec
    grid: SimplexGrid
    p0: np.ndarray
    schedule: selection.SelectionSchedule
    noise: NoiseConfig
    workers: int
    out: Path

    def resolved(self) -> dict:
        return {sec: {k: _config_value(v) for k, v in vals.items()} for sec, vals in self.settings.items()}


def read_config(path: str | None) -> dict:
    """Parse the config file against the schema; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    settings = {sec: {k: default for k, (_, default) in keys.items()} for sec, keys in SCHEMA.items()}
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in parser.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key '{key}' in section [{sec}]")
            conv = SCHEMA[sec][key][0]
            try:
                settings[sec][key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"[{sec}] {key} = {raw!r}: {exc}") from exc
    return settings


def _build_model(s: dict) -> ModelSpec:
    name = s["name"]
    if name not in MODEL_NAMES:
        raise ConfigError(f"[model] name must be one of {', '.join(MODEL_NAMES)}")
    if s["d"] < 2:
        raise ConfigError("[model] d must be at least 2")
    if s["T"] <= 0:
        raise ConfigError("[model] T must be positive")
    if name == "d2_benchmark" and s["d"] != 2:
        raise ConfigError("[model] the d2_benchmark model has d = 2")
    if name == "random_potential":
        model = random_potential_model(s["d"], s["T"], s["potential_seed"])
    else:
        model = BUILTIN_MODELS[name](s["d"], s["T"])
    if s["M"] is not None:
        if s["M"] <= 0:
            raise ConfigError("[model] M must be positive")
        model = ModelSpec(model.d, model.T, model.f, model.g, model.F, model.G, s["M"], model.name)
    return model


def build_experiment(settings: dict, workers: int) -> Experiment:
    """Validate every setting against the solvers' preconditions; nothing is written here."""
    try:
        model = _build_model(settings["model"])
        p0 = np.asarray(settings["model"]["p0"], dtype=float)
        if p0.shape != (model.d,) or np.any(p0 <= 0) or abs(p0.sum() - 1.0) > 1e-9:
            raise ConfigError(f"[model] p0 must be {model.d} positive numbers summing to 1")
        p0 = p0 / p0.sum()
        g = settings["grid"]
        n_div = 1.0 / g["h"]
        if g["h"] <= 0 or abs(n_div - round(n_div)) > 1e-9:
            raise ConfigError("[grid] h must be 1/N for a positive integer N")
        grid = SimplexGrid(model.d, g["h"])
        if g["dm"] <= 0 or abs(2.0 / g["dm"] - round(2.0 / g["dm"])) > 1e-9:
            raise ConfigError("[grid] dm must divide 2")
        if g["max_slices"] < 2:
            raise ConfigError("[grid] max_slices must be at least 2")
        if not 0 <= g["margin"] < 1.0 / model.d:
            raise ConfigError("[grid] margin must lie in [0, 1/d)")
        if g["dt"] is not None and g["dt"] <= 0:
            raise ConfigError("[grid] dt must be positive")
        sol = settings["solver"]
        if sol["n_steps"] < 10 or sol["multistart"] < 1 or not 0 < sol["damping"] <= 1:
            raise ConfigError("[solver] needs n_steps >= 10, multistart >= 1 and damping in (0, 1]")
        mc = settings["mc"]
        if mc["n_paths"] < 2 or mc["dt_sde"] <= 0 or mc["dt_sde"] > model.T or mc["seed"] < 0:
            raise ConfigError("[mc] needs n_paths >= 2, 0 < dt_sde <= T and seed >= 0")
        sc = settings["schedule"]
        schedule = selection.SelectionSchedule(sc["eps_list"], a=sc["a"], prefactor=sc["prefactor"],
                                               kappa0=sc["kappa0"], kappa2=sc["kappa2"]).for_model(model)
        schedule.validate()
        eps = sc["eps"]
        if not 0 < eps <= 1:
            raise ConfigError("[schedule] eps must lie in (0, 1]")
        single = selection.SelectionSchedule((eps,), a=sc["a"], prefactor=sc["prefactor"], kappa0=sc["kappa0"],
                                             kappa2=schedule.kappa2)
        noise = single.config(eps)
        if g["dt"] is not None:
            limit = min(inviscid.cfl_limit_inviscid(model, grid), inviscid.cfl_limit_viscous(model, noise, grid))
            if g["dt"] > limit:
                raise ConfigError(f"[grid] dt = {g['dt']} exceeds the stability limit {limit:.4g}")
        out = settings["output"]
        bad = [f for f in out["formats"] if f not in FORMATS]
        if bad or "csv" not in out["formats"]:
            raise ConfigError(f"[output] formats must include csv and may add plot; got {', '.join(out['formats'])}")
        if workers < 1:
            raise ConfigError("--threads must be at least 1")
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    settings["schedule"]["kappa2"] = schedule.kappa2
    settings["model"]["M"] = model.M
    return Experiment(settings, model, grid, p0, schedule, noise, workers, Path(out["directory"]))


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _cell(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return repr(float(x))


def _write_rows(path: Path, header: list, rows: list) -> None:
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(_cell(x) for x in r))
    path.write_text("\n".join(lines) + "\n")


def _plot_field_script(path: Path, csv_name: str, title: str, using: str) -> None:
    lines = [
        f"# {title}",
        "set datafile separator ','",
        "set terminal pngcairo size 900,600",
        f"set output '{Path(csv_name).stem}.png'",
        f"plot '{csv_name}' using {using} skip 1 with points pointtype 7 pointsize 0.3 title '{title}'",
    ]
    path.write_text("\n".join(lines) + "\n")


def _wants_plot(exp: Experiment) -> bool:
    return "plot" in exp.settings["output"]["formats"]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _solve_value(exp: Experiment) -> GridField:
    g = exp.settings["grid"]
    return inviscid.hjb_solve(exp.model, exp.grid, dt=g["dt"], max_slices=g["max_slices"])


def cmd_hjb(exp: Experiment) -> list:
    """Value function of the noiseless control problem."""
    value = _solve_value(exp)
    value.to_csv(exp.out / "value.csv")
    files = ["value.csv"]
    if _wants_plot(exp) and exp.model.d == 2:
        _plot_field_script(exp.out / "value.gp", "value.csv", "value function", "2:3")
        files.append("value.gp")
    return files


def cmd_mfcp(exp: Experiment) -> list:
    """Minimisers of the planner problem from ``p0``."""
    value = _solve_value(exp)
    res = inviscid.mfcp_minimize(exp.model, 0.0, exp.p0, value, n_steps=exp.settings["solver"]["n_steps"])
    files = []
    rows = []
    for k, (tr, cost) in enumerate(zip(res.minimizers, res.minimizer_costs)):
        name = f"minimizer_{k + 1}.csv"
        tr.to_csv(exp.out / name)
        files.append(name)
        resid = inviscid.best_response_residual(exp.model, tr, exp.p0)
        rows.append([k + 1, cost, resid] + list(tr.p[-1]))
    header = ["minimizer", "cost", "best_response_residual"] + [f"pT_{i + 1}" for i in range(exp.model.d)]
    _write_rows(exp.out / "mfcp.csv", header, rows)
    _write_rows(exp.out / "mfcp_start.csv", ["value_at_start", "differentiable"],
                [[res.value_at_start, float(res.differentiable)]])
    return files + ["mfcp.csv", "mfcp_start.csv"]


def cmd_mfg(exp: Experiment) -> list:
    """All equilibria found by multistart fixed-point iteration."""
    sol = exp.settings["solver"]
    res = inviscid.mfg_fixed_point(exp.model, exp.p0, n_steps=sol["n_steps"], damping=sol["damping"],
                                   multistart=sol["multistart"], seed=exp.settings["mc"]["seed"])
    files = []
    rows = []
    for k, (tr, resid) in enumerate(zip(res.equilibria, res.residuals)):
        name = f"equilibrium_{k + 1}.csv"
        tr.to_csv(exp.out / name)
        files.append(name)
        cost = np.nan
        if exp.model.has_potential:
            cost = inviscid.cost_calJ(exp.model, tr.alpha, exp.p0, tr.times)[0]
        rows.append([k + 1, resid, cost] + list(tr.p[-1]))
    header = ["equilibrium", "best_response_residual", "planner_cost"] + [f"pT_{i + 1}" for i in range(exp.model.d)]
    _write_rows(exp.out / "equilibria.csv", header, rows)
    return files + ["equilibria.csv"]


def cmd_viscous(exp: Experiment) -> list:
    """Noisy value, its gradient, population cost, per-state values and an equilibrium ensemble."""
    model, cfg, grid = exp.model, exp.noise, exp.grid
    g, mc = exp.settings["grid"], exp.settings["mc"]
    calV = viscous.hjb_solve_viscous(model, cfg, grid, dt=g["dt"], max_slices=g["max_slices"])
    V = viscous.extract_V(calV)
    Y = viscous.solve_Y(V, model, cfg)
    th = viscous.compute_theta(V, Y, cfg)
    U = viscous.reconstruct_U(V, Y)
    for name, fld in (("value", calV), ("gradient", V), ("population_cost", Y), ("correction", th.theta),
                      ("per_state_value", U)):
        fld.to_csv(exp.out / f"{name}.csv")
    res = viscous.master_residual(U, model, cfg, th.theta, margin=g["margin"])
    ens = viscous.simulate(model, cfg, exp.p0, mc["dt_sde"], mc["n_paths"], mc["seed"], feedback=V, grid=grid,
                           theta=th.theta, q0=exp.p0, workers=exp.workers)
    ens.to_csv(exp.out / "ensemble.csv")
    cost = viscous.cost_mc(ens, model)
    v0 = float(interpolate(calV, 0.0, exp.p0[:-1])[0])
    _write_rows(exp.out / "summary.csv",
                ["eps", "value_at_start", "mc_planner_cost", "mc_planner_se", "mc_xi", "mc_xi_se",
                 "boundary_hit_rate", "master_residual", "master_constant"],
                [[cfg.eps, v0, cost.planner[0], cost.planner[1], cost.xi[0], cost.xi[1],
                  viscous.boundary_hit_rate(ens), res["residual"], res["constant"]]])
    return ["value.csv", "gradient.csv", "population_cost.csv", "correction.csv", "per_state_value.csv",
            "ensemble.csv", "summary.csv"]


def cmd_sweep(exp: Experiment) -> list:
    """Vanishing-viscosity sweep over the scheduled noise levels."""
    model, grid = exp.model, exp.grid
    g, mc = exp.settings["grid"], exp.settings["mc"]
    ref = selection.build_reference(model, grid, g["margin"])
    res = inviscid.mfcp_minimize(model, 0.0, exp.p0, ref.value, n_steps=exp.settings["solver"]["n_steps"])
    trajectories = list(res.minimizers)
    if not res.differentiable:
        trajectories.append(selection.static_trajectory(exp.p0, model.T))
    ref.trajectories = trajectories
    settings = selection.MonteCarloSettings(mc["n_paths"], mc["dt_sde"], mc["seed"], exp.workers)
    report, _ = selection.run_sweep(model, exp.p0, exp.schedule, grid, settings, reference=ref, margin=g["margin"])
    report.to_csv(exp.out / "convergence.csv")
    files = ["convergence.csv"]
    if _wants_plot(exp):
        report.write_plot_script(exp.out / "convergence.gp", "convergence.csv")
        files.append("convergence.gp")
    _write_rows(exp.out / "trends.csv", ["metric", "strictly_decreasing"],
                [[k, float(v)] for k, v in report.trends.items()])
    return files + ["trends.csv"]


def _require_two_states(exp: Experiment) -> None:
    if exp.model.d != 2:
        raise ConfigError("this command needs a two-state model (d = 2)")


def cmd_conslaw(exp: Experiment) -> list:
    """Entropy solution of the two-state conservation law and its gap to the value gradient."""
    cl = masterweak.reduce_d2(exp.model)
    g = exp.settings["grid"]
    Z = masterweak.entropy_solve(cl, g["dm"], max_slices=g["max_slices"])
    Z.to_csv(exp.out / "entropy_field.csv")
    value = _solve_value(exp)
    gap = masterweak.l1_gap(Z, masterweak.value_to_line(value))
    jumps = masterweak.jump_locations(Z)
    _write_rows(exp.out / "conslaw.csv", ["dm", "l1_gap_to_value_gradient", "sup_abs_Z", "n_jumps"],
                [[g["dm"], gap, float(np.max(np.abs(Z.slice_at(0.0)))), len(jumps)]])
    _write_rows(exp.out / "jumps.csv", ["m"], [[x] for x in jumps])
    files = ["entropy_field.csv", "conslaw.csv", "jumps.csv"]
    if _wants_plot(exp):
        _plot_field_script(exp.out / "entropy_field.gp", "entropy_field.csv", "entropy field", "2:3")
        files.append("entropy_field.gp")
    return files


def _line_from_file(path: str, d: int) -> masterweak.LineField:
    header = Path(path).read_text().split("\n", 1)[0].strip()
    if header == "t,m,Z":
        return masterweak.LineField.from_csv(path)
    fld = read_field_csv(path, d)
    if fld.k == 1:
        return masterweak.value_to_line(fld)
    if fld.k == 2:
        order = np.argsort(fld.grid.p[:, 0])
        m = 2.0 * fld.grid.p[order, 0] - 1.0
        Z = fld.values[:, order, 1] - fld.values[:, order, 0]
        return masterweak.LineField(fld.times, m, Z)
    raise ConfigError(f"{path}: expected a value, a two-component per-state field or a t,m,Z table")


def load_fields(exp: Experiment, field_files: list) -> list:
    """Read candidate fields for certification: two-state line fields, or chart-gradient grid fields."""
    if not field_files:
        raise ConfigError("certify needs at least one --field file")
    fields = []
    for f in field_files:
        if not Path(f).is_file():
            raise ConfigError(f"field file {f} not found")
        try:
            if exp.model.d == 2:
                fields.append(_line_from_file(f, 2))
            else:
                fld = read_field_csv(f, exp.model.d)
                fields.append(masterweak.chart_gradient_field(fld) if fld.k == 1 else fld)
        except (ValueError, IndexError, OSError) as exc:
            raise ConfigError(f"cannot read field file {f}: {exc}") from exc
    return fields


def cmd_certify(exp: Experiment, fields: list) -> list:
    """Admissibility certificate for candidate fields at two or more meshes."""
    model = exp.model
    if model.d == 2:
        cl = masterweak.reduce_d2(model)
        cert = masterweak.certify_line(fields, cl, model)
        cert.write(exp.out / "certificate.txt")
        rows = [[mesh, name, value, thr, "pass" if ok else "fail"]
                for mesh, clause in zip(cert.meshes, cert.clauses) for name, value, thr, ok in clause]
        _write_rows(exp.out / "certificate.csv", ["mesh", "clause", "value", "threshold", "status"], rows)
        return ["certificate.txt", "certificate.csv"]
    flux = masterweak.hjb_chart_flux(model)
    rows = []
    for fld in fields:
        samples = masterweak.samples_from_grid(fld)
        radii = masterweak.resolved_radii(fld.grid.h)
        battery = masterweak.bump_battery(model.d - 1, model.T, radii=radii)
        spatial = masterweak.bump_battery(model.d - 1, model.T, radii=radii, spatial_only=True)
        if len(battery) < 25 or len(spatial) < 25:
            raise ConfigError(f"mesh h={fld.grid.h} is too coarse for a resolved test battery; refine the grid")
        wr = masterweak.weak_residual(samples, flux, battery)
        cr = masterweak.curl_residual(samples, spatial)
        rows.append([fld.grid.h, "weak_residual", wr["max"]])
        rows.append([fld.grid.h, "curl", cr["max"]])
    _write_rows(exp.out / "certificate.csv", ["mesh", "clause", "value"], rows)
    return ["certificate.csv"]


COMMANDS = {
    "hjb": cmd_hjb,
    "mfcp": cmd_mfcp,
    "mfg": cmd_mfg,
    "viscous": cmd_viscous,
    "sweep": cmd_sweep,
    "conslaw": cmd_conslaw,
    "certify": cmd_certify,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="potmfg", description="Finite-state potential mean field game experiments")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="sectioned key = value config file")
    ap.add_argument("--out", help="output directory (overrides [output] directory)")
    ap.add_argument("--seed", type=int, help="Monte Carlo seed (overrides [mc] seed)")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for Monte Carlo and sweeps")
    ap.add_argument("--field", action="append", default=[], help="field CSV to certify (repeat for each mesh)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _versions() -> dict:
    return {"potmfg": __version__, "backend": BACKEND, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def main(argv: list | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = read_config(args.config)
        if args.out is not None:
            settings["output"]["directory"] = args.out
        if args.seed is not None:
            settings["mc"]["seed"] = args.seed
        exp = build_experiment(settings, args.threads)
        if args.command == "conslaw":
            _require_two_states(exp)
        fields = load_fields(exp, args.field) if args.command == "certify" else None
    except ConfigError as exc:
        print(f"potmfg: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID

    exp.out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    record = {"command": args.command, "config": exp.resolved(), "threads": exp.workers, "versions": _versions()}
    status = EXIT_OK
    try:
        if args.command == "certify":
            files = cmd_certify(exp, fields)
            record["fields"] = list(args.field)
        else:
            files = COMMANDS[args.command](exp)
        record["files"] = files
    except ConfigError as exc:
        print(f"potmfg: invalid input: {exc}", file=sys.stderr)
        record["error"] = str(exc)
        status = EXIT_INVALID
    except (ValueError, RuntimeError, FloatingPointError, ArithmeticError) as exc:
        logger.exception("solver failure")
        print(f"potmfg: solver failure: {exc}", file=sys.stderr)
        record["error"] = str(exc)
        status = EXIT_SOLVER
    record["exit_code"] = status
    record["wall_time_s"] = time.perf_counter() - start
    (exp.out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return status


if __name__ == "__main__":
    sys.exit(main())
