"""Vanishing-viscosity experiments: schedules, sweeps over the noise level and
convergence metrics against the deterministic references.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import viscous
from .inviscid import (
    Trajectory,
    _path_mid,
    _u_rhs,
    differentiability_test,
    gradient_field,
    hjb_solve,
    rollout_feedback,
)
from .model import ModelSpec, NoiseConfig
from .simplex import GridField, SimplexGrid

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SelectionSchedule:
    """Noise levels with the repulsion parameters tied to each of them.

    ``delta(eps) = prefactor * eps**a`` and ``theta(eps) = delta(eps) / 4``;
    the plateau near the boundary is ``kappa2 / eps**2``.  When ``kappa2`` is
    not given it defaults to ``5 * M`` once a model is attached through
    :meth:`for_model`.
    """

    eps_list: tuple
    a: float = 0.5
    prefactor: float = 0.01
    kappa0: float = 0.045
    kappa2: float | None = None

    def __post_init__(self):
        eps = tuple(float(e) for e in self.eps_list)
        object.__setattr__(self, "eps_list", eps)
        if not eps:
            raise ValueError("eps_list is empty")
        if any(e <= 0 or e > 1 for e in eps):
            raise ValueError("noise levels must lie in (0, 1]")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError("eps_list must be strictly decreasing")
        if not 0 < self.a <= 1:
            raise ValueError("the exponent a must lie in (0, 1]")
        if self.prefactor <= 0:
            raise ValueError("the prefactor must be positive")
        if self.kappa0 < 0:
            raise ValueError("kappa0 must be non-negative")
        if self.kappa2 is not None and self.kappa2 <= 0:
            raise ValueError("kappa2 must be positive")
        self.validate()

    def for_model(self, model: ModelSpec) -> "SelectionSchedule":
        """This schedule with ``kappa2`` filled in as ``5 * M`` when it was left unset."""
        if self.kappa2 is not None:
            return self
        return replace(self, kappa2=5.0 * model.M)

    def _kappa2(self) -> float:
        if self.kappa2 is None:
            raise ValueError("kappa2 is unset; attach a model with for_model()")
        return self.kappa2

    def delta(self, eps: float) -> float:
        return self.prefactor * eps**self.a

    def theta(self, eps: float) -> float:
        return self.delta(eps) / 4.0

    def kappa_eps(self, eps: float) -> float:
        return self._kappa2() / eps**2

    def config(self, eps: float) -> NoiseConfig:
        return NoiseConfig(eps, theta=self.theta(eps), delta=self.delta(eps), kappa0=self.kappa0,
                           kappa2=self._kappa2())

    def validate(self) -> None:
        """Check ``2 theta <= delta <= 1/2`` and, once ``kappa2`` is known, ``kappa_eps >= kappa0`` for every level."""
        for e in self.eps_list:
            if not 2 * self.theta(e) <= self.delta(e) <= 0.5:
                raise ValueError(f"schedule gives delta={self.delta(e):.4g} outside (0, 1/2] at eps={e}")
            if self.kappa2 is not None and self.kappa_eps(e) < self.kappa0 * (1 - 1e-12):
                raise ValueError(f"kappa_eps={self.kappa_eps(e):.4g} < kappa0={self.kappa0} at eps={e}")
            if self.kappa0 < 0.5 * e * e:
                logger.warning("kappa0=%.3g below eps^2/2 at eps=%.3g", self.kappa0, e)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def interior_mask(grid: SimplexGrid, margin: float) -> np.ndarray:
    """Nodes whose every coordinate is at least ``margin``."""
    return np.all(grid.p >= margin - 1e-12, axis=1)


def compact_starts(d: int, margin: float = 0.1, n: int = 5) -> list:
    """Starting points spread over the interior set where every coordinate is at least ``margin``.

    Two states: ``n`` evenly spaced points.  More states: the corners of the
    set and its barycentre.
    """
    if d == 2:
        return [np.array([x, 1.0 - x]) for x in np.linspace(margin, 1.0 - margin, n)]
    starts = []
    for i in range(d):
        p = np.full(d, margin)
        p[i] = 1.0 - (d - 1) * margin
        starts.append(p)
    starts.append(np.full(d, 1.0 / d))
    return starts


def trajectory_distance(ens, trajectories: list) -> tuple[float, np.ndarray, np.ndarray]:
    """Sup-in-time distance of each simulated path to the nearest reference path.

    Reference paths are interpolated to the ensemble's save times.  Returns
    the mean distance to the nearest reference, the share of paths assigned
    to each reference, and the per-path nearest index.
    """
    if not trajectories:
        raise ValueError("the reference set is empty")
    ok = ens.valid
    P = ens.p[ok]  # (B, nt, d)
    dists = []
    for tr in trajectories:
        ref = np.stack([np.interp(ens.times, tr.times, tr.p[:, i]) for i in range(tr.p.shape[1])], axis=1)
        dists.append(np.max(np.linalg.norm(P - ref[None], axis=2), axis=1))
    D = np.stack(dists, axis=1)
    nearest = np.argmin(D, axis=1)
    weights = np.bincount(nearest, minlength=len(trajectories)) / max(1, nearest.size)
    return float(np.mean(D[np.arange(D.shape[0]), nearest])), weights, nearest


def differentiable_region(value: GridField, mask: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Boolean ``(times, nodes)`` table of where the value passes the differentiability test."""
    grid = value.grid
    out = np.zeros((times.size, grid.size), dtype=bool)
    nodes = np.flatnonzero(mask)
    for s, t in enumerate(times):
        for x in nodes:
            out[s, x] = differentiability_test(value, t, grid.p[x]).differentiable
    return out


def _cell_volume(grid: SimplexGrid) -> float:
    return grid.h ** grid.n


def value_selection_check(U: GridField, value: GridField, region: np.ndarray, times: np.ndarray) -> dict:
    """L1 error of the per-state value differences against the differences of the value's gradient.

    ``region`` is a ``(times, nodes)`` mask, typically from
    :func:`differentiable_region`.  Returns the L1 integral over the region,
    its normalised mean and the per-node error at every time.
    """
    grid = U.grid
    DV = gradient_field(value)
    err = np.zeros((times.size, grid.size))
    for s, t in enumerate(times):
        u = U.slice_at(t)
        v = DV.slice_at(t)
        du = u[:, :, None] - u[:, None, :]
        dv = v[:, :, None] - v[:, None, :]
        err[s] = np.max(np.abs(du - dv), axis=(1, 2))
    dt = times[1] - times[0] if times.size > 1 else 1.0
    l1 = float(np.sum(err[region]) * _cell_volume(grid) * dt)
    mean = float(np.mean(err[region])) if np.any(region) else 0.0
    return {"l1": l1, "mean": mean, "error": err}


def u_reference(model: ModelSpec, value: GridField, t0: float, nodes: np.ndarray, n_steps: int = 300) -> np.ndarray:
    """Deterministic per-state values at ``(t0, node)``: best response along the optimal flow from that node.

    The flow is the feedback rollout from each node; the per-state values
    solve the backward player equation along it, all paths at once.
    """
    grid = value.grid
    V = gradient_field(value)
    starts = grid.p[nodes]
    roll = rollout_feedback(model, V, t0, starts, n_steps)
    times = roll.times
    P = roll.p  # (nt, B, d)
    dP = roll.dp
    dt = np.diff(times)
    P_mid = _path_mid(P, dP, dt[:, None, None])
    f_nodes = model.f(P)
    f_mid = model.f(P_mid)
    M = model.M
    u = model.g(P[-1])
    for k in range(times.size - 2, -1, -1):
        h = dt[k]
        k1 = _u_rhs(u, f_nodes[k + 1], M)
        k2 = _u_rhs(u - 0.5 * h * k1, f_mid[k], M)
        k3 = _u_rhs(u - 0.5 * h * k2, f_mid[k], M)
        k4 = _u_rhs(u - h * k3, f_nodes[k], M)
        u = u - h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return u


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------


@dataclass
class MonteCarloSettings:
    n_paths: int = 2000
    dt: float = 1e-3
    seed: int = 0
    workers: int = 1


@dataclass
class ConvergenceReport:
    """Per-noise-level metrics with monotone-trend flags."""

    rows: list
    n_refs: int
    trends: dict = field(default_factory=dict)

    COLUMNS = ["eps", "delta", "theta", "kappa_eps", "sup_gap_V", "l1_gap_DV", "l1_gap_U", "xi", "traj_dist"]

    def compute_trends(self) -> dict:
        good = [r for r in self.rows if r.get("status", "ok") == "ok"]
        for key in ("sup_gap_V", "l1_gap_DV", "l1_gap_U", "xi", "traj_dist"):
            vals = [r[key] for r in good]
            self.trends[key] = bool(len(vals) >= 2 and all(np.isfinite(vals)) and all(b < a for a, b in zip(vals, vals[1:])))
        return self.trends

    def header(self) -> list:
        return self.COLUMNS + [f"w_{k + 1}" for k in range(self.n_refs)] + ["boundary_hit_rate", "status"]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for r in self.rows:
                line = [repr(float(r.get(c, np.nan))) for c in self.COLUMNS]
                weights = list(r.get("weights", [np.nan] * self.n_refs))
                line += [repr(float(x)) for x in weights] + [repr(float(r.get("boundary_hit_rate", np.nan))),
                                                           r.get("status", "ok")]
                w.writerow(line)

    def write_plot_script(self, path, csv_name: str) -> None:
        """Emit plotting commands (gnuplot syntax) for every metric against the noise level."""
        cols = self.header()
        lines = [
            "# Convergence of the noisy problem as the noise level decreases",
            "set datafile separator ','",
            "set logscale x",
            "set xlabel 'eps'",
            "set key left top",
            "set terminal pngcairo size 900,600",
        ]
        for key in ("sup_gap_V", "l1_gap_DV", "l1_gap_U", "xi", "traj_dist"):
            idx = cols.index(key) + 1
            lines.append(f"set output '{key}.png'")
            lines.append(f"plot '{csv_name}' using 1:{idx} skip 1 with linespoints title '{key}'")
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class Reference:
    """Deterministic fields a sweep compares against."""

    value: GridField
    times: np.ndarray
    region: np.ndarray
    u_ref: dict
    trajectories: list


def build_reference(model: ModelSpec, grid: SimplexGrid, margin: float = 0.1, n_times: int = 4,
                    trajectories: list | None = None) -> Reference:
    """Deterministic value, its differentiable region and the per-state reference values.

    The region and the per-state values are computed on ``n_times`` evenly
    spaced times in ``[0, T)``.
    """
    value = hjb_solve(model, grid)
    times = np.linspace(0.0, model.T, n_times, endpoint=False)
    mask = interior_mask(grid, margin)
    region = differentiable_region(value, mask, times)
    u_ref = {}
    for s, t in enumerate(times):
        nodes = np.flatnonzero(region[s])
        if nodes.size:
            u_ref[s] = (nodes, u_reference(model, value, t, nodes))
    return Reference(value, times, region, u_ref, trajectories or [])


def xi_estimate(model: ModelSpec, cfg: NoiseConfig, V: GridField, theta: GridField, starts: list, mc: MonteCarloSettings
                ) -> tuple[float, float]:
    """Largest Monte Carlo estimate of the correction-cost contribution over starts and Dirac player states.

    The estimate is convex in the player's initial law, so Dirac starts attain
    the supremum over the simplex.  Returns the value and its standard error.
    """
    best = (0.0, 0.0)
    for p0 in starts:
        ens = viscous.simulate(model, cfg, p0, mc.dt, mc.n_paths, mc.seed, feedback=V, grid=V.grid,
                               workers=mc.workers)
        for i in range(model.d):
            q0 = np.zeros(model.d)
            q0[i] = 1.0
            ens_q = viscous.simulate_q(ens, q0, theta=theta)
            est = viscous.cost_mc(ens_q, model).xi
            if est[0] > best[0]:
                best = est
    return best


def _eps_row(model: ModelSpec, p0, schedule: SelectionSchedule, eps: float, grid: SimplexGrid, ref: Reference,
             mc: MonteCarloSettings, margin: float, xi_starts: list) -> tuple[dict, dict]:
    cfg = schedule.config(eps)
    row = {"eps": eps, "delta": cfg.delta, "theta": cfg.theta, "kappa_eps": cfg.kappa_eps}
    calV = viscous.hjb_solve_viscous(model, cfg, grid)
    V = viscous.extract_V(calV)
    Y = viscous.solve_Y(V, model, cfg)
    th = viscous.compute_theta(V, Y, cfg)
    U = viscous.reconstruct_U(V, Y)
    mask = interior_mask(grid, margin)
    ref_V = ref.value
    ref_DV = gradient_field(ref_V)
    sup_gap = 0.0
    l1_dv = 0.0
    dt_ref = ref_V.times[1] - ref_V.times[0]
    for t in ref_V.times:
        gap = np.abs(calV.slice_at(t)[:, 0] - ref_V.slice_at(t)[:, 0])
        sup_gap = max(sup_gap, float(np.max(gap[mask])))
        dv = np.linalg.norm(V.slice_at(t) - ref_DV.slice_at(t), axis=1)
        l1_dv += float(np.sum(dv[mask])) * _cell_volume(grid) * dt_ref
    row["sup_gap_V"] = sup_gap
    row["l1_gap_DV"] = l1_dv
    l1_u = 0.0
    dt_u = ref.times[1] - ref.times[0] if ref.times.size > 1 else model.T
    for s, (nodes, uref) in ref.u_ref.items():
        u = U.slice_at(ref.times[s])[nodes]
        l1_u += float(np.sum(np.max(np.abs(u - uref), axis=1))) * _cell_volume(grid) * dt_u
    row["l1_gap_U"] = l1_u
    ens = viscous.simulate(model, cfg, p0, mc.dt, mc.n_paths, mc.seed, feedback=V, grid=grid, workers=mc.workers)
    row["boundary_hit_rate"] = viscous.boundary_hit_rate(ens)
    if ref.trajectories:
        dist, weights, _ = trajectory_distance(ens, ref.trajectories)
        row["traj_dist"] = dist
        row["weights"] = weights
    else:
        row["traj_dist"] = float("nan")
    xi, xi_se = xi_estimate(model, cfg, V, th.theta, xi_starts, mc)
    row["xi"] = xi
    row["xi_se"] = xi_se
    cost = viscous.cost_mc(ens, model)
    row["cost_mc"], row["cost_se"] = cost.planner
    if row["boundary_hit_rate"] > 0.01:
        logger.warning("boundary-hit rate %.3g above 1%% at eps=%.3g: repulsion may be too weak",
                       row["boundary_hit_rate"], eps)
    fields = {"calV": calV, "V": V, "Y": Y, "theta": th.theta, "U": U, "ensemble": ens}
    return row, fields


def run_sweep(model: ModelSpec, p0, schedule: SelectionSchedule, grid: SimplexGrid, mc: MonteCarloSettings,
              reference: Reference | None = None, margin: float = 0.1, xi_starts: list | None = None,
              workers: int = 1, keep_fields: bool = False) -> tuple[ConvergenceReport, dict]:
    """Solve the noisy problem at every listed level and tabulate the gaps to the deterministic references.

    The correction-cost estimate is maximised over ``xi_starts`` (default:
    :func:`compact_starts` at the same margin).  A failure at one level is
    recorded in that row and the sweep continues.
    Levels run concurrently on ``workers`` threads; rows keep the schedule order.
    """
    p0 = np.asarray(p0, dtype=float)
    schedule = schedule.for_model(model)
    schedule.validate()
    ref = reference or build_reference(model, grid, margin)
    if xi_starts is None:
        xi_starts = compact_starts(model.d, margin)

    def one(eps):
        try:
            row, fields = _eps_row(model, p0, schedule, eps, grid, ref, mc, margin, xi_starts)
            row["status"] = "ok"
            return row, (fields if keep_fields else {})
        except (ValueError, FloatingPointError, RuntimeError) as exc:
            logger.error("sweep level eps=%.3g failed: %s", eps, exc)
            return {"eps": eps, "status": f"failed: {exc}".replace(",", ";")}, {}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, schedule.eps_list))
    else:
        results = [one(e) for e in schedule.eps_list]
    report = ConvergenceReport([r for r, _ in results], len(ref.trajectories))
    report.compute_trends()
    return report, {e: f for e, (_, f) in zip(schedule.eps_list, results)}


def symmetry_check(ens) -> tuple[float, float]:
    """Mean of ``p_1 - p_2`` at the horizon and its standard error (two-state ensembles)."""
    m = ens.p[ens.valid, -1, 0] - ens.p[ens.valid, -1, 1]
    return float(np.mean(m)), float(np.std(m, ddof=1) / np.sqrt(m.size))


def static_trajectory(p0, T: float, n: int = 301) -> Trajectory:
    """The constant flow at ``p0`` as a reference path."""
    times = np.linspace(0.0, T, n)
    d = len(p0)
    return Trajectory(times, np.tile(np.asarray(p0, dtype=float), (n, 1)), np.zeros((n, d, d)))

