"""Deterministic layer: Fokker-Planck ODE, costs, equilibria, value function and the control problem.

Paths live on a uniform time mesh.  Alongside node values, solvers keep the
time derivative at every node so that midpoint values needed by RK4 stages
can be reconstructed by cubic Hermite interpolation.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import optimize

from . import kernels
from .model import ModelSpec, NoiseConfig, htilde_all, lagrangian_all, optimal_rates
from .simplex import (
    GridField,
    SimplexGrid,
    interpolate_values,
    lattice_intrinsic_gradient,
    second_transition_difference,
    uniform_times,
)

logger = logging.getLogger(__name__)

CLIP_ERROR = 1e-8


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """A flow of distributions with its controls and, optionally, per-state values.

    ``alpha`` holds full rate matrices (diagonal = minus the row sum).
    ``dp``/``du`` are time derivatives at the nodes and ``alpha_mid`` the
    controls at step midpoints; they are optional refinements used by RK4.
    """

    times: np.ndarray
    p: np.ndarray
    alpha: np.ndarray
    u: np.ndarray | None = None
    dp: np.ndarray | None = None
    du: np.ndarray | None = None
    alpha_mid: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.p.shape[1]

    @property
    def x(self) -> np.ndarray:
        return self.p[:, :-1]

    @property
    def z(self) -> np.ndarray | None:
        """Chart adjoint ``z^i = u^i - u^d``."""
        return None if self.u is None else self.u[:, :-1] - self.u[:, -1:]

    @property
    def m(self) -> np.ndarray:
        """Mean parameter ``p_1 - p_2`` (two-state paths)."""
        return self.p[:, 0] - self.p[:, 1]

    def to_csv(self, path) -> None:
        """Write ``t,p_1..p_d,alpha_12,alpha_13,...`` rows with round-trip precision."""
        d = self.d
        pairs = [(i, j) for i in range(d) for j in range(d) if i != j]
        header = ["t"] + [f"p_{i + 1}" for i in range(d)] + [f"alpha_{i + 1}{j + 1}" for i, j in pairs]
        rates = np.stack([self.alpha[:, i, j] for i, j in pairs], axis=1)
        data = np.hstack([self.times[:, None], self.p, rates])
        buf = io.StringIO()
        np.savetxt(buf, data, delimiter=",", fmt="%.17g", header=",".join(header), comments="")
        Path(path).write_text(buf.getvalue())


def _hermite_mid(y0, y1, d0, d1, dt):
    """Cubic Hermite value at the midpoint of a step."""
    return 0.5 * (y0 + y1) + dt * (d0 - d1) / 8.0


def _path_mid(values: np.ndarray, derivs: np.ndarray, dt: float) -> np.ndarray:
    return _hermite_mid(values[:-1], values[1:], derivs[:-1], derivs[1:], dt)


def _fp_rhs(q: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """``dq_i/dt = sum_j q_j alpha_{ji}`` for full rate matrices."""
    return np.einsum("...j,...ji->...i", q, alpha)


def _full_rates(offdiag: np.ndarray) -> np.ndarray:
    d = offdiag.shape[-1]
    off = np.where(np.eye(d, dtype=bool), 0.0, offdiag)
    return off - np.eye(d) * off.sum(axis=-1, keepdims=True)


def _clip_renormalise(q: np.ndarray, stats: dict) -> np.ndarray:
    neg = np.minimum(q, 0.0)
    worst = float(-neg.min()) if neg.size else 0.0
    if worst > CLIP_ERROR:
        raise ValueError(f"negative mass {worst:.3g} exceeds {CLIP_ERROR}: reduce the step size")
    if worst > 0.0:
        stats["clip_mass"] = stats.get("clip_mass", 0.0) + float(-neg.sum())
        q = np.maximum(q, 0.0)
        q = q / q.sum(axis=-1, keepdims=True)
    return q


def solve_fp(alpha: np.ndarray, q0, times: np.ndarray, alpha_mid: np.ndarray | None = None) -> Trajectory:
    """RK4 integration of the Fokker-Planck ODE under a given control path.

    ``alpha`` has shape ``(n+1, d, d)`` (off-diagonal rates; the diagonal is
    rebuilt).  Midpoint controls default to the average of the step endpoints.
    Negative mass below ``1e-8`` is clipped and renormalised (logged in
    ``meta['clip_mass']``); larger negatives raise a step-size error.
    """
    times = np.asarray(times, dtype=float)
    A = _full_rates(np.asarray(alpha, dtype=float))
    Am = _full_rates(0.5 * (A[:-1] + A[1:]) if alpha_mid is None else np.asarray(alpha_mid, dtype=float))
    q = np.array(q0, dtype=float)
    n = times.size - 1
    out = np.empty((n + 1,) + q.shape)
    out[0] = q
    stats: dict = {}
    for k in range(n):
        dt = times[k + 1] - times[k]
        k1 = _fp_rhs(q, A[k])
        k2 = _fp_rhs(q + 0.5 * dt * k1, Am[k])
        k3 = _fp_rhs(q + 0.5 * dt * k2, Am[k])
        k4 = _fp_rhs(q + dt * k3, A[k + 1])
        q = q + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        q = _clip_renormalise(q, stats)
        out[k + 1] = q
    if stats.get("clip_mass"):
        logger.info("Fokker-Planck clipping removed %.3g mass in total", stats["clip_mass"])
    dq = _fp_rhs(out, A)
    return Trajectory(times, out, A, dp=dq, alpha_mid=Am, meta=stats)


def _trapezoid(values: np.ndarray, times: np.ndarray) -> float:
    return float(np.sum(0.5 * (values[1:] + values[:-1]) * np.diff(times)))


def cost_J(model: ModelSpec, alpha: np.ndarray, p: Trajectory | np.ndarray, q: Trajectory | np.ndarray,
           times: np.ndarray | None = None) -> float:
    """Cost of a representative player: running control plus state cost, and terminal cost, weighted by ``q``."""
    P = p.p if isinstance(p, Trajectory) else np.asarray(p)
    Q = q.p if isinstance(q, Trajectory) else np.asarray(q)
    if times is None:
        times = p.times if isinstance(p, Trajectory) else q.times
    if not (P.shape == Q.shape and P.shape[0] == times.size and np.shape(alpha)[0] == times.size):
        raise ValueError("cost_J: mesh mismatch between control, environment and player paths")
    run = np.sum(Q * (lagrangian_all(alpha) + model.f(P)), axis=1)
    return _trapezoid(run, times) + float(np.sum(Q[-1] * model.g(P[-1])))


def cost_calJ(model: ModelSpec, alpha: np.ndarray, p0, times: np.ndarray,
              alpha_mid: np.ndarray | None = None) -> tuple[float, Trajectory]:
    """Potential (planner) cost of a control path started from ``p0``; returns the cost and the flow."""
    if not model.has_potential:
        raise ValueError("the planner cost needs potentials F and G")
    q = solve_fp(alpha, p0, times, alpha_mid)
    run = np.sum(q.p * lagrangian_all(q.alpha), axis=1) + model.F(q.p)
    return _trapezoid(run, times) + float(model.G(q.p[-1])), q


# ---------------------------------------------------------------------------
# Best response and equilibria
# ---------------------------------------------------------------------------


@dataclass
class BestResponse:
    u: np.ndarray
    du: np.ndarray
    alpha: np.ndarray
    alpha_mid: np.ndarray
    q: Trajectory
    cost: float


def _value_bound(model: ModelSpec) -> float:
    if "value_bound" not in model.info:
        model.info["value_bound"] = model.value_bound()
    return model.info["value_bound"]


def _u_rhs(u, fcost, M):
    return -(htilde_all(u, M) + fcost)


def best_response(model: ModelSpec, p: Trajectory, q0=None) -> BestResponse:
    """Optimal feedback of one player against the environment ``p``.

    Backward RK4 for ``du^i/dt = -(Htilde_i(u) + f^i(p_t))`` with ``u_T = g(p_T)``,
    then ``alpha^{ij} = a*(u^i - u^j)`` and the induced player flow from ``q0``
    (default: the environment's initial point).
    """
    times = p.times
    P = p.p
    dP = p.dp if p.dp is not None else np.gradient(P, times, axis=0, edge_order=2)
    n = times.size - 1
    dt = np.diff(times)
    P_mid = _path_mid(P, dP, dt[:, None])
    f_nodes = model.f(P)
    f_mid = model.f(P_mid)
    M = model.M
    u = np.empty_like(P)
    u[n] = model.g(P[n])
    bound = _value_bound(model)
    for k in range(n - 1, -1, -1):
        h = dt[k]
        v = u[k + 1]
        k1 = _u_rhs(v, f_nodes[k + 1], M)
        k2 = _u_rhs(v - 0.5 * h * k1, f_mid[k], M)
        k3 = _u_rhs(v - 0.5 * h * k2, f_mid[k], M)
        k4 = _u_rhs(v - h * k3, f_nodes[k], M)
        u[k] = v - h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if np.max(np.abs(u[k])) > 2.0 * bound + 1e-9:
            raise FloatingPointError(f"value blow-up at t={times[k]:.4g}: |u|={np.max(np.abs(u[k])):.4g}")
    du = _u_rhs(u, f_nodes, M)
    u_mid = _path_mid(u, du, dt[:, None])
    alpha = _full_rates(optimal_rates(u, M))
    alpha_mid = _full_rates(optimal_rates(u_mid, M))
    q = solve_fp(alpha, P[0] if q0 is None else q0, times, alpha_mid)
    q.u = u
    q.du = du
    cost = cost_J(model, alpha, P, q.p, times)
    return BestResponse(u, du, alpha, alpha_mid, q, cost)


def _response_map(model: ModelSpec, p: Trajectory, p0) -> tuple[Trajectory, BestResponse]:
    br = best_response(model, p, p0)
    return br.q, br


def _static_path(p0, times) -> Trajectory:
    d = len(p0)
    n = times.size
    P = np.tile(np.asarray(p0, dtype=float), (n, 1))
    return Trajectory(times, P, np.zeros((n, d, d)), dp=np.zeros_like(P))


def _equilibrium_residual(model, p: Trajectory, p0) -> tuple[float, Trajectory, BestResponse]:
    q, br = _response_map(model, p, p0)
    return float(np.max(np.abs(q.p - p.p))), q, br


def best_response_residual(model: ModelSpec, p: Trajectory, p0) -> float:
    """Sup distance between a flow and the flow of its own best response; zero at an equilibrium."""
    return _equilibrium_residual(model, p, p0)[0]


def _picard(model, p0, start: Trajectory, damping: float, tol: float, max_iter: int):
    """Damped Picard iteration on the flow; returns ``(path, converged, iterations, history)``.

    The damping is halved whenever the update grows; the loop also stops early
    when 100 iterations fail to halve the update (a repelling fixed point).
    """
    p = start
    lam = damping
    prev = np.inf
    history = []
    for it in range(1, max_iter + 1):
        q, _ = _response_map(model, p, p0)
        upd = float(np.max(np.abs(q.p - p.p)))
        history.append(upd)
        if upd <= tol:
            return q, True, it, history
        if it > 100 and upd > 0.5 * history[-101]:
            break
        if upd > prev:
            lam = max(lam * 0.5, 1.0 / 64.0)
        prev = upd
        P = (1.0 - lam) * p.p + lam * q.p
        dP = (1.0 - lam) * (p.dp if p.dp is not None else 0.0) + lam * q.dp
        p = Trajectory(p.times, P, q.alpha, dp=dP)
    return p, False, len(history), history


def _joint_rhs(model, y, fcost_fn, M, d):
    P, U = y[:d], y[d:]
    A = _full_rates(optimal_rates(U, M))
    return np.concatenate([_fp_rhs(P, A), _u_rhs(U, fcost_fn(P), M)])


def _shoot(model: ModelSpec, p0, times: np.ndarray, z0: np.ndarray) -> np.ndarray:
    """Forward RK4 of the coupled flow/value system from ``(p0, (z0, 0))``; returns states ``(n+1, 2d)``."""
    d = model.d
    M = model.M
    y = np.concatenate([np.asarray(p0, dtype=float), np.append(z0, 0.0)])
    out = np.empty((times.size, 2 * d))
    out[0] = y
    for k in range(times.size - 1):
        h = times[k + 1] - times[k]
        k1 = _joint_rhs(model, y, model.f, M, d)
        k2 = _joint_rhs(model, y + 0.5 * h * k1, model.f, M, d)
        k3 = _joint_rhs(model, y + 0.5 * h * k2, model.f, M, d)
        k4 = _joint_rhs(model, y + h * k3, model.f, M, d)
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)) or np.max(np.abs(y[d:])) > 1e6:
            out[k + 1 :] = np.nan
            return out
        out[k + 1] = y
    return out


def _shooting(model: ModelSpec, p0, times: np.ndarray, z_guess: np.ndarray) -> Trajectory | None:
    """Solve the terminal condition ``z_T = g^i(p_T) - g^d(p_T)`` for the initial chart adjoint."""
    d = model.d

    def residual(z0):
        states = _shoot(model, p0, times, z0)
        if not np.all(np.isfinite(states[-1])):
            return np.full(d - 1, 1e6)
        P_T, U_T = states[-1, :d], states[-1, d:]
        g = model.g(P_T)
        return (U_T[:-1] - U_T[-1]) - (g[:-1] - g[-1])

    sol = optimize.root(residual, np.asarray(z_guess, dtype=float), method="hybr", options={"xtol": 1e-13})
    if not np.all(np.isfinite(sol.x)) or np.max(np.abs(residual(sol.x))) > 1e-9:
        return None
    states = _shoot(model, p0, times, sol.x)
    P = states[:, :d]
    A = _full_rates(optimal_rates(states[:, d:], model.M))
    return Trajectory(times, P, A, dp=_fp_rhs(P, A), meta={"method": "shooting"})


@dataclass
class FixedPointResult:
    equilibria: list
    residuals: list
    diagnostics: list


def _random_start(model: ModelSpec, p0, times, seed: int, k: int) -> Trajectory:
    rng = np.random.Generator(np.random.Philox(key=[seed, k]))
    d = model.d
    rates = rng.uniform(0.0, model.M, size=(d, d)) * rng.uniform(0.0, 1.0)
    alpha = np.broadcast_to(_full_rates(rates), (times.size, d, d)).copy()
    return solve_fp(alpha, p0, times)


def _find_equilibrium(model, p0, start, damping, tol, max_iter, residual_tol, use_shooting):
    path, ok, iters, hist = _picard(model, p0, start, damping, tol, max_iter)
    diag = {"picard_converged": ok, "iterations": iters, "last_update": hist[-1] if hist else None}
    res, q, br = _equilibrium_residual(model, path, p0)
    if res <= residual_tol:
        q.u, q.du = br.u, br.du
        diag["method"] = "picard"
        return q, res, diag
    if use_shooting:
        u0 = br.u[0]
        shot = _shooting(model, p0, path.times, u0[:-1] - u0[-1])
        if shot is not None:
            res_s, q_s, br_s = _equilibrium_residual(model, shot, p0)
            diag["shooting_residual"] = res_s
            if res_s <= residual_tol:
                q_s.u, q_s.du = br_s.u, br_s.du
                diag["method"] = "shooting"
                return q_s, res_s, diag
    diag["method"] = "failed"
    diag["residual"] = res
    return None, res, diag


def mfg_fixed_point(model: ModelSpec, p0, n_steps: int = 300, guess: Trajectory | None = None,
                    damping: float = 0.5, multistart: int = 20, seed: int = 0, tol: float = 1e-8,
                    max_iter: int = 500, residual_tol: float = 1e-6, dedup_tol: float = 1e-4,
                    shooting: bool = True, t0: float = 0.0) -> FixedPointResult:
    """Enumerate equilibria by damped Picard iteration from several starts.

    Start 0 is ``guess`` (default: the static flow ``p = p0``); the other starts
    are flows under random constant controls drawn from a counter-based stream
    keyed by ``(seed, start index)``.  Starts on which Picard stalls fall back to
    shooting on the initial adjoint.  Every returned flow has a best-response
    residual at most ``residual_tol``; flows closer than ``dedup_tol`` are merged.
    """
    p0 = np.asarray(p0, dtype=float)
    if np.any(p0 <= 0.0):
        raise ValueError("the initial distribution must be interior")
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    times = uniform_times(t0, model.T, n_steps + 1)
    found: list[Trajectory] = []
    residuals: list[float] = []
    diags = []
    for k in range(max(multistart, 1)):
        if k == 0:
            start = guess if guess is not None else _static_path(p0, times)
        else:
            start = _random_start(model, p0, times, seed, k)
        eq, res, diag = _find_equilibrium(model, p0, start, damping, tol, max_iter, residual_tol, shooting)
        diag["start"] = k
        diags.append(diag)
        if eq is None:
            continue
        if all(np.max(np.abs(eq.p - other.p)) >= dedup_tol for other in found):
            eq.meta.update(residual=res, start=k, method=diag["method"])
            found.append(eq)
            residuals.append(res)
    if not found:
        logger.warning("no equilibrium found from %d starts", multistart)
    return FixedPointResult(found, residuals, diags)


def pontryagin_solve(model: ModelSpec, t0: float, p0, z_guess=None, n_steps: int = 300, damping: float = 0.5,
                     tol: float = 1e-8, max_iter: int = 500, residual_tol: float = 1e-6) -> Trajectory:
    """Chart forward-backward system solved by damped forward/backward sweeps.

    The initial sweep uses the constant chart adjoint ``z_guess``; each sweep
    integrates the adjoint backward against the current flow and the flow
    forward under the resulting feedback.  Stalled sweeps fall back to shooting.
    The result carries ``x`` (chart flow) and ``z = u^i - u^d`` (chart adjoint).
    """
    p0 = np.asarray(p0, dtype=float)
    times = uniform_times(t0, model.T, n_steps + 1)
    d = model.d
    z_guess = np.zeros(d - 1) if z_guess is None else np.asarray(z_guess, dtype=float)
    u_const = np.append(z_guess, 0.0)
    alpha = np.broadcast_to(_full_rates(optimal_rates(u_const, model.M)), (times.size, d, d)).copy()
    start = solve_fp(alpha, p0, times)
    eq, res, diag = _find_equilibrium(model, p0, start, damping, tol, max_iter, residual_tol, True)
    if eq is None:
        raise RuntimeError(f"forward-backward sweeps diverged (residual {res:.3g})")
    eq.meta.update(residual=res, method=diag["method"])
    return eq


# ---------------------------------------------------------------------------
# Value function on the lattice
# ---------------------------------------------------------------------------


def cfl_limit_inviscid(model: ModelSpec, grid: SimplexGrid) -> float:
    return grid.h / (2.0 * model.d * model.M)


def cfl_limit_viscous(model: ModelSpec, cfg: NoiseConfig, grid: SimplexGrid) -> float:
    """Largest step allowed by the parabolic and transport restrictions and by scheme monotonicity."""
    d, h, eps = model.d, grid.h, cfg.eps
    kap = cfg.kappa_eps if cfg.active else 0.0
    k0 = cfg.kappa0 if cfg.active else 0.0
    rate = model.M + max(kap, k0)
    limits = [h / (d * rate + eps**2)]
    if eps > 0:
        limits.append(h * h / (eps**2 * d))
    limits.append(1.0 / ((d - 1) * rate / h + 0.5 * eps**2 / h**2))
    return min(limits)


def _step_plan(T: float, dt: float, max_slices: int) -> tuple[int, int, float]:
    nsteps = int(np.ceil(T / dt - 1e-9))
    save_every = max(1, int(np.ceil(nsteps / (max_slices - 1))))
    nsteps = save_every * int(np.ceil(nsteps / save_every))
    return nsteps, save_every, T / nsteps


def solve_value_pde(model: ModelSpec, grid: SimplexGrid, cfg: NoiseConfig, dt: float, max_slices: int = 101,
                    terminal: np.ndarray | None = None) -> GridField:
    """Shared explicit backward scheme for the value function (with or without noise)."""
    if grid.d != model.d:
        raise ValueError("grid and model dimensions differ")
    if terminal is None:
        if not model.has_potential:
            raise ValueError("the value function needs potentials F and G")
        terminal = model.G(grid.p)
    running = np.ascontiguousarray(model.F(grid.p), dtype=float) if model.F is not None else np.zeros(grid.size)
    phi = np.ascontiguousarray(cfg.phi(grid.p), dtype=float)
    nsteps, save_every, dt = _step_plan(model.T, dt, max_slices)
    out = kernels.hjb_backward(
        np.ascontiguousarray(grid.p), grid.nbr, grid.h, np.ascontiguousarray(terminal, dtype=float), running, phi,
        float(model.M), float(cfg.eps), float(dt), nsteps, save_every,
    )
    values = np.asarray(out)[::-1]
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise FloatingPointError(f"non-finite value at slice {bad[0]}, node {bad[1]} ({grid.p[bad[1]]})")
    times = uniform_times(0.0, model.T, values.shape[0])
    meta = {"dt": dt, "h": grid.h, "eps": cfg.eps, "nsteps": nsteps, "save_every": save_every}
    return GridField(grid, times, values, meta)


def hjb_solve(model: ModelSpec, grid: SimplexGrid, dt: float | None = None, max_slices: int = 101,
              terminal: np.ndarray | None = None) -> GridField:
    """Value function of the control problem without noise.

    Explicit monotone scheme: each step adds ``dt`` times the optimised
    Hamiltonian evaluated with one-sided lattice differences along every mass
    transfer ``i -> j`` (the optimal feedback ``a*`` of the difference is found
    in closed form), which is the direction-split semi-Lagrangian update whose
    feet are neighbouring nodes.  Requires ``dt <= h / (2 d M)``.
    """
    limit = cfl_limit_inviscid(model, grid)
    if dt is None:
        dt = limit
    if dt > limit * (1 + 1e-12):
        raise ValueError(f"CFL violation: dt={dt:.3g} exceeds h/(2dM)={limit:.3g}")
    return solve_value_pde(model, grid, NoiseConfig.inviscid(), dt, max_slices, terminal)


def gradient_field(value: GridField, steps: int = 1) -> GridField:
    """Intrinsic lattice gradient of a scalar field, one vector per node and time."""
    V = lattice_intrinsic_gradient(value.grid, value.scalar, steps)
    return GridField(value.grid, value.times, V, dict(value.meta, kind="intrinsic_gradient"))


# ---------------------------------------------------------------------------
# Feedback rollouts and the control problem
# ---------------------------------------------------------------------------


def _feedback_rates(V: GridField, t: float, P: np.ndarray, M: float) -> np.ndarray:
    vals, _ = interpolate_values(V.grid, V.slice_at(t), P[:, :-1])
    return _full_rates(optimal_rates(vals, M))


def rollout_feedback(model: ModelSpec, V: GridField, t0: float, p0s, n_steps: int = 300) -> Trajectory:
    """RK4 flows of several starting points under the feedback ``a*(V^i - V^j)``.

    Returns a trajectory whose arrays carry an extra path axis after time.
    """
    P = np.atleast_2d(np.asarray(p0s, dtype=float)).copy()
    times = uniform_times(t0, model.T, n_steps + 1)
    out = np.empty((times.size,) + P.shape)
    alphas = np.empty((times.size,) + P.shape + (P.shape[1],))
    out[0] = P
    M = model.M
    for k in range(n_steps):
        t, h = times[k], times[k + 1] - times[k]
        A1 = _feedback_rates(V, t, P, M)
        alphas[k] = A1
        k1 = _fp_rhs(P, A1)
        k2 = _fp_rhs(P + 0.5 * h * k1, _feedback_rates(V, t + 0.5 * h, P + 0.5 * h * k1, M))
        k3 = _fp_rhs(P + 0.5 * h * k2, _feedback_rates(V, t + 0.5 * h, P + 0.5 * h * k2, M))
        k4 = _fp_rhs(P + h * k3, _feedback_rates(V, t + h, P + h * k3, M))
        P = P + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        P = np.maximum(P, 0.0)
        P /= P.sum(axis=1, keepdims=True)
        out[k + 1] = P
    alphas[-1] = _feedback_rates(V, times[-1], P, M)
    return Trajectory(times, out, alphas, dp=_fp_rhs(out, alphas))


@dataclass
class DifferentiabilityResult:
    differentiable: bool
    chart_gradient: np.ndarray
    intrinsic_gradient: np.ndarray
    jump_estimates: np.ndarray
    gaps: np.ndarray


def differentiability_test(value: GridField, t0: float, p0, scales=(1, 2, 4), factor: float = 5.0
                           ) -> DifferentiabilityResult:
    """Compare one-sided slopes at three shrinking scales along every chart axis.

    The gap between right and left difference quotients is fitted linearly in
    the scale; the intercept estimates the slope jump.  The point is declared
    differentiable when every intercept is at most ``factor * h``.
    """
    grid = value.grid
    h = grid.h
    x0 = np.asarray(p0, dtype=float)[:-1]
    slice_vals = value.slice_at(t0)[:, 0]
    n = grid.n
    gaps = np.empty((n, len(scales)))
    grad = np.empty(n)
    jumps = np.empty(n)
    for k in range(n):
        e = np.zeros(n)
        e[k] = 1.0
        pts = [x0]
        for s in scales:
            pts += [x0 + s * h * e, x0 - s * h * e]
        vals, _ = interpolate_values(grid, slice_vals, np.array(pts))
        v0 = vals[0, 0]
        for c, s in enumerate(scales):
            right = (vals[1 + 2 * c, 0] - v0) / (s * h)
            left = (v0 - vals[2 + 2 * c, 0]) / (s * h)
            gaps[k, c] = right - left
        grad[k] = (vals[1, 0] - vals[2, 0]) / (2 * h)
        design = np.vstack([np.ones(len(scales)), np.asarray(scales, dtype=float)]).T
        coef, *_ = np.linalg.lstsq(design, gaps[k], rcond=None)
        jumps[k] = coef[0]
    ok = bool(np.all(np.abs(jumps) <= factor * h))
    s = grad.sum()
    intrinsic = np.append(grad - s / grid.d, -s / grid.d)
    return DifferentiabilityResult(ok, grad, intrinsic, jumps, gaps)


def semiconcavity_estimate(value: GridField, t: float | None = None) -> float:
    """Largest second difference quotient over lattice directions at one time (default: the first)."""
    grid = value.grid
    vals = value.slice_at(value.times[0] if t is None else t)[:, 0]
    worst = -np.inf
    for a in range(grid.d):
        for b in range(a + 1, grid.d):
            fwd, bwd = grid.nbr[:, b, a], grid.nbr[:, a, b]
            ok = (fwd >= 0) & (bwd >= 0)
            if not np.any(ok):
                continue
            sd = second_transition_difference(grid, vals, a, b)[ok]
            norm2 = 1.0 if b == grid.d - 1 else 2.0
            worst = max(worst, float(np.max(sd)) / norm2)
    return worst


def _project_step(model, A, grad, step):
    return np.clip(A - step * grad, 0.0, model.M)


def projected_gradient(model: ModelSpec, p0, times: np.ndarray, alpha0: np.ndarray, max_iter: int = 100,
                       tol: float = 1e-10) -> tuple[np.ndarray, float]:
    """Projected gradient descent of the planner cost over piecewise-constant controls.

    The gradient uses the continuous adjoint ``lambda`` of the flow (terminal
    value ``g(q_T)``) and an Armijo backtracking line search on the exact
    discrete cost.
    """
    d = model.d
    eye = np.eye(d, dtype=bool)
    A = np.where(eye, 0.0, 0.5 * (alpha0[:-1] + alpha0[1:]))
    A = np.clip(A, 0.0, model.M)
    dt = np.diff(times)

    def evaluate(Ak):
        nodes = np.concatenate([Ak, Ak[-1:]], axis=0)
        cost, q = cost_calJ(model, nodes, p0, times, alpha_mid=Ak)
        return cost, q

    cost, q = evaluate(A)
    step = 1.0
    for _ in range(max_iter):
        lam = np.empty_like(q.p)
        lam[-1] = model.g(q.p[-1])
        for k in range(times.size - 2, -1, -1):
            Ak = A[k]
            qm = 0.5 * (q.p[k] + q.p[k + 1])
            rhs = 0.5 * np.sum(Ak * Ak, axis=1) + model.f(qm) + np.sum(Ak * (lam[k + 1][None, :] - lam[k + 1][:, None]), axis=1)
            lam[k] = lam[k + 1] + dt[k] * rhs
        lam_mid = 0.5 * (lam[:-1] + lam[1:])
        q_mid = 0.5 * (q.p[:-1] + q.p[1:])
        grad = q_mid[:, :, None] * (A + lam_mid[:, None, :] - lam_mid[:, :, None]) * dt[:, None, None]
        grad = np.where(eye, 0.0, grad)
        improved = False
        while step > 1e-8:
            A_new = np.where(eye, 0.0, _project_step(model, A, grad / dt[:, None, None], step))
            c_new, q_new = evaluate(A_new)
            decrease = float(np.sum(grad * (A - A_new) / 1.0))
            if c_new <= cost - 1e-4 * decrease and c_new < cost:
                improved = True
                break
            step *= 0.5
        if not improved or cost - c_new < tol:
            if improved:
                A, cost, q = A_new, c_new, q_new
            break
        A, cost, q = A_new, c_new, q_new
        step = min(step * 2.0, 1.0)
    nodes = np.concatenate([A, A[-1:]], axis=0)
    return _full_rates(nodes), cost


@dataclass
class MFCPResult:
    """Outcome of the control problem from one starting point."""

    trajectory: Trajectory
    cost: float
    minimizers: list
    minimizer_costs: list
    candidates: list
    differentiable: bool
    value_at_start: float
    rollout_cost: float
    consistency_constant: float


def _perturbed_starts(grid: SimplexGrid, p0) -> list[np.ndarray]:
    starts = []
    for k in range(grid.n):
        for sign in (1.0, -1.0):
            p = np.array(p0, dtype=float)
            p[k] += sign * grid.h
            p[-1] -= sign * grid.h
            if np.all(p > 0):
                starts.append(p)
    return starts


def mfcp_minimize(model: ModelSpec, t0: float, p0, value: GridField, n_steps: int = 300,
                  refine: bool = True, dedup_tol: float = 1e-4, tie_tol: float = 1e-3) -> MFCPResult:
    """Minimise the planner cost from ``(t0, p0)`` using the value field.

    The flow is rolled out under the feedback synthesised from the lattice
    gradient of the value, then polished into an exact equilibrium by damped
    forward/backward iteration; a projected-gradient refinement of the
    rollout control provides a second candidate.  The cheapest candidate is
    returned.  When the value is not differentiable at the start, rollouts
    from the ``h``-perturbed starts provide one branch each and every
    distinct polished branch whose cost is within ``tie_tol`` of the best is
    reported as a minimiser.
    """
    p0 = np.asarray(p0, dtype=float)
    if np.any(p0 <= 0):
        raise ValueError("the start must be interior")
    grid = value.grid
    V = gradient_field(value)
    test = differentiability_test(value, t0, p0)
    starts = [p0] if test.differentiable else _perturbed_starts(grid, p0)
    roll = rollout_feedback(model, V, t0, np.array(starts), n_steps)
    times = roll.times
    value_at_start = float(interpolate_values(grid, value.slice_at(t0)[:, 0], p0[:-1])[0][0, 0])
    candidates = []
    rollout_cost = np.nan
    for b, start in enumerate(starts):
        P = roll.p[:, b]
        A = roll.alpha[:, b]
        branch = Trajectory(times, P, A, dp=roll.dp[:, b], meta={"branch": b})
        if test.differentiable:
            rollout_cost, flow = cost_calJ(model, A, p0, times)
            flow.meta.update(label="rollout")
            candidates.append(("rollout", flow, rollout_cost))
        eq, res, diag = _find_equilibrium(model, p0, branch, 0.5, 1e-10, 500, 1e-6, True)
        if eq is not None:
            c, _ = cost_calJ(model, eq.alpha, p0, times, eq.alpha_mid)
            eq.meta.update(label=f"polish_{b}", residual=res)
            candidates.append((f"polish_{b}", eq, c))
        if refine:
            A_opt, _ = projected_gradient(model, p0, times, A)
            guess = solve_fp(A_opt, p0, times)
            eq2, res2, _ = _find_equilibrium(model, p0, guess, 0.5, 1e-10, 500, 1e-6, True)
            if eq2 is not None:
                c2, _ = cost_calJ(model, eq2.alpha, p0, times, eq2.alpha_mid)
                eq2.meta.update(label=f"gradient_{b}", residual=res2)
                candidates.append((f"gradient_{b}", eq2, c2))
    if not candidates:
        raise RuntimeError("no candidate minimiser could be computed")
    best = min(candidates, key=lambda c: c[2])
    minimizers, costs = [], []
    for label, traj, c in sorted(candidates, key=lambda c: c[2]):
        if c > best[2] + tie_tol or label == "rollout":
            continue
        if all(np.max(np.abs(traj.p - other.p)) >= dedup_tol for other in minimizers):
            minimizers.append(traj)
            costs.append(c)
    if not minimizers:
        minimizers, costs = [best[1]], [best[2]]
    meta_dt = value.meta.get("dt", 0.0)
    if np.isnan(rollout_cost):
        rollout_cost = best[2]
    const = (rollout_cost - value_at_start) / (grid.h + meta_dt)
    return MFCPResult(best[1], best[2], minimizers, costs, candidates, test.differentiable, value_at_start,
                      float(rollout_cost), float(const))
