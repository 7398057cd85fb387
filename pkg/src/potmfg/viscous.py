"""Noisy layer: Kimura-type value function, its gradient, the population-cost
field, the correction cost, the reconstructed per-state values, and Monte
Carlo simulation of the Wright-Fisher dynamics.
"""

from __future__ import annotations

import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .inviscid import _step_plan, cfl_limit_viscous, gradient_field, solve_value_pde
from .model import ModelSpec, NoiseConfig, a_star, htilde_all
from .simplex import (
    GridField,
    SimplexGrid,
    kimura_term,
    lattice_intrinsic_gradient,
    schwarz_residual,
    uniform_times,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# PDE layer
# ---------------------------------------------------------------------------


def hjb_solve_viscous(model: ModelSpec, cfg: NoiseConfig, grid: SimplexGrid, dt: float | None = None,
                      max_slices: int = 101, terminal: np.ndarray | None = None) -> GridField:
    """Value function of the noisy control problem on the lattice.

    Explicit scheme in reversed time: the Kimura operator is written as a sum
    over state pairs of ``(eps^2/2) p_a p_b`` times the lattice second difference
    along ``e_a - e_b`` (weights vanish on the faces where a state is empty, so
    exterior nodes are never read); first-order terms are upwinded along each
    mass transfer with the optimal rate ``a*`` plus the repulsion ``phi``.
    """
    limit = cfl_limit_viscous(model, cfg, grid)
    if dt is None:
        dt = 0.95 * limit
    if dt > limit * (1 + 1e-12):
        raise ValueError(f"CFL violation: dt={dt:.3g} exceeds {limit:.3g}")
    return solve_value_pde(model, grid, cfg, dt, max_slices, terminal)


def extract_V(calV: GridField, steps: int = 1) -> GridField:
    """Intrinsic lattice gradient of the value field with the discrete symmetry residual in ``meta``."""
    V = gradient_field(calV, steps)
    chart = V.values[..., :-1] - V.values[..., -1:]
    V.meta["schwarz_residual"] = schwarz_residual(calV.grid, chart)
    return V


def _reverse_slices(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr[::-1])


def y_coefficients(V: GridField, model: ModelSpec, cfg: NoiseConfig) -> tuple[np.ndarray, np.ndarray]:
    """Transfer rates ``phi(p_k) + a*(V^j - V^k)`` and the source of the population-cost equation.

    Source: ``1/2 sum p_j a*(V^j - V^k)^2 + sum p_j p_k phi'(p_j)(V^j - V^k) + <p, f(p)>``.
    """
    grid = V.grid
    p = grid.p
    d = grid.d
    Vv = V.values
    diff = Vv[..., :, None] - Vv[..., None, :]  # [j, k] = V^j - V^k
    a = a_star(diff, model.M)
    off = ~np.eye(d, dtype=bool)
    rates = (cfg.phi(p)[None, :, None, :] + a) * off
    dphi = cfg.dphi(p)
    src = 0.5 * np.sum(p[None, :, :, None] * a * a * off, axis=(-2, -1))
    src = src + np.sum(p[None, :, :, None] * p[None, :, None, :] * dphi[None, :, :, None] * diff, axis=(-2, -1))
    src = src + np.sum(p * model.f(p), axis=-1)[None, :]
    return rates, src


def solve_Y(V: GridField, model: ModelSpec, cfg: NoiseConfig, grid: SimplexGrid | None = None,
            dt: float | None = None) -> GridField:
    """Population-cost field: linear backward Kimura equation with the equilibrium transfer rates.

    The transport term moves mass from ``j`` to ``k`` at rate
    ``phi(p_k) + a*(V^j - V^k)`` and is upwinded along that transfer; the
    terminal value is ``<p, g(p)>``.  Coefficients are taken at the time
    slices of ``V`` and interpolated linearly in between.
    """
    grid = V.grid if grid is None else grid
    limit = cfl_limit_viscous(model, cfg, grid)
    slice_dt = V.times[1] - V.times[0]
    if dt is None:
        dt = 0.95 * limit
    if dt > limit * (1 + 1e-12):
        raise ValueError(f"CFL violation: dt={dt:.3g} exceeds {limit:.3g}")
    save_every = max(1, int(np.ceil(slice_dt / dt - 1e-9)))
    dt = slice_dt / save_every
    nsteps = save_every * (V.times.size - 1)
    rates, src = y_coefficients(V, model, cfg)
    terminal = np.sum(grid.p * model.g(grid.p), axis=-1)
    out = kernels.linear_backward(
        np.ascontiguousarray(grid.p), grid.nbr, grid.h, np.ascontiguousarray(terminal),
        _reverse_slices(rates), _reverse_slices(src), float(cfg.eps), float(dt), nsteps, save_every,
    )
    values = np.asarray(out)[::-1]
    return GridField(grid, V.times, values, {"dt": dt, "kind": "population_cost"})


@dataclass
class ThetaFields:
    """Correction cost and the intermediate noise-sensitivity fields."""

    theta: GridField
    W: np.ndarray  # (times, nodes, i, j, k)
    Upsilon: np.ndarray  # (times, nodes, i, j)


def compute_theta(V: GridField, Y: GridField, cfg: NoiseConfig, grid: SimplexGrid | None = None,
                  nested_steps: int = 2) -> ThetaFields:
    """Correction cost ``theta^i`` of the modified player cost.

    ``theta^i = sum_j p_j phi'(p_i)(V^i - V^j) + (eps^2/2) sum_j p_j (d_j V^j - d_i V^i)
    + eps^2 sum_j p_j (d_j Y - d_i Y - (V^j - V^i)) + eps^2 sum_jk p_j p_k (d_i V^k - d_j V^k)``.
    Derivatives of ``V`` use lattice differences of ``nested_steps`` units.
    """
    grid = V.grid if grid is None else grid
    p = grid.p
    eps2 = cfg.eps**2
    Vv = V.values  # (nt, nn, d)
    DV = lattice_intrinsic_gradient(grid, np.moveaxis(Vv, -1, 0), nested_steps)  # (d_i, nt, nn, d_j): d_j V^i
    DV = np.moveaxis(DV, 0, -2)  # (nt, nn, i, j) = d_j V^i
    DY = lattice_intrinsic_gradient(grid, Y.scalar, 1)  # (nt, nn, d)
    dphi = cfg.dphi(p)
    diag = np.diagonal(DV, axis1=-2, axis2=-1)  # d_i V^i
    t1 = dphi * np.sum(p[:, None, :] * (Vv[..., :, None] - Vv[..., None, :]), axis=-1)
    t2 = 0.5 * eps2 * (np.sum(p * diag, axis=-1, keepdims=True) - diag)
    t3 = eps2 * (
        np.sum(p * DY, axis=-1, keepdims=True) - DY - (np.sum(p * Vv, axis=-1, keepdims=True) - Vv)
    )
    # sum_{j,k} p_j p_k (d_i V^k - d_j V^k) = sum_k p_k d_i V^k - sum_{j,k} p_j p_k d_j V^k
    a_i = np.einsum("nk,tnki->tni", p, DV)
    b = np.einsum("nj,nk,tnkj->tn", p, p, DV)
    t4 = eps2 * (a_i - b[..., None])
    theta = t1 + t2 + t3 + t4
    s = np.sqrt(p)
    W = (cfg.eps / np.sqrt(2.0)) * s[None, :, None, :, None] * s[None, :, None, None, :] * (
        DV[..., :, :, None] - DV[..., :, None, :]
    )
    Ups = (cfg.eps / np.sqrt(2.0)) * s[None, :, :, None] * s[None, :, None, :] * (
        DY[..., :, None] - DY[..., None, :] - (Vv[..., :, None] - Vv[..., None, :])
    )
    return ThetaFields(GridField(grid, V.times, theta, {"kind": "correction_cost"}), W, Ups)


def reconstruct_U(V: GridField, Y: GridField) -> GridField:
    """Per-state values ``U^i = V^i - <p, V> + Y``."""
    p = V.grid.p
    U = V.values - np.sum(p * V.values, axis=-1, keepdims=True) + Y.values
    return GridField(V.grid, V.times, U, dict(V.meta, kind="per_state_value"))


def master_residual(U: GridField, model: ModelSpec, cfg: NoiseConfig, theta: GridField | None,
                    margin: float = 0.1, time_window: tuple[int, int] | None = None) -> dict:
    """Discrete residual of the master equation at interior nodes.

    Time derivatives are centred differences between stored slices, spatial
    derivatives lattice differences; the Kimura term is the pair-sum form.
    Only nodes with every ``p_i >= margin`` are audited.
    """
    grid = U.grid
    p = grid.p
    d = grid.d
    M = model.M
    eps2 = cfg.eps**2
    nt = U.times.size
    s0, s1 = (1, nt - 1) if time_window is None else time_window
    dts = U.times[1] - U.times[0]
    Uv = U.values
    ph = cfg.phi(p)
    fcost = model.f(p)
    inside = np.all(p >= margin - 1e-12, axis=1)
    worst, where = 0.0, (float("nan"), None)
    for s in range(s0, s1):
        u = Uv[s]
        dudt = (Uv[s + 1] - Uv[s - 1]) / (2 * dts)
        DU = np.moveaxis(lattice_intrinsic_gradient(grid, u.T, 1), 0, 1)  # (nn, i, j) = d_j U^i
        kim = np.stack([kimura_term(grid, u[:, i], cfg.eps) for i in range(d)], axis=1)
        diff = u[:, :, None] - u[:, None, :]  # [k, j] = U^k - U^j
        rates = (ph[:, None, :] + a_star(diff, M)) * (~np.eye(d, dtype=bool))  # [k, j]: k -> j
        transport = np.einsum("nk,nkj,nij->ni", p, rates, DU) - np.einsum("nk,nkj,nik->ni", p, rates, DU)
        ham = htilde_all(u, M) + np.sum(ph[:, None, :] * (u[:, None, :] - u[:, :, None]), axis=-1)
        diag = np.diagonal(DU, axis1=-2, axis2=-1)
        noise_drift = eps2 * (diag - np.einsum("nj,nij->ni", p, DU))
        th = 0.0 if theta is None else theta.values[s]
        res = dudt + ham + fcost + th + transport + noise_drift + kim
        local = np.where(inside[:, None], np.abs(res), 0.0)
        if local.max() > worst:
            worst = float(local.max())
            node = int(np.argmax(local.max(axis=1)))
            where = (float(U.times[s]), grid.p[node].tolist())
    dt_scheme = float(U.meta.get("dt", dts))
    return {"residual": worst, "constant": worst / (grid.h + dt_scheme), "h": grid.h, "dt_slices": dts,
            "dt_scheme": dt_scheme, "nodes": int(inside.sum()), "worst_time": where[0], "worst_point": where[1]}


# ---------------------------------------------------------------------------
# Monte Carlo layer
# ---------------------------------------------------------------------------


@dataclass
class Ensemble:
    """Saved states of a Monte Carlo run together with the path-wise integrals.

    ``acc`` columns: running planner cost, running player cost, correction
    cost, occupation integral of ``1/p`` below ``delta``, clipped ``p`` mass,
    clipped ``q`` mass.  ``status`` bit 1 flags a rejected step, bit 2 a
    ``q``-division guard.
    """

    times: np.ndarray
    p: np.ndarray
    q: np.ndarray | None
    acc: np.ndarray
    status: np.ndarray
    seed: int
    dt: float
    spec: dict = field(default_factory=dict, repr=False)

    @property
    def n_paths(self) -> int:
        return self.p.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return self.status == 0

    def to_csv(self, path) -> None:
        """Write ``path_id,t,p_1..p_d,q_1..q_d`` rows with round-trip precision."""
        B, ns, d = self.p.shape
        q = self.q if self.q is not None else np.full_like(self.p, np.nan)
        ids = np.repeat(np.arange(B), ns)[:, None]
        t = np.tile(self.times, B)[:, None]
        data = np.hstack([ids, t, self.p.reshape(-1, d), q.reshape(-1, d)])
        header = ["path_id", "t"] + [f"p_{i + 1}" for i in range(d)] + [f"q_{i + 1}" for i in range(d)]
        buf = io.StringIO()
        fmt = ["%d", "%.17g"] + ["%.17g"] * (2 * d)
        np.savetxt(buf, data, delimiter=",", fmt=fmt, header=",".join(header), comments="")
        Path(path).write_text(buf.getvalue())


def _path_noise(seed: int, path_id: int, nsteps: int, npairs: int) -> np.ndarray:
    """Standard normals of one path from a counter-based stream keyed by ``(seed, path index)``."""
    gen = np.random.Generator(np.random.Philox(key=np.array([seed, path_id], dtype=np.uint64)))
    return gen.standard_normal((nsteps, npairs))


def aux_channels(model: ModelSpec, grid: SimplexGrid, theta: GridField | None = None) -> tuple[np.ndarray, float, float]:
    """Lattice tables ``[F, f_1..f_d, theta_1..theta_d]`` sampled by the simulator."""
    p = grid.p
    Fv = model.F(p) if model.F is not None else np.zeros(grid.size)
    base = np.concatenate([Fv[:, None], model.f(p)], axis=1)
    if theta is None:
        return np.ascontiguousarray(base[None]), 0.0, 1.0
    nt = theta.times.size
    tab = np.concatenate([np.broadcast_to(base, (nt,) + base.shape), theta.values], axis=2)
    return np.ascontiguousarray(tab), float(theta.times[0]), float(theta.times[1] - theta.times[0])


def simulate(model: ModelSpec, cfg: NoiseConfig, p0, dt: float, n_paths: int, seed: int, *,
             feedback: GridField | None = None, alpha_path: tuple | None = None, q0=None,
             grid: SimplexGrid | None = None, theta: GridField | None = None, t0: float = 0.0,
             save_every: int | None = None, workers: int = 1, chunk: int = 64) -> Ensemble:
    """Euler-Maruyama for the Wright-Fisher flow (and optionally a player's flow) under common noise.

    Controls come either from ``feedback`` (an intrinsic-gradient field ``V``;
    rates ``a*(V^i - V^j)``) or from ``alpha_path = (times, rates)``, a
    piecewise-constant open-loop path.  Pair ``a < b`` receives
    ``eps sqrt(p_a p_b) dW`` (added to ``a``, subtracted from ``b``); the
    player's flow uses the same increments scaled by ``q/p``.  After each step
    negatives are clipped and both flows are divided by the clipped mass of
    ``p``.  Paths are sharded across ``workers`` threads; each path draws its
    normals from its own counter-based stream, so results do not depend on
    the worker count.
    """
    p0 = np.asarray(p0, dtype=float)
    d = model.d
    if p0.shape != (d,) or np.any(p0 <= 0) or abs(p0.sum() - 1) > 1e-12:
        raise ValueError("p0 must be an interior probability vector")
    if cfg.eps > 0 and cfg.active and cfg.kappa0 < 0.5 * cfg.eps**2:
        logger.warning("kappa0=%.3g below eps^2/2=%.3g: boundary hits may occur", cfg.kappa0, 0.5 * cfg.eps**2)
    if (feedback is None) == (alpha_path is None):
        raise ValueError("give exactly one of feedback or alpha_path")
    grid = grid or (feedback.grid if feedback is not None else (theta.grid if theta is not None else SimplexGrid(d, 0.5)))
    horizon = model.T - t0
    nsteps = int(np.ceil(horizon / dt - 1e-9))
    dt = horizon / nsteps
    if save_every is None:
        save_every = max(1, nsteps // 100)
    nsteps = save_every * int(np.ceil(nsteps / save_every))
    dt = horizon / nsteps
    nsave = nsteps // save_every + 1
    with_q = q0 is not None
    q0v = np.asarray(q0 if with_q else p0, dtype=float)
    if feedback is not None:
        mode = 0
        vfield = np.ascontiguousarray(feedback.values)
        vt0 = float(feedback.times[0])
        vdt = float(feedback.times[1] - feedback.times[0]) if feedback.times.size > 1 else 1.0
        alpha_sl = np.zeros((1, d, d))
        alt0, aldt = 0.0, 1.0
    else:
        mode = 1
        a_times, a_rates = alpha_path
        a_times = np.asarray(a_times, dtype=float)
        alpha_sl = np.ascontiguousarray(np.where(np.eye(d, dtype=bool), 0.0, np.asarray(a_rates, dtype=float)))
        alt0 = float(a_times[0])
        aldt = float(a_times[1] - a_times[0]) if a_times.size > 1 else 1.0
        vfield = np.zeros((1, grid.size, d))
        vt0, vdt = 0.0, 1.0
    aux, at0, adt = aux_channels(model, grid, theta)
    aux_theta = 1 if theta is not None else 0
    npairs = d * (d - 1) // 2
    P = np.zeros((n_paths, nsave, d))
    Q = np.zeros((n_paths, nsave, d))
    acc = np.zeros((n_paths, 6))
    status = np.zeros(n_paths, dtype=np.int64)
    inv_delta = cfg.delta if cfg.active else 0.0

    def run(lo: int, hi: int) -> None:
        B = hi - lo
        noise = np.stack([_path_noise(seed, i, nsteps, npairs) for i in range(lo, hi)])
        p_out = np.zeros((B, nsave, d))
        q_out = np.zeros((B, nsave, d))
        acc_c = np.zeros((B, 6))
        st = np.zeros(B, dtype=np.int64)
        kernels.simulate_chunk(
            np.ascontiguousarray(np.tile(p0, (B, 1))), np.ascontiguousarray(np.tile(q0v, (B, 1))), with_q, noise,
            float(t0), float(dt), nsteps, save_every, float(cfg.eps), float(model.M), float(cfg.theta),
            float(cfg.delta), float(cfg.kappa_eps if cfg.active else 0.0), float(cfg.kappa0 if cfg.active else 0.0),
            mode, vfield, vt0, vdt, alpha_sl, alt0, aldt, aux, at0, adt, aux_theta, grid.lookup, grid.N, grid.n,
            float(inv_delta), p_out, q_out, acc_c, st,
        )
        P[lo:hi], Q[lo:hi], acc[lo:hi], status[lo:hi] = p_out, q_out, acc_c, st

    bounds = [(lo, min(lo + chunk, n_paths)) for lo in range(0, n_paths, chunk)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda b: run(*b), bounds))
    else:
        for b in bounds:
            run(*b)
    times = t0 + dt * save_every * np.arange(nsave)
    rejected = int(np.sum(status & 1 > 0))
    if rejected:
        logger.warning("%d path(s) rejected a step with |dp| > 0.5", rejected)
    spec = dict(model=model, cfg=cfg, p0=p0, dt=dt, n_paths=n_paths, seed=seed, feedback=feedback,
                alpha_path=alpha_path, grid=grid, theta=theta, t0=t0, save_every=save_every, workers=workers,
                chunk=chunk, nsteps=nsteps)
    return Ensemble(times, P, Q if with_q else None, acc, status, seed, dt, spec)


def simulate_p(model: ModelSpec, cfg: NoiseConfig, p0, dt: float, n_paths: int, seed: int, **kw) -> Ensemble:
    """Population flow under common noise (see :func:`simulate`)."""
    kw.pop("q0", None)
    return simulate(model, cfg, p0, dt, n_paths, seed, **kw)


def simulate_q(p_ensemble: Ensemble, q0, theta: GridField | None = None) -> Ensemble:
    """Player flow driven by the same noise, controls and environment as ``p_ensemble``.

    The population flow is regenerated from the same counter-based streams,
    so it is identical to ``p_ensemble.p``.  Paths where the population
    empties a state that the player still occupies are flagged (status bit 2)
    and excluded from the estimators.
    """
    spec = dict(p_ensemble.spec)
    model, cfg, p0 = spec.pop("model"), spec.pop("cfg"), spec.pop("p0")
    dt, n_paths, seed = spec.pop("dt"), spec.pop("n_paths"), spec.pop("seed")
    spec.pop("nsteps")
    if theta is not None:
        spec["theta"] = theta
    return simulate(model, cfg, p0, dt, n_paths, seed, q0=np.asarray(q0, dtype=float), **spec)


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return float("nan"), float("nan")
    se = float(np.std(x, ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0
    return float(np.mean(x)), se


@dataclass
class CostEstimate:
    planner: tuple[float, float]
    player: tuple[float, float] | None
    xi: tuple[float, float] | None
    excluded: int


def cost_mc(ens: Ensemble, model: ModelSpec) -> CostEstimate:
    """Monte Carlo means and standard errors of the planner cost, the player cost and the correction term."""
    ok = ens.valid
    pT = ens.p[ok, -1]
    planner = ens.acc[ok, 0] + (model.G(pT) if model.G is not None else 0.0)
    player = xi = None
    if ens.q is not None:
        qT = ens.q[ok, -1]
        player = _mean_se(ens.acc[ok, 1] + np.sum(qT * model.g(pT), axis=1))
        if ens.spec.get("theta") is not None:
            xi = _mean_se(np.abs(ens.acc[ok, 2]))
    return CostEstimate(_mean_se(planner), player, xi, int((~ok).sum()))


def moment_diagnostics(ens: Ensemble, lam: float = 1.0, ell: int = 1, cap: float = 700.0) -> dict:
    """Empirical exponential, inverse and player-mass moments with their stability indicators.

    The exponential moment of ``lam * int 1{p <= delta}/p dt`` is capped at
    ``exp(cap)``; the share of capped paths is reported.  A path that reached
    the boundary makes the inverse moment infinite.
    """
    ok = ens.valid
    expo = lam * ens.acc[ok, 3]
    capped = expo > cap
    exp_moment = float(np.mean(np.exp(np.minimum(expo, cap))))
    with np.errstate(over="ignore", divide="ignore"):
        inv = np.sum(np.maximum(ens.p[ok], 0.0) ** (-float(ell)), axis=2)
    inv_moment = float(np.max(np.mean(inv, axis=0)))
    q_moment = float("nan")
    if ens.q is not None:
        q_moment = float(np.mean(np.max(np.sum(ens.q[ok] ** ell, axis=2), axis=1)))
    return {
        "exp_moment": exp_moment,
        "inv_moment_l": inv_moment,
        "q_moment_l": q_moment,
        "cap_hit_rate": float(np.mean(capped)) if capped.size else 0.0,
        "clip_mass": float(np.sum(ens.acc[:, 4])),
        "ell": ell,
        "lambda": lam,
        "n_paths": int(ok.sum()),
    }


def boundary_hit_rate(ens: Ensemble) -> float:
    """Share of paths that needed clipping or had a rejected step."""
    return float(np.mean((ens.acc[:, 4] > 0) | (ens.status != 0)))


def feedback_rollout_mc(model, cfg, V, p0, dt, n_paths, seed, **kw):
    """Convenience wrapper: equilibrium ensemble under the feedback of ``V``."""
    return simulate(model, cfg, p0, dt, n_paths, seed, feedback=V, **kw)
