"""Two-state conservation-law benchmark and weak-solution certification.

For two states the per-state values reduce to one scalar ``Z = U^2 - U^1``
as a function of the mean parameter ``m = p_1 - p_2``.  It solves, in
reversed time ``tau = T - t``, the balance law

    dZ/dtau + d/dm Phi(m, Z) = f^2 - f^1,
    Phi(m, Z) = sign(Z) m A(|Z|) - A(|Z|),

where ``A(r) = r^2/2`` for ``r <= M`` and ``M r - M^2/2`` beyond (the
control cap), so that ``Phi = m Z|Z|/2 - Z^2/2`` whenever ``|Z| <= M``.
Characteristics travel with ``dm/dt = Z - m|Z|`` (capped), which is also the
equilibrium flow of the population.

The certification part works on chart-gradient fields ``Z_i = d V / d x_i``
of a value function ``V`` on any simplex: weak residual of the
differentiated HJB equation, weak curl, one-sided (Oleinik) slope bound and
agreement with the terminal data.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .inviscid import Trajectory
from .model import ModelSpec
from .simplex import GridField, SimplexGrid, chart_gradient, uniform_times

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# The two-state balance law
# ---------------------------------------------------------------------------


def _capped_area(r: np.ndarray, M: float) -> np.ndarray:
    """``int_0^r a*(s) ds`` for ``r >= 0``."""
    return np.where(r <= M, 0.5 * r * r, M * r - 0.5 * M * M)


def _point(m):
    m = np.asarray(m, dtype=float)
    return np.stack([(1.0 + m) / 2.0, (1.0 - m) / 2.0], axis=-1)


@dataclass
class ConsLaw2:
    """Flux, source and terminal data of the two-state balance law."""

    T: float
    M: float
    source_fn: object
    terminal_fn: object
    name: str = "conslaw"

    def flux(self, m, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        A = _capped_area(np.abs(Z), self.M)
        return np.sign(Z) * np.asarray(m) * A - A

    def flux_dZ(self, m, Z) -> np.ndarray:
        """Derivative of the flux in ``Z``: ``(m - sign(Z)) a*(|Z|)``."""
        Z = np.asarray(Z, dtype=float)
        a = np.clip(np.abs(Z), 0.0, self.M)
        return (np.asarray(m) - np.sign(Z)) * a

    def flux_dZZ(self, m, Z) -> np.ndarray:
        """Second derivative in ``Z`` away from ``Z = 0`` and the cap: ``m sign(Z) - 1``."""
        Z = np.asarray(Z, dtype=float)
        inside = np.abs(Z) < self.M
        return np.where(inside, np.asarray(m) * np.sign(Z) - 1.0, 0.0)

    def drift(self, m, Z) -> np.ndarray:
        """Population drift ``dm/dt`` under the equilibrium rates."""
        return -self.flux_dZ(m, Z)

    def source(self, m) -> np.ndarray:
        return np.asarray(self.source_fn(m), dtype=float)

    def terminal(self, m) -> np.ndarray:
        return np.asarray(self.terminal_fn(m), dtype=float)

    def data_bound(self, samples: int = 2001) -> float:
        """``T sup|source| + sup|terminal|``, the maximum-principle bound of the scheme."""
        m = np.linspace(-1.0, 1.0, samples)
        return float(self.T * np.max(np.abs(self.source(m))) + np.max(np.abs(self.terminal(m))))


def reduce_d2(model: ModelSpec) -> ConsLaw2:
    """Balance law for ``Z = U^2 - U^1`` of a two-state model."""
    if model.d != 2:
        raise ValueError(f"the reduction needs two states, got d={model.d}")

    def source(m):
        fc = model.f(_point(m))
        return fc[..., 1] - fc[..., 0]

    def terminal(m):
        gc = model.g(_point(m))
        return gc[..., 1] - gc[..., 0]

    return ConsLaw2(model.T, model.M, source, terminal, name=model.name)


@dataclass
class LineField:
    """Field on ``[0, T] x [-1, 1]`` sampled at uniform times and mesh points ``m``."""

    times: np.ndarray
    m: np.ndarray
    values: np.ndarray  # (times, points)
    meta: dict = field(default_factory=dict)

    @property
    def dm(self) -> float:
        return float(self.m[1] - self.m[0])

    def slice_at(self, t: float) -> np.ndarray:
        if self.times.size == 1:
            return self.values[0].copy()
        pos = (t - self.times[0]) / (self.times[1] - self.times[0])
        pos = min(max(pos, 0.0), self.times.size - 1.0)
        s0 = min(int(np.floor(pos)), self.times.size - 2)
        w = pos - s0
        return (1.0 - w) * self.values[s0] + w * self.values[s0 + 1]

    def __call__(self, t: float, m) -> np.ndarray:
        return np.interp(m, self.m, self.slice_at(t))

    def to_csv(self, path) -> None:
        """Write ``t,m,Z`` rows (time-major) with round-trip precision."""
        T, X = np.meshgrid(self.times, self.m, indexing="ij")
        data = np.stack([T.ravel(), X.ravel(), self.values.ravel()], axis=1)
        buf = io.StringIO()
        np.savetxt(buf, data, delimiter=",", fmt="%.17g", header="t,m,Z", comments="")
        Path(path).write_text(buf.getvalue())

    @classmethod
    def from_csv(cls, path) -> "LineField":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        times = np.unique(data[:, 0])
        m = data[: data.shape[0] // times.size, 1]
        return cls(times, m, data[:, 2].reshape(times.size, m.size))

    def oriented(self) -> "LineField":
        """The field ``-Z = U^1 - U^2``, i.e. twice the ``m``-derivative of the value function."""
        return LineField(self.times, self.m, -self.values, dict(self.meta, orientation="value_gradient"))


def cfl_limit_conslaw(cl: ConsLaw2, dm: float) -> float:
    """Largest reversed-time step with ``dt max|dPhi/dZ| / dm <= 1`` on the data range."""
    bound = min(cl.data_bound(), cl.M)
    speed = 2.0 * bound
    return dm / speed if speed > 0 else math.inf


def _llf_flux(cl: ConsLaw2, mf: np.ndarray, ZL: np.ndarray, ZR: np.ndarray) -> np.ndarray:
    a = np.maximum(np.abs(cl.flux_dZ(mf, ZL)), np.abs(cl.flux_dZ(mf, ZR)))
    return 0.5 * (cl.flux(mf, ZL) + cl.flux(mf, ZR)) - 0.5 * a * (ZR - ZL)


def entropy_solve(cl: ConsLaw2, dm: float, dt: float | None = None, max_slices: int = 101) -> LineField:
    """Finite-volume entropy solution on cells of width ``dm`` covering ``[-1, 1]``.

    Marches in reversed time with the local Lax-Friedrichs numerical flux and
    an explicit source; ghost cells copy the edge cells (outflow).  Before
    every step the characteristic speeds at the two walls are checked and
    any inflow is logged.  Values are returned at cell centres.
    """
    n_cells = int(round(2.0 / dm))
    if n_cells < 2 or abs(n_cells * dm - 2.0) > 1e-9:
        raise ValueError(f"dm={dm} must divide the interval [-1, 1]")
    limit = cfl_limit_conslaw(cl, dm)
    if dt is None:
        dt = 0.9 * limit if math.isfinite(limit) else cl.T
    if dt > limit * (1 + 1e-12):
        raise ValueError(f"CFL violation: dt={dt:.3g} exceeds {limit:.3g}")
    nsteps = int(math.ceil(cl.T / dt - 1e-9))
    save_every = max(1, int(math.ceil(nsteps / (max_slices - 1))))
    nsteps = save_every * int(math.ceil(nsteps / save_every))
    dt = cl.T / nsteps
    centres = -1.0 + (np.arange(n_cells) + 0.5) * dm
    faces = -1.0 + np.arange(n_cells + 1) * dm
    src = cl.source(centres)
    Z = cl.terminal(centres).copy()
    out = [Z.copy()]
    inflow_steps = 0
    for step in range(nsteps):
        padded = np.concatenate([Z[:1], Z, Z[-1:]])
        left_speed = cl.flux_dZ(-1.0, Z[0])
        right_speed = cl.flux_dZ(1.0, Z[-1])
        if left_speed > 1e-12 or right_speed < -1e-12:
            inflow_steps += 1
        F = _llf_flux(cl, faces, padded[:-1], padded[1:])
        Z = Z - dt / dm * (F[1:] - F[:-1]) + dt * src
        if (step + 1) % save_every == 0:
            out.append(Z.copy())
    if inflow_steps:
        logger.warning("characteristics enter the domain at a wall on %d of %d steps", inflow_steps, nsteps)
    else:
        logger.info("wall characteristics point outward or vanish on every step")
    values = np.array(out[::-1])
    times = uniform_times(0.0, cl.T, values.shape[0])
    meta = {"dm": dm, "dt": dt, "nsteps": nsteps, "inflow_steps": inflow_steps, "scheme": "local Lax-Friedrichs"}
    return LineField(times, centres, values, meta)


def value_to_line(value: GridField) -> LineField:
    """``Z = U^2 - U^1 = -2 dV/dm`` from a two-state value field, at midpoints between nodes."""
    grid = value.grid
    if grid.d != 2:
        raise ValueError("needs a two-state value field")
    order = np.argsort(grid.p[:, 0])
    m_nodes = 2.0 * grid.p[order, 0] - 1.0
    vals = value.scalar[:, order]
    dm = np.diff(m_nodes)
    Z = -2.0 * np.diff(vals, axis=1) / dm
    mids = 0.5 * (m_nodes[:-1] + m_nodes[1:])
    return LineField(value.times, mids, Z, dict(value.meta, source="value_gradient"))


def l1_gap(a: LineField, b: LineField, t: float = 0.0, window: float = 0.9) -> float:
    """``int_{|m| <= window} |a - b| dm`` at time ``t`` on the mesh of ``a``."""
    sel = np.abs(a.m) <= window + 1e-12
    diff = np.abs(a.slice_at(t)[sel] - np.interp(a.m[sel], b.m, b.slice_at(t)))
    return float(np.sum(diff) * a.dm)


def jump_locations(fld: LineField, t: float = 0.0, threshold: float | None = None) -> np.ndarray:
    """Locations of the jumps of one time slice.

    Consecutive values differing by more than ``threshold`` (default: a
    quarter of the slice's sup norm) are flagged; runs of adjacent flagged
    intervals form one smeared jump, reported at the centre of the run.
    """
    z = fld.slice_at(t)
    if threshold is None:
        threshold = 0.25 * float(np.max(np.abs(z))) if np.any(z) else np.inf
    flagged = np.flatnonzero(np.abs(np.diff(z)) > threshold)
    if flagged.size == 0:
        return np.array([])
    runs = np.split(flagged, np.flatnonzero(np.diff(flagged) > 1) + 1)
    mids = 0.5 * (fld.m[:-1] + fld.m[1:])
    return np.array([0.5 * (mids[r[0]] + mids[r[-1]]) for r in runs])


# ---------------------------------------------------------------------------
# Selected trajectories
# ---------------------------------------------------------------------------


def selected_trajectory(Z: LineField, cl: ConsLaw2, m0: float, t0: float = 0.0, n_steps: int = 300,
                        jump_threshold: float | None = None) -> list:
    """Population paths ``dm/dt = Z - m|Z|`` (capped) driven by the field ``Z``.

    RK4 with ``Z`` linearly interpolated in ``m`` and time.  When ``m0`` sits
    on a jump of ``Z`` (consecutive mesh values around ``m0`` differ by more
    than ``jump_threshold``), both selected branches are returned, started
    from ``m0 -/+ dm``; otherwise a single path.
    """
    if not -1.0 < m0 < 1.0:
        raise ValueError("m0 must lie in (-1, 1)")
    z0 = Z.slice_at(t0)
    k = int(np.searchsorted(Z.m, m0))
    on_jump = False
    if 0 < k < Z.m.size:
        thr = jump_threshold if jump_threshold is not None else 0.25 * float(np.max(np.abs(z0)) or np.inf)
        on_jump = abs(z0[k] - z0[k - 1]) > thr and abs(m0 - 0.5 * (Z.m[k] + Z.m[k - 1])) <= Z.dm
    starts = [m0 - Z.dm, m0 + Z.dm] if on_jump else [m0]
    times = uniform_times(t0, cl.T, n_steps + 1)
    paths = []
    for start in starts:
        m = np.empty(times.size)
        m[0] = start

        def rhs(t, x):
            return float(cl.drift(x, Z(t, x)))

        for i in range(n_steps):
            t, h = times[i], times[i + 1] - times[i]
            x = m[i]
            k1 = rhs(t, x)
            k2 = rhs(t + h / 2, x + h / 2 * k1)
            k3 = rhs(t + h / 2, x + h / 2 * k2)
            k4 = rhs(t + h, x + h * k3)
            m[i + 1] = np.clip(x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4), -1.0, 1.0)
        p = _point(m)
        paths.append(Trajectory(times, p, np.zeros((times.size, 2, 2)), meta={"m0": start}))
    return paths


# ---------------------------------------------------------------------------
# Test battery and weak-solution clauses
# ---------------------------------------------------------------------------


def _bump(y2: np.ndarray) -> np.ndarray:
    """``e * exp(1/(|y|^2 - 1))`` inside the unit ball (peak 1), zero outside."""
    out = np.zeros_like(y2)
    inside = y2 < 1.0
    out[inside] = np.exp(1.0 + 1.0 / (y2[inside] - 1.0))
    return out


def _bump_grad_factor(y2: np.ndarray) -> np.ndarray:
    """``d bump / d(y2)`` divided by the bump, inside the ball."""
    out = np.zeros_like(y2)
    inside = y2 < 1.0
    out[inside] = -1.0 / (y2[inside] - 1.0) ** 2
    return out


@dataclass(frozen=True)
class Bump:
    """Smooth bump centred at ``(t_c, x_c)`` with time radius ``rt`` and space radius ``rx``."""

    t_c: float
    x_c: tuple
    rt: float
    rx: float

    def evaluate(self, t: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Values, time derivative and space gradient on the product of times ``(nt,)`` and points ``(np, n)``.

        Shapes ``(nt, np)``, ``(nt, np)`` and ``(nt, np, n)``.  With ``rt = 0``
        the function is purely spatial (time factor 1).
        """
        xc = np.asarray(self.x_c)
        dx = (x - xc) / self.rx  # (np, n)
        if self.rt > 0:
            dt = (np.asarray(t)[:, None] - self.t_c) / self.rt
        else:
            dt = np.zeros((np.size(t), 1))
        y2 = dt**2 + np.sum(dx**2, axis=1)[None, :]
        phi = _bump(y2)
        fac = _bump_grad_factor(y2) * phi
        dphi_dt = fac * 2 * dt / self.rt if self.rt > 0 else np.zeros_like(phi)
        grad = fac[..., None] * 2 * dx[None, :, :] / self.rx
        return phi, dphi_dt, grad


def resolved_radii(h: float) -> tuple:
    """Three bump radii, the smallest spanning at least eight lattice spacings of width ``h``."""
    s = max(0.05, 8.0 * h)
    return (2.0 * s, 1.5 * s, s)


def bump_battery(n: int, T: float, radii=(0.15, 0.1, 0.05), time_radius: float | None = None,
                 per_scale: int = 9, spatial_only: bool = False, margin: float = 0.02) -> list:
    """Bumps at three scales centred on interior lattice points of the chart simplex.

    Supports stay inside ``(0, T) x`` the interior (at distance ``margin``
    from every face); requests that cannot fit are skipped.  At least
    ``per_scale`` centres per scale are laid out when room allows; a spatial
    battery has no time centres to multiply the count, so it lays out three
    times as many.  Pick ``radii`` with :func:`resolved_radii` when the
    battery is applied to lattice samples.
    """
    if spatial_only:
        per_scale *= 3
    battery = []
    for r in radii:
        rt = 0.0 if spatial_only else (time_radius if time_radius is not None else min(0.3 * T, 3 * r * T))
        lo = r + margin
        k = max(2, int(math.ceil(per_scale ** (1.0 / n))) + 1)
        axis = np.linspace(lo, 1.0 - lo, k)
        pts = np.array(np.meshgrid(*([axis] * n), indexing="ij")).reshape(n, -1).T
        # keep points whose ball stays inside the chart simplex
        slack = 1.0 - pts.sum(axis=1)
        pts = pts[slack >= (r * math.sqrt(n) + margin)]
        if spatial_only:
            t_cs = [0.0]
        else:
            t_cs = np.linspace(rt + 1e-9 + margin * T, T - rt - margin * T, 3)
            if rt <= 0 or t_cs[0] >= t_cs[-1]:
                continue
        for tc in t_cs:
            for p in pts:
                battery.append(Bump(float(tc), tuple(float(v) for v in p), float(rt), float(r)))
    return battery


def check_support(fn: Bump, T: float, margin: float = 0.0) -> None:
    xc = np.asarray(fn.x_c)
    if fn.rt > 0 and (fn.t_c - fn.rt < 0 or fn.t_c + fn.rt > T):
        raise ValueError(f"test function support leaves (0, T): {fn}")
    if np.any(xc - fn.rx <= margin) or 1.0 - xc.sum() - fn.rx * math.sqrt(xc.size) <= margin:
        raise ValueError(f"test function support touches the boundary: {fn}")


def chart_hamiltonian(p: np.ndarray, z: np.ndarray, M: float) -> np.ndarray:
    """``sum_{i != j} p_i (a D_ij + a^2/2)``, ``D_ij = z_j - z_i`` (``z_d = 0``), ``a = clip(-D_ij, 0, M)``."""
    zf = np.concatenate([z, np.zeros(z.shape[:-1] + (1,))], axis=-1)
    D = zf[..., None, :] - zf[..., :, None]  # [i, j] = z_j - z_i
    a = np.clip(-D, 0.0, M)
    terms = p[..., :, None] * (a * D + 0.5 * a * a)
    d = zf.shape[-1]
    terms = terms * (~np.eye(d, dtype=bool))
    return terms.sum(axis=(-2, -1))


def hjb_chart_flux(model: ModelSpec):
    """Flux of the differentiated HJB equation ``dZ_i/dt + d/dx_i [F + H(x, Z)] = 0`` in chart form."""

    def flux(p, z):
        F = model.F(p) if model.F is not None else 0.0
        return F + chart_hamiltonian(p, z, model.M)

    return flux


@dataclass
class ChartSamples:
    """A chart-gradient field flattened to quadrature points."""

    times: np.ndarray
    x: np.ndarray  # (points, n)
    Z: np.ndarray  # (times, points, n)
    weight: float  # spatial cell volume

    @property
    def p(self) -> np.ndarray:
        return np.concatenate([self.x, 1.0 - self.x.sum(axis=1, keepdims=True)], axis=1)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 1.0


def samples_from_line(fld: LineField) -> ChartSamples:
    """Chart samples ``x = (1+m)/2`` with ``Z_chart = U^1 - U^2 = -Z``."""
    x = ((1.0 + fld.m) / 2.0)[:, None]
    return ChartSamples(fld.times, x, -fld.values[:, :, None], fld.dm / 2.0)


def samples_from_grid(Zfield: GridField) -> ChartSamples:
    """Chart samples of a chart-gradient field on a simplex lattice."""
    grid = Zfield.grid
    return ChartSamples(Zfield.times, grid.x, Zfield.values, grid.h**grid.n)


def chart_gradient_field(value: GridField, steps: int = 1) -> GridField:
    """Chart gradient of a scalar value field, ``(times, nodes, d-1)``."""
    Z = chart_gradient(value.grid, value.scalar, steps)
    return GridField(value.grid, value.times, Z, dict(value.meta, kind="chart_gradient"))


def weak_residual(samples: ChartSamples, flux, battery: list, source=None, T: float | None = None) -> dict:
    """Largest normalised weak residual of ``dZ_i/dt + d/dx_i flux(p, Z) = source_i``.

    For every test function ``phi`` the quadrature of
    ``int int [Z_i dphi/dt + flux dphi/dx_i + source_i phi] dx dt`` (summed
    over components) is divided by ``int int phi``.  Supports must lie inside
    ``(0, T)`` times the interior.
    """
    T = samples.times[-1] if T is None else T
    p = samples.p
    Fl = np.stack([flux(p, samples.Z[s]) for s in range(samples.times.size)])  # (nt, np)
    src = None if source is None else np.asarray(source(p, samples.times))
    w = samples.weight * samples.dt
    worst, values = 0.0, []
    for fn in battery:
        check_support(fn, T)
        phi, phi_t, grad = fn.evaluate(samples.times, samples.x)
        mass = float(np.sum(phi) * w)
        if mass <= 0:
            raise ValueError(f"test function {fn} is not resolved by the mesh")
        r = np.sum(samples.Z * phi_t[..., None]) + np.sum(Fl[..., None] * grad)
        if src is not None:
            r += np.sum(src * phi[..., None])
        r = float(r * w) / mass
        values.append(r)
        worst = max(worst, abs(r))
    return {"max": worst, "residuals": np.array(values), "count": len(battery)}


def curl_residual(samples: ChartSamples, battery: list) -> dict:
    """Largest normalised ``int [Z_i dw/dx_j - Z_j dw/dx_i] dx`` over pairs, slices and spatial bumps.

    Each integral is divided by ``int w dx``.  Fields with a single chart
    component have no curl and return zero.
    """
    n = samples.x.shape[1]
    if n < 2:
        return {"max": 0.0, "count": 0, "applicable": False}
    worst = 0.0
    count = 0
    for fn in battery:
        check_support(fn, np.inf)
        phi, _, grad = fn.evaluate(np.zeros(1), samples.x)
        phi, grad = phi[0], grad[0]
        mass = float(np.sum(phi) * samples.weight)
        if mass <= 0:
            raise ValueError(f"test function {fn} is not resolved by the mesh (curl needs spatial bumps)")
        for i in range(n):
            for j in range(i + 1, n):
                vals = (samples.Z[:, :, i] @ grad[:, j] - samples.Z[:, :, j] @ grad[:, i]) * samples.weight / mass
                worst = max(worst, float(np.max(np.abs(vals))))
                count += 1
    return {"max": worst, "count": count, "applicable": True}


def oleinik_slopes(fld: LineField) -> np.ndarray:
    """Largest forward difference quotient of each time slice."""
    return np.max(np.diff(fld.values, axis=1) / np.diff(fld.m)[None, :], axis=1)


def oleinik_check(fld: LineField | ChartSamples, battery: list | None = None) -> dict:
    """One-sided slope bound of a value-gradient field, per time slice.

    For a line field the bound is the largest forward difference quotient of
    each slice.  For chart samples it is the smallest ``c`` with
    ``-int (e.Z) d_e w dx <= c int w dx`` over the spatial battery and the
    directions ``e`` of the chart axes and of every mass transfer.
    """
    if isinstance(fld, LineField):
        c = oleinik_slopes(fld)
        return {"c": c, "c_max": float(np.max(c)), "argmax_m": float(fld.m[np.argmax(np.max(np.diff(fld.values, axis=1), axis=0))])}
    if battery is None:
        raise ValueError("chart samples need a spatial test battery")
    n = fld.x.shape[1]
    dirs = [np.eye(n)[k] for k in range(n)]
    dirs += [(np.eye(n)[i] - np.eye(n)[j]) / math.sqrt(2) for i in range(n) for j in range(i + 1, n)]
    c = np.full(fld.times.size, -np.inf)
    for fn in battery:
        check_support(fn, np.inf)
        phi, _, grad = fn.evaluate(np.zeros(1), fld.x)
        phi, grad = phi[0], grad[0]
        mass = float(np.sum(phi) * fld.weight)
        for e in dirs:
            eZ = fld.Z @ e  # (nt, np)
            de_w = grad @ e
            c = np.maximum(c, -(eZ @ de_w) * fld.weight / mass)
    return {"c": c, "c_max": float(np.max(c))}


def mollified_terminal_gap(fld: LineField, terminal, scales=(0.2, 0.1, 0.05), window: float = 0.8) -> list:
    """Agreement with the terminal data: ``max |rho_s * (Z(T - s) - Z_T)|`` on ``|m| <= window``.

    ``rho_s`` is a normalised bump of radius ``s`` in ``m``; one gap per scale.
    """
    gaps = []
    T = fld.times[-1]
    zT = terminal(fld.m)
    centres = fld.m[np.abs(fld.m) <= window]
    for s in scales:
        diff = fld.slice_at(T - s) - zT
        y2 = ((fld.m[None, :] - centres[:, None]) / s) ** 2
        w = _bump(y2)
        w /= w.sum(axis=1, keepdims=True)
        gaps.append(float(np.max(np.abs(w @ diff))))
    return gaps


@dataclass
class Certificate:
    """Outcome of the three weak-solution clauses plus terminal agreement, per mesh."""

    meshes: list
    clauses: list
    admissible: bool

    def lines(self) -> list:
        out = []
        for mesh, rows in zip(self.meshes, self.clauses):
            for name, value, threshold, ok in rows:
                out.append(f"mesh={mesh:.6g} {name}: value={value:.6g} threshold={threshold:.6g} "
                           f"{'pass' if ok else 'fail'}")
        out.append(f"admissible (discrete): {'yes' if self.admissible else 'no'}")
        return out

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")


def certify_line(fields: list, cl: ConsLaw2, model: ModelSpec, weak_factor: float = 10.0,
                 oleinik_growth: float = 2.0, terminal_tol: float = 0.1) -> Certificate:
    """Certify two-state ``Z`` fields (``U^2 - U^1`` on cell centres) at two or more meshes.

    Clauses: weak residual at most ``weak_factor * (dm + dt) * (1 + sup|Z|)``;
    no curl (single component); the one-sided slope of the value gradient
    ``-Z`` bounded, i.e. its mesh-refined maximum grows by less than
    ``oleinik_growth`` between consecutive meshes; mollified terminal gaps
    non-increasing as the scale shrinks and the finest below ``terminal_tol``.
    """
    fields = sorted(fields, key=lambda f: -f.dm)
    flux = hjb_chart_flux(model)
    clauses, meshes = [], []
    prev_c = None
    ok_all = True
    for fld in fields:
        dm = fld.dm
        dt = float(fld.times[1] - fld.times[0])
        samples = samples_from_line(fld)
        battery = bump_battery(1, cl.T, radii=resolved_radii(dm / 2))
        wr = weak_residual(samples, flux, battery)
        zsup = float(np.max(np.abs(fld.values)))
        thr_w = weak_factor * (dm + dt) * (1.0 + zsup)
        ol = oleinik_check(fld.oriented())
        c = ol["c_max"]
        ok_ol = np.isfinite(c) and (prev_c is None or c <= oleinik_growth * max(prev_c, 1.0))
        prev_c = c if prev_c is None else max(prev_c, c)
        gaps = mollified_terminal_gap(fld, cl.terminal)
        ok_term = all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:])) and gaps[-1] <= terminal_tol
        rows = [
            ("weak_residual", wr["max"], thr_w, wr["max"] <= thr_w),
            ("curl", 0.0, 0.0, True),
            ("oleinik_slope", c, oleinik_growth * max(prev_c, 1.0), bool(ok_ol)),
            ("terminal_gap", gaps[-1], terminal_tol, bool(ok_term)),
        ]
        ok_all &= all(r[3] for r in rows)
        clauses.append(rows)
        meshes.append(dm)
    return Certificate(meshes, clauses, bool(ok_all and len(fields) >= 2))


def manufactured_upward_jump(dm: float, T: float = 1.0, height: float = 1.0, n_times: int = 11) -> LineField:
    """A value-gradient field with an upward jump at ``m = 0`` (not entropy-admissible)."""
    n_cells = int(round(2.0 / dm))
    m = -1.0 + (np.arange(n_cells) + 0.5) * dm
    vals = np.where(m > 0, height, -height)
    times = uniform_times(0.0, T, n_times)
    return LineField(times, m, np.tile(vals, (n_times, 1)))
