"""Geometry of the probability simplex.

The simplex S_d is parametrised by the fixed chart that drops the last
coordinate: a point ``p = (p_1, ..., p_d)`` maps to ``x = (p_1, ..., p_{d-1})``
and back through ``p_d = 1 - sum(x)``.

This module provides the chart dictionary, intrinsic derivatives (directional
derivatives along ``e_i - (1/d) 1``), a regular lattice on the chart, the
:class:`GridField` container used by every PDE solver, and piecewise-linear
interpolation on a triangulation of that lattice.
"""

from __future__ import annotations

import io
import itertools
import logging
from dataclasses import dataclass, field
from math import comb
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-12


def as_simplex_point(p, tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Validate a probability vector and return it as a float array."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size < 2:
        raise ValueError("a simplex point is a vector with at least two entries")
    if np.any(p < -tol) or abs(p.sum() - 1.0) > tol:
        raise ValueError(f"not a probability vector: {p}")
    return p


def to_chart(p) -> np.ndarray:
    """Drop the last coordinate of a probability vector."""
    p = as_simplex_point(p)
    return p[:-1].copy()


def from_chart(x) -> np.ndarray:
    """Rebuild the probability vector from its chart image."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("chart points are vectors")
    last = 1.0 - x.sum()
    if np.any(x < -SIMPLEX_TOL) or last < -SIMPLEX_TOL:
        raise ValueError(f"not a chart point: {x}")
    return np.append(x, last)


def chart_to_intrinsic(z) -> np.ndarray:
    """Map a chart covector ``z`` to the zero-sum intrinsic vector.

    The result is ``(z_1 - s/d, ..., z_{d-1} - s/d, -s/d)`` with ``s = sum(z)``.
    Differences are preserved: component i minus component j equals
    ``z_i - z_j`` (with ``z_d = 0``).
    """
    z = np.asarray(z, dtype=float)
    d = z.shape[-1] + 1
    s = z.sum(axis=-1, keepdims=True)
    return np.concatenate([z - s / d, -s / d], axis=-1)


def intrinsic_from_chart_gradient(grad: np.ndarray) -> np.ndarray:
    """Intrinsic gradient from the chart gradient of the same function.

    ``d_i = dx_i - (1/d) sum_j dx_j`` for ``i < d`` and ``d_d = -(1/d) sum_j dx_j``.
    """
    return chart_to_intrinsic(grad)


def intrinsic_gradient(fun: Callable[[np.ndarray], float], p, fd_step: float = 1e-5) -> np.ndarray:
    """Intrinsic gradient of a function of ``p`` by central differences.

    Component i is the derivative of ``fun`` along ``e_i - (1/d) 1`` at ``p``.
    """
    p = as_simplex_point(p)
    if np.any(p <= fd_step):
        raise ValueError("interior-only derivative: every coordinate must exceed the step")
    d = p.size
    out = np.empty(d)
    for i in range(d):
        direction = -np.full(d, 1.0 / d)
        direction[i] += 1.0
        out[i] = (fun(p + fd_step * direction) - fun(p - fd_step * direction)) / (2.0 * fd_step)
    return out


class SimplexGrid:
    """Regular lattice ``{x : x_j = k_j h, sum(x) <= 1}`` on the chart.

    ``h`` must be the reciprocal of an integer ``N`` so that the last
    coordinate ``p_d = 1 - sum(x)`` is also a multiple of ``h``.  Nodes are
    stored in lexicographic order of their integer counts.

    Attributes
    ----------
    counts : (nodes, d) int array
        Lattice counts of every state, including the eliminated last one.
    p : (nodes, d) float array
        Probability vectors of the nodes (exact multiples of ``h``).
    nbr : (nodes, d, d) int array
        ``nbr[x, i, j]`` is the node reached by moving one lattice unit of
        mass from state ``i`` to state ``j``; ``-1`` when ``p_i = 0`` or ``i == j``.
    lookup : flat int array
        Node index of chart counts ``k`` at position ``sum_j k_j (N+1)^j``.
    """

    def __init__(self, d: int, h: float):
        if d < 2:
            raise ValueError("d must be at least 2")
        n_div = int(round(1.0 / h))
        if n_div < 1 or abs(n_div * h - 1.0) > 1e-9:
            raise ValueError(f"mesh width h={h} must be 1/N for an integer N")
        self.d = d
        self.N = n_div
        self.h = 1.0 / n_div
        n = d - 1
        self.n = n
        chart_counts = np.array(
            [k for k in itertools.product(range(n_div + 1), repeat=n) if sum(k) <= n_div],
            dtype=np.int64,
        ).reshape(-1, n)
        last = n_div - chart_counts.sum(axis=1, keepdims=True)
        self.counts = np.hstack([chart_counts, last])
        self.p = self.counts / n_div
        self.x = self.p[:, :-1].copy()
        self.size = self.counts.shape[0]
        self.strides = (n_div + 1) ** np.arange(n, dtype=np.int64)
        self.lookup = np.full((n_div + 1) ** n, -1, dtype=np.int64)
        self.lookup[chart_counts @ self.strides] = np.arange(self.size)
        self.nbr = np.full((self.size, d, d), -1, dtype=np.int64)
        for i in range(d):
            for j in range(d):
                if i != j:
                    self.nbr[:, i, j] = self.shift_index(i, j, 1)
        for arr in (self.counts, self.p, self.x, self.lookup, self.nbr):
            arr.setflags(write=False)

    @staticmethod
    def expected_size(d: int, h: float) -> int:
        return comb(int(round(1.0 / h)) + d - 1, d - 1)

    def index_of_counts(self, chart_counts: np.ndarray) -> np.ndarray:
        """Node indices for chart counts (``-1`` outside the lattice)."""
        chart_counts = np.asarray(chart_counts, dtype=np.int64)
        ok = np.all(chart_counts >= 0, axis=-1) & (chart_counts.sum(axis=-1) <= self.N)
        flat = np.where(ok, (np.clip(chart_counts, 0, self.N) @ self.strides), 0)
        return np.where(ok, self.lookup[flat], -1)

    def shift_index(self, src: int, dst: int, steps: int) -> np.ndarray:
        """Indices of the nodes reached by moving ``steps`` units from ``src`` to ``dst``."""
        moved = self.counts.copy()
        moved[:, src] -= steps
        moved[:, dst] += steps
        ok = moved[:, src] >= 0
        idx = self.index_of_counts(moved[:, :-1])
        return np.where(ok, idx, -1)

    def nearest_node(self, x) -> int:
        x = np.asarray(x, dtype=float)
        return int(np.argmin(np.abs(self.x - x).sum(axis=1)))

    def __repr__(self) -> str:
        return f"SimplexGrid(d={self.d}, h=1/{self.N}, nodes={self.size})"


def uniform_times(t0: float, t1: float, count: int) -> np.ndarray:
    return t0 + (t1 - t0) * np.arange(count) / (count - 1) if count > 1 else np.array([t0])


@dataclass
class GridField:
    """Time-indexed field on a :class:`SimplexGrid`.

    ``values`` has shape ``(len(times), grid.size, k)``; ``times`` is uniform.
    """

    grid: SimplexGrid
    times: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.shape[:2] != (self.times.size, self.grid.size):
            raise ValueError(
                f"values shape {values.shape} does not match times {self.times.size} x nodes {self.grid.size}"
            )
        if not np.all(np.isfinite(values)):
            bad = np.argwhere(~np.isfinite(values))[0]
            raise ValueError(f"non-finite value at time index {bad[0]}, node {bad[1]}")
        if self.times.size > 2:
            steps = np.diff(self.times)
            if np.max(np.abs(steps - steps[0])) > 1e-9 * max(1.0, abs(self.times[-1])):
                raise ValueError("GridField times must be uniform")
        self.values = values

    @property
    def k(self) -> int:
        return self.values.shape[2]

    @property
    def scalar(self) -> np.ndarray:
        """Values of a scalar field as a ``(times, nodes)`` array."""
        if self.k != 1:
            raise ValueError("field is not scalar")
        return self.values[:, :, 0]

    def slice_at(self, t: float) -> np.ndarray:
        """Values at time ``t`` (linear in time), shape ``(nodes, k)``."""
        s0, w = _time_weights(self.times, t)
        if w == 0.0 or s0 + 1 >= self.times.size:
            return self.values[s0].copy()
        return (1.0 - w) * self.values[s0] + w * self.values[s0 + 1]

    def to_csv(self, path) -> None:
        write_field_csv(self, path)


def _time_weights(times: np.ndarray, t: float) -> tuple[int, float]:
    if times.size == 1:
        return 0, 0.0
    dt = times[1] - times[0]
    pos = (t - times[0]) / dt
    pos = min(max(pos, 0.0), times.size - 1.0)
    s0 = int(np.floor(pos))
    if s0 >= times.size - 1:
        return times.size - 1, 0.0
    return s0, pos - s0


def project_chart(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clamp chart points into the simplex; returns the points and a moved flag."""
    x = np.asarray(x, dtype=float)
    y = np.clip(x, 0.0, None)
    s = y.sum(axis=-1, keepdims=True)
    y = np.where(s > 1.0, y / np.where(s > 0, s, 1.0), y)
    moved = np.any(np.abs(y - x) > 1e-12, axis=-1)
    return y, moved


def interpolate_values(grid: SimplexGrid, node_values: np.ndarray, x) -> tuple[np.ndarray, np.ndarray]:
    """Piecewise-linear interpolation of node values at chart points.

    The lattice is triangulated by the Freudenthal (Kuhn) triangulation in the
    cumulative coordinates ``u_m = (x_1 + ... + x_m)/h``, whose simplices tile
    the chart simplex exactly, so the interpolant is exact on affine fields.

    Returns ``(values, clamped)`` with shapes ``(npts, k)`` and ``(npts,)``.
    """
    node_values = np.asarray(node_values, dtype=float)
    if node_values.ndim == 1:
        node_values = node_values[:, None]
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    if pts.shape[-1] != grid.n:
        raise ValueError(f"chart points need {grid.n} coordinates, got {pts.shape[-1]}")
    pts, moved = project_chart(pts)
    out = kernels.interp_points(grid.lookup, grid.N, grid.n, np.ascontiguousarray(node_values), np.ascontiguousarray(pts))
    return out, moved


def interpolate(fld: GridField, t: float, x) -> np.ndarray:
    """Interpolate a field at time ``t`` and chart point(s) ``x``.

    Out-of-domain points are clamped to the simplex and the clamp is logged.
    A single point returns a ``(k,)`` vector, several points ``(npts, k)``.
    """
    x_arr = np.asarray(x, dtype=float)
    single = x_arr.ndim == 1
    t_clamped = min(max(t, fld.times[0]), fld.times[-1])
    if t_clamped != t:
        logger.warning("time %.6g clamped into [%.6g, %.6g]", t, fld.times[0], fld.times[-1])
    vals, moved = interpolate_values(fld.grid, fld.slice_at(t_clamped), x_arr)
    if np.any(moved):
        logger.warning("%d interpolation point(s) clamped into the simplex", int(moved.sum()))
    return vals[0] if single else vals


# ---------------------------------------------------------------------------
# Finite differences on the lattice
# ---------------------------------------------------------------------------


def _direct_difference(grid: SimplexGrid, values: np.ndarray, src: int, dst: int, steps: int
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Central, then one-sided differences along ``e_dst - e_src``; returns values and a done mask."""
    h = grid.h
    out = np.full(values.shape, np.nan)
    done = np.zeros(grid.size, dtype=bool)
    for s in sorted({steps, 1}, reverse=True):
        fwd = grid.shift_index(src, dst, s)
        bwd = grid.shift_index(dst, src, s)
        both = (fwd >= 0) & (bwd >= 0) & ~done
        if np.any(both):
            out[..., both] = (values[..., fwd[both]] - values[..., bwd[both]]) / (2 * s * h)
            done |= both
    for s in sorted({steps, 1}, reverse=True):
        fwd = grid.shift_index(src, dst, s)
        bwd = grid.shift_index(dst, src, s)
        only_f = (fwd >= 0) & ~done
        if np.any(only_f):
            out[..., only_f] = (values[..., fwd[only_f]] - values[..., only_f]) / (s * h)
            done |= only_f
        only_b = (bwd >= 0) & ~done
        if np.any(only_b):
            out[..., only_b] = (values[..., only_b] - values[..., bwd[only_b]]) / (s * h)
            done |= only_b
    return out, done


def transition_derivative(grid: SimplexGrid, values: np.ndarray, src: int, dst: int, steps: int = 1) -> np.ndarray:
    """Derivative along ``e_dst - e_src`` of node values, shape ``(..., nodes)``.

    Central differences with ``steps`` lattice units where both neighbours
    exist, falling back to unit central, then one-sided differences, and at
    nodes where neither state carries mass, to a path through the heaviest state.
    """
    values = np.asarray(values, dtype=float)
    out, done = _direct_difference(grid, values, src, dst, steps)
    if not np.all(done):
        # the heaviest state has mass at these nodes, so both legs have a direct difference
        rest = np.flatnonzero(~done)
        heavy = np.argmax(grid.counts[rest], axis=1)
        for via in np.unique(heavy):
            nodes = rest[heavy == via]
            first, _ = _direct_difference(grid, values, src, int(via), 1)
            second, _ = _direct_difference(grid, values, int(via), dst, 1)
            out[..., nodes] = first[..., nodes] + second[..., nodes]
    return out


def chart_gradient(grid: SimplexGrid, values: np.ndarray, steps: int = 1) -> np.ndarray:
    """Chart gradient of node values ``(..., nodes)`` -> ``(..., nodes, d-1)``."""
    last = grid.d - 1
    comps = [transition_derivative(grid, values, last, k, steps) for k in range(grid.n)]
    return np.stack(comps, axis=-1)


def lattice_intrinsic_gradient(grid: SimplexGrid, values: np.ndarray, steps: int = 1) -> np.ndarray:
    """Intrinsic gradient of node values ``(..., nodes)`` -> ``(..., nodes, d)``."""
    return chart_to_intrinsic(chart_gradient(grid, values, steps))


def second_transition_difference(grid: SimplexGrid, values: np.ndarray, a: int, b: int) -> np.ndarray:
    """Second difference along ``e_a - e_b``; zero where a neighbour is missing."""
    fwd = grid.nbr[:, b, a]
    bwd = grid.nbr[:, a, b]
    ok = (fwd >= 0) & (bwd >= 0)
    out = np.zeros(np.shape(values))
    out[..., ok] = (values[..., fwd[ok]] - 2 * values[..., ok] + values[..., bwd[ok]]) / grid.h**2
    return out


def kimura_term(grid: SimplexGrid, values: np.ndarray, eps: float) -> np.ndarray:
    """``(eps^2/2) sum_jk (p_j delta_jk - p_j p_k) d_j d_k`` applied to node values.

    Uses the identity ``diag(p) - p p^T = sum_{a<b} p_a p_b (e_a - e_b)(e_a - e_b)^T``,
    so each pair contributes a lattice second difference whose weight vanishes
    whenever one of the two states is empty.
    """
    out = np.zeros(np.shape(values))
    for a in range(grid.d):
        for b in range(a + 1, grid.d):
            weight = grid.p[:, a] * grid.p[:, b]
            out += weight * second_transition_difference(grid, values, a, b)
    return 0.5 * eps**2 * out


def schwarz_residual(grid: SimplexGrid, grad: np.ndarray) -> float:
    """Max of ``|d_j Z^i - d_i Z^j|`` over nodes where central stencils exist."""
    n = grid.n
    if n < 2:
        return 0.0
    worst = 0.0
    last = grid.d - 1
    for i in range(n):
        for j in range(i + 1, n):
            dij = transition_derivative(grid, grad[..., i], last, j)
            dji = transition_derivative(grid, grad[..., j], last, i)
            interior = np.all(grid.counts >= 2, axis=1)
            if np.any(interior):
                worst = max(worst, float(np.max(np.abs(dij - dji)[..., interior])))
    return worst


# ---------------------------------------------------------------------------
# CSV serialisation
# ---------------------------------------------------------------------------


def write_field_csv(fld: GridField, path) -> None:
    """Write ``t,x_1..x_{d-1},v_1..v_k`` rows (time-major) with round-trip precision."""
    grid = fld.grid
    nt, nn, k = fld.values.shape
    header = ["t"] + [f"x_{j + 1}" for j in range(grid.n)] + [f"v_{j + 1}" for j in range(k)]
    t_col = np.repeat(fld.times, nn)[:, None]
    x_cols = np.tile(grid.x, (nt, 1))
    data = np.hstack([t_col, x_cols, fld.values.reshape(nt * nn, k)])
    buf = io.StringIO()
    np.savetxt(buf, data, delimiter=",", fmt="%.17g", header=",".join(header), comments="")
    Path(path).write_text(buf.getvalue())


def read_field_csv(path, d: int | None = None) -> GridField:
    """Read a field written by :func:`write_field_csv`."""
    text = Path(path).read_text()
    header = text.splitlines()[0].split(",")
    n = sum(1 for c in header if c.startswith("x_"))
    if d is not None and n != d - 1:
        raise ValueError(f"file has chart dimension {n}, expected {d - 1}")
    data = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=1, ndmin=2)
    times = np.unique(data[:, 0])
    nn = data.shape[0] // times.size
    xs = data[:nn, 1 : 1 + n]
    n_div = int(round(1.0 / np.min(np.diff(np.unique(xs[:, 0]))))) if nn > 1 else 1
    grid = SimplexGrid(n + 1, 1.0 / n_div)
    if grid.size != nn or not np.allclose(grid.x, xs, atol=1e-12):
        raise ValueError("CSV nodes do not form a simplex lattice in canonical order")
    values = data[:, 1 + n :].reshape(times.size, nn, -1)
    return GridField(grid, times, values)
