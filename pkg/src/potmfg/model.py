"""Problem data and the Hamiltonian library.

Cost callables are vectorised: ``f(p)`` and ``g(p)`` take an array of shape
``(..., d)`` and return per-state costs of the same shape; potentials ``F``
and ``G`` return shape ``(...)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .simplex import SimplexGrid, intrinsic_gradient

logger = logging.getLogger(__name__)

ArrayFn = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# Controls, Lagrangian and Hamiltonians
# ---------------------------------------------------------------------------


def a_star(r, M: float):
    """Clamp of ``r`` to ``[0, M]``: the minimiser of ``a * (-r) + a^2 / 2`` over ``[0, M]``."""
    if M <= 0:
        raise ValueError("the control cap M must be positive")
    return np.clip(r, 0.0, M)


def control_matrix(offdiag, M: float) -> np.ndarray:
    """Build a rate matrix from off-diagonal entries, setting the diagonal to minus the row sum."""
    alpha = np.array(offdiag, dtype=float)
    d = alpha.shape[-1]
    if alpha.shape[-2:] != (d, d):
        raise ValueError("a control matrix is square")
    eye = np.eye(d, dtype=bool)
    off = np.where(eye, 0.0, alpha)
    if np.any(off < 0.0) or np.any(off > M * (1 + 1e-12)):
        raise ValueError(f"off-diagonal rates must lie in [0, {M}]")
    return off - np.eye(d) * off.sum(axis=-1, keepdims=True)


def lagrangian(i: int, alpha) -> float:
    """Running control cost of state ``i``: half the sum of squared outgoing rates."""
    alpha = np.asarray(alpha, dtype=float)
    row = np.delete(alpha[..., i, :], i, axis=-1)
    return 0.5 * np.sum(row * row, axis=-1)


def lagrangian_all(alpha) -> np.ndarray:
    """Control cost of every state, shape ``(..., d)``; diagonal entries are ignored."""
    alpha = np.asarray(alpha, dtype=float)
    d = alpha.shape[-1]
    off = np.where(np.eye(d, dtype=bool), 0.0, alpha)
    return 0.5 * np.sum(off * off, axis=-1)


def hamiltonian_H(u) -> float:
    """Untruncated Hamiltonian ``-1/2 sum_j (u_j)_+^2``."""
    u = np.asarray(u, dtype=float)
    return -0.5 * np.sum(np.maximum(u, 0.0) ** 2, axis=-1)


def htilde_all(w, M: float) -> np.ndarray:
    """Truncated per-state Hamiltonians for all states, shape ``(..., d)``.

    Component i equals ``sum_{j != i} a*(w_i - w_j) (w_j - w_i) + a*(w_i - w_j)^2 / 2``.
    """
    w = np.asarray(w, dtype=float)
    diff = w[..., :, None] - w[..., None, :]
    a = a_star(diff, M)
    return np.sum(-a * diff + 0.5 * a * a, axis=-1)


def hamiltonian_HtildeM(i: int, w, M: float) -> float:
    """Truncated Hamiltonian of state ``i`` (invariant under adding a constant to ``w``)."""
    return htilde_all(w, M)[..., i]


def optimal_rates(w, M: float) -> np.ndarray:
    """Feedback rates ``alpha^{ij} = a*(w_i - w_j)`` with zero diagonal."""
    w = np.asarray(w, dtype=float)
    a = a_star(w[..., :, None] - w[..., None, :], M)
    d = w.shape[-1]
    return np.where(np.eye(d, dtype=bool), 0.0, a)


def hamiltonian_scriptH(p, w, M: float, phi: Callable | None = None) -> tuple[float, np.ndarray]:
    """Full Hamiltonian with repulsion and its gradient in ``w``.

    Value: ``sum_i p_i Htilde_i(w) + sum_i sum_{j != i} p_i phi(p_j) (w_j - w_i)``.
    Gradient component i: ``sum_j p_j (phi(p_i) + a*(w_j - w_i)) - p_i sum_j (phi(p_j) + a*(w_i - w_j))``
    with sums over ``j != i``.
    """
    p = np.asarray(p, dtype=float)
    w = np.asarray(w, dtype=float)
    d = p.shape[-1]
    ph = np.zeros_like(p) if phi is None else np.asarray(phi(p), dtype=float)
    off = ~np.eye(d, dtype=bool)
    diff = w[..., None, :] - w[..., :, None]  # [i, j] = w_j - w_i
    value = np.sum(p * htilde_all(w, M), axis=-1)
    value = value + np.sum(p[..., :, None] * ph[..., None, :] * diff * off, axis=(-2, -1))
    rates = optimal_rates(w, M)  # [i, j] = a*(w_i - w_j)
    inflow = np.sum(p[..., :, None] * (ph[..., None, :] + rates) * off, axis=-2)
    outflow = p * np.sum((ph[..., None, :] + rates) * off, axis=-1)
    return value, inflow - outflow


# ---------------------------------------------------------------------------
# Repulsion cutoff
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseConfig:
    """Noise intensity and the boundary repulsion profile.

    The repulsion rate equals ``kappa_eps = kappa2 / eps^2`` on ``[0, theta]``,
    ``kappa0`` on ``[2 theta, delta]`` and zero beyond ``2 delta``, with cubic
    Hermite blends in between.  ``eps = 0`` requires ``kappa2 = 0``.
    """

    eps: float
    theta: float = 0.05
    delta: float = 0.2
    kappa0: float = 0.0
    kappa2: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")
        if self.eps == 0.0 and self.kappa2 != 0.0:
            raise ValueError("kappa2 must be 0 when eps = 0")
        if self.kappa0 < 0 or self.kappa2 < 0:
            raise ValueError("repulsion levels must be nonnegative")
        if self.active:
            if not (0.0 < 2 * self.theta <= self.delta <= 0.5):
                raise ValueError(f"need 0 < 2*theta <= delta <= 1/2, got theta={self.theta}, delta={self.delta}")
            if self.kappa_eps < self.kappa0:
                raise ValueError(
                    f"non-monotone repulsion: kappa_eps={self.kappa_eps} < kappa0={self.kappa0}"
                )

    @classmethod
    def inviscid(cls) -> "NoiseConfig":
        return cls(eps=0.0, theta=0.05, delta=0.2, kappa0=0.0, kappa2=0.0)

    @property
    def active(self) -> bool:
        return self.kappa0 > 0.0 or self.kappa2 > 0.0

    @property
    def kappa_eps(self) -> float:
        return self.kappa2 / self.eps**2 if self.eps > 0 else 0.0

    def phi(self, r) -> np.ndarray:
        if not self.active:
            return np.zeros_like(np.asarray(r, dtype=float))
        return kernels.phi_value(np.asarray(r, dtype=float), self.theta, self.delta, self.kappa_eps, self.kappa0)

    def dphi(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if not self.active:
            return np.zeros_like(r)
        th, de, ke, k0 = self.theta, self.delta, self.kappa_eps, self.kappa0
        s1 = (r - th) / th
        s2 = (r - de) / de
        conds = [r <= th, r < 2 * th, r <= de, r < 2 * de]
        choices = [
            np.zeros_like(r),
            (k0 - ke) * 6.0 * s1 * (1.0 - s1) / th,
            np.zeros_like(r),
            -k0 * 6.0 * s2 * (1.0 - s2) / de,
        ]
        return np.select(conds, choices, default=0.0)

    def dphi_envelope(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return (2 * self.kappa_eps / self.theta) * (r <= 2 * self.theta) + (2 * self.kappa0 / self.delta) * (
            r <= 2 * self.delta
        )


def cutoff_phi(r, cfg: NoiseConfig) -> tuple[np.ndarray, np.ndarray]:
    """Repulsion rate and its derivative at ``r``."""
    return cfg.phi(r), cfg.dphi(r)


# ---------------------------------------------------------------------------
# Model specification
# ---------------------------------------------------------------------------


def _chart_sample(d: int, step: float = 0.01, max_points: int = 200_000, seed: int = 0) -> np.ndarray:
    """Simplex sample used for sup-norm estimates: a lattice, or Dirichlet draws when too large."""
    n_div = int(round(1.0 / step))
    if SimplexGrid.expected_size(d, 1.0 / n_div) <= max_points:
        return SimplexGrid(d, 1.0 / n_div).p
    rng = np.random.Generator(np.random.Philox(key=[seed, 0]))
    return rng.dirichlet(np.ones(d), size=max_points)


@dataclass
class ModelSpec:
    """Costs, potentials, horizon and control cap of a finite-state game."""

    d: int
    T: float
    f: ArrayFn
    g: ArrayFn
    F: Callable | None = None
    G: Callable | None = None
    M: float | None = None
    name: str = "custom"
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("d must be at least 2")
        if not self.T > 0:
            raise ValueError("the horizon T must be positive")
        if self.M is None:
            pts = _chart_sample(self.d)
            f_sup = float(np.max(np.abs(self.f(pts))))
            g_sup = float(np.max(np.abs(self.g(pts))))
            self.info.update(f_sup=f_sup, g_sup=g_sup, sup_sample_size=int(pts.shape[0]), auto_M=True)
            self.M = 2.0 * (g_sup + self.T * f_sup)
            if self.M == 0.0:
                self.M = 1.0
                self.info["M_note"] = "zero costs: cap set to 1"
        if not self.M > 0:
            raise ValueError("M must be positive")

    @property
    def has_potential(self) -> bool:
        return self.F is not None and self.G is not None

    def value_bound(self) -> float:
        pts = _chart_sample(self.d, step=0.02)
        return self.T * float(np.max(np.abs(self.f(pts)))) + float(np.max(np.abs(self.g(pts))))

    def with_horizon(self, T: float) -> "ModelSpec":
        info = {k: v for k, v in self.info.items() if k not in ("auto_M", "sup_sample_size", "M_note")}
        M = None if self.info.get("auto_M") else self.M
        return ModelSpec(self.d, T, self.f, self.g, self.F, self.G, M, self.name, info)


def potential_residual(model: ModelSpec, step: float = 0.05, fd_step: float = 1e-5) -> tuple[float, float]:
    """Max over interior lattice points of the mismatch between potential gradients and centred costs.

    Returns ``(running, terminal)`` residuals.
    """
    if not model.has_potential:
        raise ValueError("model has no potentials")
    grid = SimplexGrid(model.d, step)
    pts = grid.p[np.all(grid.p > 2 * fd_step, axis=1)]
    worst = []
    for pot, cost in ((model.F, model.f), (model.G, model.g)):
        res = 0.0
        for p in pts:
            grad = intrinsic_gradient(lambda q: float(pot(q)), p, fd_step)
            c = cost(p)
            res = max(res, float(np.max(np.abs(grad - (c - c.mean())))))
        worst.append(res)
    return worst[0], worst[1]


def _gauss_legendre(n: int = 64):
    return np.polynomial.legendre.leggauss(n)


def build_d2_potential(cost: ArrayFn, nodes: int = 64) -> Callable:
    """Potential of a two-state cost: ``P(p) = int_0^{p_1} (c_1 - c_2)(q, 1 - q) dq``.

    The integral is evaluated by Gauss-Legendre quadrature on ``[0, p_1]``.
    """
    xg, wg = _gauss_legendre(nodes)
    probe = np.asarray(cost(np.array([0.5, 0.5])))
    if probe.shape[-1] != 2:
        raise ValueError("potential synthesis is only available for d = 2")

    def potential(p):
        p = np.asarray(p, dtype=float)
        if p.shape[-1] != 2:
            raise ValueError("potential synthesis is only available for d = 2")
        p1 = p[..., 0]
        q = 0.5 * p1[..., None] * (xg + 1.0)
        pts = np.stack([q, 1.0 - q], axis=-1)
        c = cost(pts)
        diff = c[..., 0] - c[..., 1]
        return 0.5 * p1 * np.sum(wg * diff, axis=-1)

    return potential


def zero_model(d: int = 2, T: float = 1.0) -> ModelSpec:
    """All costs and potentials identically zero."""
    return ModelSpec(
        d=d,
        T=T,
        f=lambda p: np.zeros(np.shape(p)),
        g=lambda p: np.zeros(np.shape(p)),
        F=lambda p: np.zeros(np.shape(p)[:-1]),
        G=lambda p: np.zeros(np.shape(p)[:-1]),
        M=None,
        name="zero",
    )


def builtin_example_d2(T: float = 3.0) -> ModelSpec:
    """Two-state benchmark: no running cost, terminal costs ``-(2p_1 - 1)`` and ``2p_1 - 1``.

    The terminal potential is ``G(p) = 2 p_1 p_2`` and the cap is ``M = 2``.
    """

    def g(p):
        p = np.asarray(p, dtype=float)
        m = 2.0 * p[..., 0] - 1.0
        return np.stack([-m, m], axis=-1)

    return ModelSpec(
        d=2,
        T=T,
        f=lambda p: np.zeros(np.shape(p)),
        g=g,
        F=lambda p: np.zeros(np.shape(p)[:-1]),
        G=lambda p: 2.0 * np.asarray(p)[..., 0] * np.asarray(p)[..., 1],
        M=2.0,
        name="d2_benchmark",
        info={"f_sup": 0.0, "g_sup": 1.0},
    )


def potential_model(d: int, T: float, F, gradF, G, gradG, M: float | None = None, name: str = "potential") -> ModelSpec:
    """Model whose costs are ambient gradients of smooth potentials.

    Any ambient gradient is a valid cost: its centred version is the intrinsic gradient.
    """
    return ModelSpec(d=d, T=T, f=gradF, g=gradG, F=F, G=G, M=M, name=name)


def random_potential_model(d: int, T: float, seed: int, scale: float = 0.5) -> ModelSpec:
    """Smooth random potentials ``1/2 p^T A p + c * sum_k sin(omega_k . p)`` for testing."""
    rng = np.random.Generator(np.random.Philox(key=[seed, 7]))
    params = []
    for _ in range(2):
        A = rng.normal(size=(d, d)) * scale
        A = 0.5 * (A + A.T)
        omega = rng.normal(size=(2, d)) * 2.0
        c = rng.normal(size=2) * scale * 0.5
        params.append((A, omega, c))

    def make(A, omega, c):
        def pot(p):
            p = np.asarray(p, dtype=float)
            quad = 0.5 * np.einsum("...i,ij,...j->...", p, A, p)
            return quad + np.sum(c * np.sin(p @ omega.T), axis=-1)

        def grad(p):
            p = np.asarray(p, dtype=float)
            return p @ A + np.cos(p @ omega.T) * c @ omega

        return pot, grad

    F, gradF = make(*params[0])
    G, gradG = make(*params[1])
    return potential_model(d, T, F, gradF, G, gradG, name=f"random_potential_{seed}")


BUILTIN_MODELS = {
    "d2_benchmark": lambda d, T: builtin_example_d2(T),
    "zero": lambda d, T: zero_model(d, T),
}
