import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from potmfg.model import (
    NoiseConfig,
    a_star,
    build_d2_potential,
    builtin_example_d2,
    control_matrix,
    cutoff_phi,
    hamiltonian_H,
    hamiltonian_HtildeM,
    hamiltonian_scriptH,
    htilde_all,
    lagrangian,
    potential_model,
    potential_residual,
    random_potential_model,
    zero_model,
)

rng = np.random.default_rng(2)


def test_lagrangian_examples():
    assert lagrangian(0, np.zeros((3, 3))) == 0.0
    assert lagrangian(0, np.array([[0.0, 2.0], [0.0, 0.0]])) == pytest.approx(2.0)
    a = np.zeros((3, 3))
    a[0, 1], a[0, 2] = 1.0, 2.0
    assert lagrangian(0, a) == pytest.approx(2.5)


@pytest.mark.parametrize("r, expected", [(-1.0, 0.0), (0.5, 0.5), (3.0, 2.0)])
def test_a_star_branches(r, expected):
    assert a_star(r, 2.0) == expected


@settings(max_examples=200, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0.1, 5))
def test_a_star_monotone_and_lipschitz(r1, r2, M):
    lo, hi = sorted((r1, r2))
    assert a_star(lo, M) <= a_star(hi, M)
    assert abs(a_star(r1, M) - a_star(r2, M)) <= abs(r1 - r2) + 1e-15


def test_a_star_rejects_nonpositive_cap():
    with pytest.raises(ValueError):
        a_star(1.0, 0.0)


def test_control_matrix_rows_sum_to_zero_and_cap_enforced():
    off = rng.uniform(0, 2, size=(4, 4))
    alpha = control_matrix(off, 2.0)
    np.testing.assert_allclose(alpha.sum(axis=1), 0.0, atol=1e-14)
    with pytest.raises(ValueError):
        control_matrix(np.array([[0, 3.0], [0, 0]]), 2.0)
    with pytest.raises(ValueError):
        control_matrix(np.array([[0, -1.0], [0, 0]]), 2.0)


@pytest.mark.parametrize("u, expected", [([0.0, 0.0], 0.0), ([1.0, -1.0], -0.5), ([2.0, 3.0], -6.5)])
def test_hamiltonian_H_examples(u, expected):
    assert hamiltonian_H(u) == pytest.approx(expected)


def test_truncated_hamiltonian_examples():
    assert hamiltonian_HtildeM(0, [3.0, 3.0, 3.0], 2.0) == 0.0
    assert hamiltonian_HtildeM(0, [1.0, 0.0], 2.0) == pytest.approx(-0.5)
    assert hamiltonian_HtildeM(0, [1.0, 0.0], 2.0) == pytest.approx(hamiltonian_H([1.0]))
    assert hamiltonian_HtildeM(0, [5.0, 0.0], 2.0) == pytest.approx(-8.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=4), st.floats(-100, 100), st.floats(0.2, 4))
def test_truncated_hamiltonian_shift_invariant(w, c, M):
    w = np.asarray(w)
    np.testing.assert_allclose(htilde_all(w + c, M), htilde_all(w, M), atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=2, max_size=4))
def test_truncated_equals_untruncated_below_cap(w):
    w = np.asarray(w)
    M = 2.0  # all differences at most 2
    for i in range(w.size):
        diffs = np.delete(w[i] - w, i)
        assert hamiltonian_HtildeM(i, w, M) == pytest.approx(hamiltonian_H(diffs), abs=1e-12)


@pytest.mark.parametrize("d", [2, 3])
def test_truncated_hamiltonian_equals_brute_force_minimum(d):
    M = 1.5
    grid = np.linspace(0.0, M, 101)
    for _ in range(10):
        w = rng.normal(scale=1.5, size=d)
        for i in range(d):
            others = [j for j in range(d) if j != i]
            best = np.inf
            argmin = None
            for combo in itertools.product(grid, repeat=d - 1):
                a = np.asarray(combo)
                val = np.sum(a * (w[others] - w[i]) + 0.5 * a * a)
                if val < best:
                    best, argmin = val, a
            assert hamiltonian_HtildeM(i, w, M) == pytest.approx(best, abs=1e-4)
            np.testing.assert_allclose(argmin, a_star(w[i] - w[others], M), atol=grid[1])


def test_script_hamiltonian_reduces_without_repulsion():
    p = np.array([0.2, 0.5, 0.3])
    w = np.array([0.4, -1.0, 2.0])
    val, _ = hamiltonian_scriptH(p, w, 2.0)
    assert val == pytest.approx(sum(p[i] * hamiltonian_HtildeM(i, w, 2.0) for i in range(3)))
    val0, _ = hamiltonian_scriptH(p, np.full(3, 0.7), 2.0, phi=lambda q: 1 / q)
    assert val0 == 0.0


def test_script_hamiltonian_gradient_matches_finite_differences():
    cfg = NoiseConfig(0.2, theta=0.05, delta=0.2, kappa0=0.1, kappa2=0.01)
    M = 1.0
    checked = 0
    step = 1e-6
    while checked < 200:
        d = rng.integers(2, 5)
        p = rng.dirichlet(np.ones(d))
        w = rng.normal(scale=0.8, size=d)
        diffs = np.abs(w[:, None] - w[None, :])
        if np.min(diffs + np.eye(d) * 10) < 1e-3 or np.min(np.abs(diffs - M) + np.eye(d) * 10) < 1e-3:
            continue  # skip samples near the kinks of the clamp
        _, grad = hamiltonian_scriptH(p, w, M, cfg.phi)
        fd = np.empty(d)
        for i in range(d):
            e = np.zeros(d)
            e[i] = step
            fd[i] = (hamiltonian_scriptH(p, w + e, M, cfg.phi)[0] - hamiltonian_scriptH(p, w - e, M, cfg.phi)[0]) / (
                2 * step
            )
        np.testing.assert_allclose(grad, fd, atol=1e-6)
        checked += 1


def test_cutoff_plateaus_and_scaling():
    cfg = NoiseConfig(0.1, theta=0.02, delta=0.1, kappa0=0.5, kappa2=5.0)
    assert cfg.kappa_eps == pytest.approx(500.0)
    phi, _ = cutoff_phi(np.array([0.0, cfg.theta, 2 * cfg.theta, cfg.delta, 3 * cfg.delta]), cfg)
    np.testing.assert_allclose(phi, [500.0, 500.0, 0.5, 0.5, 0.0], rtol=0, atol=1e-12)


def test_cutoff_monotone_continuous_and_within_envelope():
    cfg = NoiseConfig(0.3, theta=0.01, delta=0.05, kappa0=0.2, kappa2=0.09)
    r = np.linspace(0.0, 0.2, 10_000)
    phi, dphi = cutoff_phi(r, cfg)
    assert np.all(np.diff(phi) <= 1e-12)
    assert np.max(np.abs(np.diff(phi))) < 0.01 * cfg.kappa_eps
    assert np.max(np.abs(dphi) - cfg.dphi_envelope(r)) <= 0.0
    mid = 0.5 * (r[1:] + r[:-1])
    np.testing.assert_allclose(np.diff(phi) / np.diff(r), cfg.dphi(mid), atol=1e-3 * cfg.kappa_eps / cfg.theta)


def test_non_monotone_noise_config_rejected():
    with pytest.raises(ValueError, match="non-monotone"):
        NoiseConfig(0.5, theta=0.01, delta=0.05, kappa0=1.0, kappa2=0.1)
    with pytest.raises(ValueError):
        NoiseConfig(0.2, theta=0.04, delta=0.05, kappa0=0.1, kappa2=1.0)


def test_two_state_potential_from_terminal_cost():
    model = builtin_example_d2(3.0)
    G = build_d2_potential(model.g)
    p1 = np.linspace(0, 1, 21)
    pts = np.stack([p1, 1 - p1], axis=1)
    np.testing.assert_allclose(G(pts) - G(pts[:1]), 2 * p1 * (1 - p1), atol=1e-12)


def test_two_state_potential_of_zero_and_constant_difference():
    F0 = build_d2_potential(lambda p: np.zeros(np.shape(p)))
    assert np.all(F0(np.array([[0.3, 0.7], [0.9, 0.1]])) == 0.0)
    F = build_d2_potential(lambda p: np.stack([np.full(np.shape(p)[:-1], 2.0), np.zeros(np.shape(p)[:-1])], -1))
    np.testing.assert_allclose(F(np.array([[0.3, 0.7]])), [0.6], atol=1e-12)
    m = potential_model(2, 1.0, F, lambda p: np.stack([np.full(np.shape(p)[:-1], 2.0), np.zeros(np.shape(p)[:-1])], -1),
                        lambda p: np.zeros(np.shape(p)[:-1]), lambda p: np.zeros(np.shape(p)))
    assert max(potential_residual(m)) <= 1e-6


def test_potential_synthesis_rejects_more_states():
    with pytest.raises(ValueError):
        build_d2_potential(lambda p: np.zeros(np.shape(p)[:-1] + (3,)))


def test_builtin_two_state_model():
    model = builtin_example_d2(3.0)
    assert model.M == 2.0
    assert model.G(np.array([0.5, 0.5])) == pytest.approx(0.5)
    assert max(potential_residual(model, step=1 / 200)) <= 1e-10
    np.testing.assert_allclose(model.g(np.array([0.75, 0.25])), [-0.5, 0.5])
    assert builtin_example_d2(1.0).M == 2.0


def test_auto_cap_and_zero_model():
    model = zero_model(3, 2.0)
    assert model.M == 1.0
    assert np.all(model.F(np.array([[0.2, 0.3, 0.5]])) == 0.0)
    rnd = random_potential_model(3, 1.0, 4)
    assert rnd.M == pytest.approx(2 * (rnd.info["g_sup"] + rnd.T * rnd.info["f_sup"]))
    assert rnd.info["sup_sample_size"] > 1000


@pytest.mark.parametrize("d", [2, 3])
def test_random_potentials_satisfy_potential_relation(d):
    for seed in range(3):
        assert max(potential_residual(random_potential_model(d, 1.0, seed))) <= 1e-6


def test_model_rejects_bad_data():
    with pytest.raises(ValueError):
        zero_model(1, 1.0)
    with pytest.raises(ValueError):
        zero_model(2, 0.0)
