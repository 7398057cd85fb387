import logging

import numpy as np
import pytest

from conftest import simplex_point
from potmfg import viscous
from potmfg.inviscid import gradient_field, hjb_solve, rollout_feedback
from potmfg.model import NoiseConfig, zero_model
from potmfg.selection import (
    ConvergenceReport,
    MonteCarloSettings,
    SelectionSchedule,
    build_reference,
    compact_starts,
    interior_mask,
    run_sweep,
    static_trajectory,
    symmetry_check,
    trajectory_distance,
    value_selection_check,
)
from potmfg.simplex import GridField, SimplexGrid


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------


def test_schedule_defaults(d2_model):
    sched = SelectionSchedule((0.3, 0.2, 0.1))
    assert sched.kappa2 is None
    with pytest.raises(ValueError, match="kappa2"):
        sched.config(0.2)
    bound = sched.for_model(d2_model)
    assert bound.kappa2 == pytest.approx(5.0 * d2_model.M)
    for eps in bound.eps_list:
        cfg = bound.config(eps)
        assert 2 * cfg.theta <= cfg.delta <= 0.5
        assert cfg.delta == pytest.approx(0.01 * np.sqrt(eps))
        assert cfg.kappa_eps == pytest.approx(bound.kappa2 / eps**2)
        assert cfg.kappa_eps >= cfg.kappa0


def test_schedule_keeps_explicit_kappa2(d2_model):
    sched = SelectionSchedule((0.2,), kappa2=0.5).for_model(d2_model)
    assert sched.kappa2 == 0.5


def test_schedule_parameters_vanish_with_noise():
    sched = SelectionSchedule((0.3, 0.2, 0.1, 0.01), kappa2=1.0)
    deltas = [sched.delta(e) for e in sched.eps_list]
    assert all(b < a for a, b in zip(deltas, deltas[1:]))
    assert sched.theta(1e-8) < 1e-5


@pytest.mark.parametrize(
    "kwargs, message",
    [
        (dict(eps_list=(0.2, 0.3)), "decreasing"),
        (dict(eps_list=()), "empty"),
        (dict(eps_list=(0.3,), prefactor=1.0), "delta"),
        (dict(eps_list=(0.3,), a=0.0), "exponent"),
        (dict(eps_list=(0.3,), kappa2=1e-4), "kappa_eps"),
        (dict(eps_list=(0.3,), kappa2=-1.0), "kappa2"),
        (dict(eps_list=(1.5,)), "noise levels"),
    ],
)
def test_schedule_rejects_invalid_settings(kwargs, message):
    with pytest.raises(ValueError, match=message):
        SelectionSchedule(**kwargs)


def test_schedule_warns_about_weak_floor(caplog):
    with caplog.at_level(logging.WARNING, logger="potmfg.selection"):
        SelectionSchedule((0.5,), kappa0=0.01, kappa2=1.0)
    assert "below eps^2/2" in caplog.text


# ---------------------------------------------------------------------------
# Starts and masks
# ---------------------------------------------------------------------------


def test_compact_starts_two_states():
    starts = compact_starts(2, 0.1)
    m = [2 * p[0] - 1 for p in starts]
    assert np.allclose(m, [-0.8, -0.4, 0.0, 0.4, 0.8])


def test_compact_starts_three_states():
    starts = compact_starts(3, 0.1)
    assert len(starts) == 4
    for p in starts:
        assert p.sum() == pytest.approx(1.0)
        assert p.min() >= 0.1 - 1e-12


def test_interior_mask():
    grid = SimplexGrid(3, 1 / 10)
    mask = interior_mask(grid, 0.2)
    assert np.all(grid.p[mask] >= 0.2 - 1e-12)
    assert mask.sum() == SimplexGrid.expected_size(3, 1 / 4)


# ---------------------------------------------------------------------------
# Trajectory distance
# ---------------------------------------------------------------------------


def test_deterministic_ensemble_on_a_minimizer(d2_model, d2_value):
    V = gradient_field(d2_value)
    p0 = simplex_point(0.5)
    roll = rollout_feedback(d2_model, V, 0.0, p0[None, :], n_steps=3000)
    minimizer = static_trajectory(p0, d2_model.T)
    minimizer.times, minimizer.p = roll.times, roll.p[:, 0]
    ens = viscous.simulate(d2_model, NoiseConfig.inviscid(), p0, 1e-3, 3, 0, feedback=V)
    dist, weights, nearest = trajectory_distance(ens, [minimizer, static_trajectory(p0, d2_model.T)])
    assert dist <= 5e-3
    assert weights.tolist() == [1.0, 0.0]
    assert np.all(nearest == 0)


def test_trajectory_distance_rejects_empty_set(d2_model):
    times = np.linspace(0.0, 1.0, 2)
    ens = viscous.simulate(zero_model(2, 1.0), NoiseConfig(0.1), simplex_point(0.0), 1e-2, 4, 0,
                           alpha_path=(times, np.zeros((2, 2, 2))))
    with pytest.raises(ValueError, match="empty"):
        trajectory_distance(ens, [])


def test_assignment_weights_sum_to_one():
    model = zero_model(2, 1.0)
    times = np.linspace(0.0, 1.0, 2)
    ens = viscous.simulate(model, NoiseConfig(0.3), simplex_point(0.0), 1e-2, 200, 4,
                           alpha_path=(times, np.zeros((2, 2, 2))))
    refs = [static_trajectory(simplex_point(m), 1.0) for m in (-0.3, 0.0, 0.3)]
    _, weights, _ = trajectory_distance(ens, refs)
    assert weights.sum() == pytest.approx(1.0)
    assert weights[1] > weights[0] and weights[1] > weights[2]


# ---------------------------------------------------------------------------
# Value selection
# ---------------------------------------------------------------------------


def test_value_selection_for_zero_model():
    model = zero_model(2, 1.0)
    grid = SimplexGrid(2, 1 / 20)
    value = hjb_solve(model, grid)
    U = GridField(grid, value.times, np.zeros((value.times.size, grid.size, 2)))
    times = np.array([0.0, 0.5])
    region = np.ones((2, grid.size), dtype=bool)
    out = value_selection_check(U, value, region, times)
    assert out["l1"] == 0.0 and out["mean"] == 0.0


@pytest.fixture(scope="module")
def reference(d2_model, d2_grid):
    return build_reference(d2_model, d2_grid)


def test_reference_region_excludes_the_centre(reference, d2_grid):
    m = 2 * d2_grid.p[:, 0] - 1
    excluded = m[~reference.region[0] & interior_mask(d2_grid, 0.1)]
    assert excluded.size > 0 and np.max(np.abs(excluded)) <= 0.1
    assert 0 in reference.u_ref


def per_state_value(model, grid, cfg):
    V = viscous.extract_V(viscous.hjb_solve_viscous(model, cfg, grid))
    Y = viscous.solve_Y(V, model, cfg)
    return viscous.reconstruct_U(V, Y)


def test_value_selection_error_decreases(d2_model, d2_grid, reference):
    sched = SelectionSchedule((0.3, 0.2, 0.1)).for_model(d2_model)
    l1 = []
    for eps in sched.eps_list:
        U = per_state_value(d2_model, d2_grid, sched.config(eps))
        l1.append(value_selection_check(U, reference.value, reference.region, reference.times)["l1"])
    assert l1[0] > l1[1] > l1[2]


def test_value_selection_error_is_local_to_the_kink(d2_model, d2_grid, reference):
    sched = SelectionSchedule((0.2,)).for_model(d2_model)
    U = per_state_value(d2_model, d2_grid, sched.config(0.2))
    err = value_selection_check(U, reference.value, reference.region, reference.times)["error"][0]
    m = 2 * d2_grid.p[:, 0] - 1
    included = np.flatnonzero(reference.region[0])
    edge = included[np.argmin(np.abs(m[included]))]
    for target in (-0.5, 0.5):
        node = int(np.argmin(np.abs(m - target)))
        assert err[node] < 3 * err[edge]


# ---------------------------------------------------------------------------
# Sweep and report
# ---------------------------------------------------------------------------


def test_sweep_of_zero_model_has_zero_gaps(tmp_path):
    model = zero_model(2, 1.0)
    grid = SimplexGrid(2, 1 / 20)
    sched = SelectionSchedule((0.3, 0.2), kappa2=0.5)
    p0 = simplex_point(0.2)
    ref = build_reference(model, grid, trajectories=[static_trajectory(p0, 1.0)])
    report, _ = run_sweep(model, p0, sched, grid, MonteCarloSettings(n_paths=50, dt=1e-2), reference=ref)
    assert [r["status"] for r in report.rows] == ["ok", "ok"]
    for row in report.rows:
        assert row["sup_gap_V"] == 0.0
        assert row["l1_gap_DV"] == 0.0
        assert row["l1_gap_U"] == 0.0
        assert row["xi"] == 0.0
    report.to_csv(tmp_path / "convergence.csv")
    report.write_plot_script(tmp_path / "convergence.gp", "convergence.csv")
    lines = (tmp_path / "convergence.csv").read_text().splitlines()
    assert lines[0].split(",") == ConvergenceReport.COLUMNS + ["w_1", "boundary_hit_rate", "status"]
    assert len(lines) == 3
    script = (tmp_path / "convergence.gp").read_text()
    assert "plot 'convergence.csv'" in script


def test_sweep_records_failures_and_continues(d2_model, tmp_path):
    grid = SimplexGrid(2, 1 / 20)
    sched = SelectionSchedule((0.3, 0.2), kappa2=0.5)
    ref = build_reference(d2_model, grid)
    report, _ = run_sweep(d2_model, simplex_point(0.0), sched, grid, MonteCarloSettings(n_paths=10, dt=1e-2),
                          reference=ref, xi_starts=[np.array([1.0, 0.0])])
    assert [r["eps"] for r in report.rows] == [0.3, 0.2]
    assert all(r["status"].startswith("failed: p0 must be an interior") for r in report.rows)
    report.to_csv(tmp_path / "convergence.csv")
    rows = (tmp_path / "convergence.csv").read_text().splitlines()[1:]
    assert all(line.endswith("failed: p0 must be an interior probability vector") for line in rows)


def test_trend_flags():
    report = ConvergenceReport(
        [dict(eps=0.3, sup_gap_V=0.3, l1_gap_DV=1, l1_gap_U=1, xi=0.2, traj_dist=0.3),
         dict(eps=0.2, sup_gap_V=0.2, l1_gap_DV=2, l1_gap_U=0.5, xi=0.1, traj_dist=0.2),
         dict(eps=0.1, sup_gap_V=0.1, l1_gap_DV=3, l1_gap_U=0.1, xi=np.nan, traj_dist=0.1)],
        n_refs=0,
    )
    trends = report.compute_trends()
    assert trends == {"sup_gap_V": True, "l1_gap_DV": False, "l1_gap_U": True, "xi": False, "traj_dist": True}


def test_symmetry_check_and_static_path():
    model = zero_model(2, 1.0)
    times = np.linspace(0.0, 1.0, 2)
    ens = viscous.simulate(model, NoiseConfig(0.3), simplex_point(0.0), 1e-2, 400, 8,
                           alpha_path=(times, np.zeros((2, 2, 2))))
    mean, se = symmetry_check(ens)
    assert abs(mean) <= 3 * se
    path = static_trajectory(simplex_point(0.4), 2.0, n=11)
    assert path.p.shape == (11, 2) and np.allclose(path.m, 0.4)
