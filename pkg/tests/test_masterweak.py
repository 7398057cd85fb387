import numpy as np
import pytest

from potmfg.inviscid import hjb_solve
from potmfg.masterweak import (
    Bump,
    ChartSamples,
    ConsLaw2,
    LineField,
    bump_battery,
    certify_line,
    cfl_limit_conslaw,
    chart_gradient_field,
    check_support,
    curl_residual,
    entropy_solve,
    hjb_chart_flux,
    jump_locations,
    l1_gap,
    manufactured_upward_jump,
    mollified_terminal_gap,
    oleinik_check,
    reduce_d2,
    resolved_radii,
    samples_from_grid,
    samples_from_line,
    selected_trajectory,
    value_to_line,
    weak_residual,
)
from potmfg.model import builtin_example_d2, potential_model, random_potential_model, zero_model
from potmfg.simplex import GridField, SimplexGrid


def line_law(terminal, T=1.0, M=2.0, source=None):
    return ConsLaw2(T, M, source or (lambda m: np.zeros_like(np.asarray(m, dtype=float))), terminal)


@pytest.fixture(scope="module")
def cl3():
    return reduce_d2(builtin_example_d2(3.0))


@pytest.fixture(scope="module")
def entropy3(cl3):
    return entropy_solve(cl3, 1 / 200)


# ---------------------------------------------------------------------------
# Reduction
# ---------------------------------------------------------------------------


def test_reduction_of_the_benchmark(cl3):
    m = np.linspace(-1, 1, 41)
    assert np.allclose(cl3.terminal(m), 2 * m, atol=1e-15)
    assert np.all(cl3.source(m) == 0.0)
    assert cl3.M == 2.0 and cl3.T == 3.0


def test_reduction_of_symmetric_costs():
    model = potential_model(2, 1.0, F=lambda p: np.sum(p**2, axis=-1), gradF=lambda p: 2 * np.sum(p, axis=-1,
                            keepdims=True) * np.ones(np.shape(p)), G=lambda p: np.sum(p, axis=-1),
                            gradG=lambda p: np.ones(np.shape(p)), M=1.0)
    cl = reduce_d2(model)
    m = np.linspace(-1, 1, 21)
    assert np.all(cl.terminal(m) == 0.0)
    assert np.all(cl.source(m) == 0.0)


def test_reduction_needs_two_states():
    with pytest.raises(ValueError, match="two states"):
        reduce_d2(zero_model(3))


def test_flux_is_concave_in_the_gradient(cl3):
    rng = np.random.default_rng(0)
    m = rng.uniform(-1, 1, 2000)
    Z = rng.uniform(-1.9, 1.9, 2000)
    Z = Z[np.abs(Z) > 1e-3]
    m = m[: Z.size]
    second = cl3.flux_dZZ(m, Z)
    assert np.allclose(second, m * np.sign(Z) - 1.0)
    assert np.all(second <= 0.0)
    step = 1e-4
    fd = (cl3.flux(m, Z + step) - 2 * cl3.flux(m, Z) + cl3.flux(m, Z - step)) / step**2
    assert np.allclose(fd, second, atol=1e-5)
    fd1 = (cl3.flux(m, Z + step) - cl3.flux(m, Z - step)) / (2 * step)
    assert np.allclose(fd1, cl3.flux_dZ(m, Z), atol=1e-7)


# ---------------------------------------------------------------------------
# Entropy solver
# ---------------------------------------------------------------------------


def test_entropy_solver_zero_data():
    Z = entropy_solve(line_law(lambda m: np.zeros_like(m)), 1 / 50)
    assert np.all(Z.values == 0.0)


def test_entropy_solver_rejects_cfl_violation(cl3):
    with pytest.raises(ValueError, match="CFL"):
        entropy_solve(cl3, 1 / 50, dt=0.5)


def test_entropy_terminal_and_maximum_principle(cl3, entropy3):
    assert np.array_equal(entropy3.values[-1], cl3.terminal(entropy3.m))
    assert np.max(np.abs(entropy3.values)) <= cl3.data_bound() + 1e-12


def test_small_horizon_profile_is_continuous():
    Z = entropy_solve(reduce_d2(builtin_example_d2(0.4)), 1 / 200)
    assert jump_locations(Z, 0.0).size == 0


@pytest.mark.parametrize("T", [1.0, 3.0])
def test_long_horizon_profile_jumps_at_the_centre(T):
    Z = entropy_solve(reduce_d2(builtin_example_d2(T)), 1 / 200)
    jumps = jump_locations(Z, 0.0)
    assert jumps.size == 1
    assert abs(jumps[0]) <= 1 / 200


def test_entropy_solution_is_odd(entropy3):
    assert np.max(np.abs(entropy3.values + entropy3.values[:, ::-1])) <= 1e-10


@pytest.mark.parametrize("seed", range(3))
def test_entropy_scheme_is_monotone(seed):
    rng = np.random.default_rng(seed)
    knots = np.linspace(-1, 1, 9)
    low_k = rng.uniform(-1, 1, 9)
    high_k = low_k + rng.uniform(0, 0.5, 9)
    low_law = line_law(lambda m: np.interp(m, knots, low_k))
    high_law = line_law(lambda m: np.interp(m, knots, high_k))
    dt = 0.9 * min(cfl_limit_conslaw(low_law, 1 / 100), cfl_limit_conslaw(high_law, 1 / 100))
    low = entropy_solve(low_law, 1 / 100, dt=dt)
    high = entropy_solve(high_law, 1 / 100, dt=dt)
    assert np.all(low.values <= high.values + 1e-13)


def test_entropy_scheme_is_conservative():
    cl = line_law(lambda m: np.sin(3 * m), T=0.5, source=lambda m: 0.3 * np.cos(np.asarray(m)))
    dm = 1 / 40
    Z = entropy_solve(cl, dm, max_slices=10_000)
    assert Z.values.shape[0] == Z.meta["nsteps"] + 1
    dt = Z.meta["dt"]
    src_total = float(np.sum(cl.source(Z.m)) * dm)
    reversed_values = Z.values[::-1]
    for k in range(reversed_values.shape[0] - 1):
        before, after = reversed_values[k], reversed_values[k + 1]
        wall = cl.flux(1.0, before[-1]) - cl.flux(-1.0, before[0])
        change = float(np.sum(after - before) * dm)
        assert change == pytest.approx(-dt * wall + dt * src_total, abs=1e-13)


def test_entropy_and_value_gradient_agree_under_refinement(cl3):
    model = builtin_example_d2(3.0)
    gaps = []
    for h in (1 / 50, 1 / 100, 1 / 200):
        line = value_to_line(hjb_solve(model, SimplexGrid(2, h)))
        gaps.append(l1_gap(entropy_solve(cl3, h), line))
    assert gaps[0] > gaps[1] > gaps[2]


# ---------------------------------------------------------------------------
# Selected paths
# ---------------------------------------------------------------------------


def test_selected_path_without_field():
    Z = LineField(np.array([0.0, 1.0]), np.linspace(-0.99, 0.99, 100), np.zeros((2, 100)))
    paths = selected_trajectory(Z, line_law(lambda m: np.zeros_like(m)), 0.3)
    assert len(paths) == 1
    assert np.allclose(paths[0].m, 0.3, atol=1e-15)


def test_selected_branches_at_the_centre(cl3, entropy3):
    paths = selected_trajectory(entropy3, cl3, 0.0)
    assert len(paths) == 2
    assert np.max(np.abs(paths[0].m + paths[1].m)) <= 1e-3
    assert paths[1].m[-1] > 0.5


def test_selected_path_rejects_boundary_start(cl3, entropy3):
    with pytest.raises(ValueError):
        selected_trajectory(entropy3, cl3, 1.0)


# ---------------------------------------------------------------------------
# Test battery
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("n", [1, 2])
def test_battery_is_rich_and_inside(n):
    battery = bump_battery(n, 1.0)
    assert len(battery) >= 25
    assert len({fn.rx for fn in battery}) == 3
    for fn in battery:
        check_support(fn, 1.0)


def test_support_touching_the_boundary_is_rejected():
    with pytest.raises(ValueError, match="boundary"):
        check_support(Bump(0.5, (0.05,), 0.1, 0.1), 1.0)
    with pytest.raises(ValueError, match=r"\(0, T\)"):
        check_support(Bump(0.05, (0.5,), 0.1, 0.1), 1.0)


def test_bump_derivatives_match_finite_differences():
    fn = Bump(0.5, (0.3, 0.25), 0.2, 0.15)
    t = np.array([0.45])
    x = np.array([[0.33, 0.27]])
    _, phi_t, grad = fn.evaluate(t, x)
    step = 1e-6
    ft = (fn.evaluate(t + step, x)[0] - fn.evaluate(t - step, x)[0]) / (2 * step)
    assert phi_t[0, 0] == pytest.approx(ft[0, 0], rel=1e-6)
    for k in range(2):
        e = np.zeros(2)
        e[k] = step
        fx = (fn.evaluate(t, x + e)[0] - fn.evaluate(t, x - e)[0]) / (2 * step)
        assert grad[0, 0, k] == pytest.approx(fx[0, 0], rel=1e-6)


# ---------------------------------------------------------------------------
# Weak residual
# ---------------------------------------------------------------------------


def transport_samples(dx, nt=201, speed=0.3, T=1.0, exact=True):
    x = np.arange(dx / 2, 1.0, dx)[:, None]
    times = np.linspace(0.0, T, nt)
    if exact:
        Z = np.sin(2 * np.pi * (x[None, :, 0] - speed * times[:, None]))[..., None]
    else:
        Z = np.random.default_rng(0).normal(size=(nt, x.shape[0], 1))
    return ChartSamples(times, x, Z, dx)


def linear_flux(speed=0.3):
    return lambda p, z: speed * z[..., 0]


def test_weak_residual_of_smooth_transport():
    dx = 1 / 400
    res = weak_residual(transport_samples(dx, nt=401), linear_flux(), bump_battery(1, 1.0, radii=resolved_radii(dx)))
    assert res["max"] <= 1e-3
    assert res["count"] >= 25


def test_weak_residual_rejects_random_field():
    battery = bump_battery(1, 1.0)
    good = weak_residual(transport_samples(1 / 200), linear_flux(), battery)["max"]
    bad = weak_residual(transport_samples(1 / 200, exact=False), linear_flux(), battery)["max"]
    assert bad > 10 * good


def test_weak_residual_of_value_gradient_matches_entropy_field(cl3, entropy3, d2_value, d2_model):
    flux = hjb_chart_flux(d2_model)
    battery = bump_battery(1, 3.0)
    from_value = value_to_line(d2_value)
    r_value = weak_residual(samples_from_line(from_value), flux, battery)["max"]
    r_entropy = weak_residual(samples_from_line(entropy3), flux, battery)["max"]
    for fld, r in ((from_value, r_value), (entropy3, r_entropy)):
        dt = fld.times[1] - fld.times[0]
        assert r <= 10 * (fld.dm + dt) * (1 + np.max(np.abs(fld.values)))
    assert max(r_value, r_entropy) <= 10 * min(r_value, r_entropy)


# ---------------------------------------------------------------------------
# Curl
# ---------------------------------------------------------------------------


RESOLVED_SPATIAL = (0.25, 0.2, 0.15)


def test_resolved_radii_grow_with_the_mesh():
    assert resolved_radii(1 / 400) == pytest.approx((0.1, 0.075, 0.05))
    assert min(resolved_radii(1 / 80)) == pytest.approx(8 / 80)
    assert len(bump_battery(2, 1.0, radii=resolved_radii(1 / 80), spatial_only=True)) >= 25


def test_discrete_gradient_is_curl_free():
    battery = bump_battery(2, 1.0, radii=RESOLVED_SPATIAL, spatial_only=True)
    residuals = []
    for h in (1 / 40, 1 / 80):
        grid = SimplexGrid(3, h)
        vals = np.sin(3 * grid.p[:, 0]) * np.cos(2 * grid.p[:, 1]) + grid.p[:, 0] ** 2
        fld = chart_gradient_field(GridField(grid, [0.0, 1.0], np.stack([vals, vals])))
        residuals.append(curl_residual(samples_from_grid(fld), battery)["max"])
    assert residuals[1] <= 2 * (1 / 80)
    assert residuals[1] <= 0.5 * residuals[0]


def test_curl_rejects_space_time_bumps():
    grid = SimplexGrid(3, 1 / 20)
    fld = GridField(grid, [0.0, 1.0], np.zeros((2, grid.size, 2)))
    with pytest.raises(ValueError, match="spatial"):
        curl_residual(samples_from_grid(fld), [Bump(0.5, (0.3, 0.3), 0.2, 0.15)])


def test_rotated_field_has_curl():
    grid = SimplexGrid(3, 1 / 40)
    Z = np.stack([-grid.x[:, 1], grid.x[:, 0]], axis=1)
    fld = GridField(grid, [0.0, 1.0], np.stack([Z, Z]))
    battery = bump_battery(2, 1.0, spatial_only=True)
    res = curl_residual(samples_from_grid(fld), battery)
    assert res["max"] >= 0.1 * max(fn.rx for fn in battery)


def test_value_gradient_of_three_state_model_is_curl_free():
    model = random_potential_model(3, 1.0, 0)
    battery = bump_battery(2, 1.0, radii=RESOLVED_SPATIAL, spatial_only=True)
    residuals = []
    for h in (1 / 40, 1 / 80):
        fld = chart_gradient_field(hjb_solve(model, SimplexGrid(3, h)))
        residuals.append(curl_residual(samples_from_grid(fld), battery)["max"])
    assert residuals[0] <= 5 * (1 / 40)
    assert residuals[1] <= 5 * (1 / 80)


def test_single_component_has_no_curl(entropy3):
    assert curl_residual(samples_from_line(entropy3), bump_battery(1, 3.0, spatial_only=True))["applicable"] is False


# ---------------------------------------------------------------------------
# One-sided slope bound
# ---------------------------------------------------------------------------


def test_oleinik_of_decreasing_line():
    m = np.linspace(-0.99, 0.99, 100)
    fld = LineField(np.array([0.0, 1.0]), m, np.tile(-m, (2, 1)))
    assert oleinik_check(fld)["c_max"] == pytest.approx(-1.0)


def test_oleinik_rejects_upward_jump():
    slopes = [oleinik_check(manufactured_upward_jump(dm))["c_max"] for dm in (1 / 50, 1 / 100, 1 / 200)]
    assert slopes[0] == pytest.approx(2 / (1 / 50))
    assert slopes[2] == pytest.approx(2 * slopes[1]) == pytest.approx(4 * slopes[0])


def test_oleinik_of_entropy_gradient(cl3):
    upper, lower = [], []
    for dm in (1 / 100, 1 / 200, 1 / 400):
        oriented = entropy_solve(cl3, dm).oriented()
        upper.append(oleinik_check(oriented)["c_max"])
        slope0 = np.diff(oriented.values[0]) / dm
        lower.append(float(slope0.min()))
        centre = 0.5 * (oriented.m[:-1] + oriented.m[1:])[np.argmin(slope0)]
        assert abs(centre) <= 2 * dm
    assert max(upper) <= 0.1
    assert lower[1] <= 1.5 * lower[0] and lower[2] <= 1.5 * lower[1]


def test_oleinik_on_chart_samples():
    grid = SimplexGrid(3, 1 / 40)
    vals = -0.5 * np.sum(grid.x**2, axis=1)
    fld = chart_gradient_field(GridField(grid, [0.0, 1.0], np.stack([vals, vals])))
    out = oleinik_check(samples_from_grid(fld), bump_battery(2, 1.0, radii=RESOLVED_SPATIAL, spatial_only=True))
    assert out["c_max"] == pytest.approx(-1.0, abs=0.05)
    with pytest.raises(ValueError, match="battery"):
        oleinik_check(samples_from_grid(fld))


# ---------------------------------------------------------------------------
# Certificate
# ---------------------------------------------------------------------------


def test_mollified_terminal_gap_shrinks(cl3, entropy3):
    gaps = mollified_terminal_gap(entropy3, cl3.terminal)
    assert gaps[0] > gaps[1] > gaps[2]


def test_entropy_fields_are_certified(cl3, d2_model):
    fields = [entropy_solve(cl3, dm) for dm in (1 / 100, 1 / 200)]
    cert = certify_line(fields, cl3, d2_model)
    assert cert.admissible
    assert cert.lines()[-1] == "admissible (discrete): yes"


def test_upward_jump_is_not_certified(cl3, d2_model):
    fields = [manufactured_upward_jump(dm, T=3.0).oriented() for dm in (1 / 100, 1 / 200)]
    cert = certify_line(fields, cl3, d2_model)
    assert not cert.admissible


def test_line_field_csv_round_trip(tmp_path, entropy3):
    entropy3.to_csv(tmp_path / "z.csv")
    back = LineField.from_csv(tmp_path / "z.csv")
    assert np.array_equal(back.values, entropy3.values)
    assert np.array_equal(back.m, entropy3.m)
    assert np.array_equal(back.times, entropy3.times)
