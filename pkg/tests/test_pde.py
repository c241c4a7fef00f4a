"""Backward parabolic field solves against the identity closed form."""

import numpy as np
import pytest

from fbsdelab import (
    ConfigError,
    FieldBank,
    ShapeError,
    build_problem,
    discrete_residual,
    field_bounds,
    field_gap,
    fit_rate,
    limit_field,
    make_grid,
    solve_parabolic,
)


@pytest.fixture(scope="module")
def linear():
    return build_problem("linear")


@pytest.fixture(scope="module")
def grid(linear):
    return make_grid(linear, 81, 61)


def test_linear_field_is_identity_at_any_noise(linear, grid):
    field = solve_parabolic(linear, grid, 0.5)
    mesh = grid.mesh()[None, ...]
    err = np.max(np.abs(field.u_values - np.broadcast_to(mesh[0][..., :],
                                                         field.u_values.shape)))
    assert err < 1e-8
    bounds = field_bounds(field, linear)
    assert bounds.terminal_mismatch < 1e-12
    # du/dx = 1 everywhere, including one-sided stencils at the edges
    assert np.max(np.abs(field.grad_values - 1.0)) < 1e-8


def test_field_evaluation_and_gradient(linear, grid):
    field = solve_parabolic(linear, grid, 0.1)
    x = np.array([[0.37], [-1.82]])
    np.testing.assert_allclose(field.evaluate(0.25, x), x, atol=1e-8)
    np.testing.assert_allclose(field.gradient(0.25, x), 1.0, atol=1e-8)
    with pytest.raises(ValueError):
        field.evaluate(0.25, np.array([[99.0]]))
    with pytest.raises(ValueError):
        field.gradient(0.25, np.array([[-99.0]]))


def test_field_gap_requires_identical_grids(linear, grid):
    field = solve_parabolic(linear, grid, 0.3)
    other = solve_parabolic(linear, make_grid(linear, 81, 41), 0.3)
    with pytest.raises(ShapeError):
        field_gap(field, other)
    assert field_gap(field, field) == 0.0


def test_coarse_time_grid_rejected(linear):
    # dt > dx / max|f| over the box: the explicit advection would be unstable.
    with pytest.raises(ConfigError):
        solve_parabolic(linear, make_grid(linear, 5, 201), 0.1)


def test_epsilon_outside_unit_interval_rejected(linear, grid):
    with pytest.raises(ConfigError):
        solve_parabolic(linear, grid, 1.5)


def test_discrete_residual_small_for_linear(linear, grid):
    field = solve_parabolic(linear, grid, 0.3)
    assert discrete_residual(field, linear) < 1e-7


def test_limit_field_matches_viscous_solves(linear, grid):
    lim = limit_field(linear, grid)
    assert lim.epsilon == 0.0
    assert lim.boundary_source == "limit"
    gap = field_gap(solve_parabolic(linear, grid, 0.03), lim)
    assert gap < 1e-8


def test_field_bank_caches_and_serves_limit(linear, grid):
    bank = FieldBank(linear, grid)
    f1 = bank.get(0.1)
    assert bank.get(0.1) is f1
    f0 = bank.get(0.0)
    assert f0.boundary_source == "limit"
    assert bank.get(0.0) is f0
    det = bank.deterministic_path()
    np.testing.assert_allclose(det.x_values[0], linear.x0)


def test_tanh_field_gap_scales_like_root_epsilon():
    # The asymptotic field deviation for the z-coupled problem decays like
    # sqrt(eps); the fitted log-log slope on the default grid should say so.
    prob = build_problem("tanh")
    grid = make_grid(prob, 81, 61)
    bank = FieldBank(prob, grid)
    lim = bank.get(0.0)
    eps = list(prob.epsilon_grid)
    gaps = [field_gap(bank.get(e), lim) for e in eps]
    fit = fit_rate(eps, gaps)
    assert fit.slope == pytest.approx(0.5, abs=0.05)
