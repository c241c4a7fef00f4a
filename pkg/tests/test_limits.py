"""Zero-noise two-point boundary solvers against closed forms."""

import numpy as np
import pytest

from fbsdelab import (
    ContractionError,
    build_problem,
    limit_u,
    modulus_fit,
    solve_bvp_picard,
    solve_bvp_shooting,
)


def test_shooting_matches_exponential_decay():
    # With f = -2y, g = 2x and the identity field, the limit pair collapses
    # to x' = -2x, so both components are x0 exp(-2 s).
    prob = build_problem("linear")
    sol = solve_bvp_shooting(prob, 0.0, [1.0])
    exact = np.exp(-2.0 * sol.t_nodes)[:, None]
    assert sol.method == "shooting"
    assert sol.residual < 1e-9
    np.testing.assert_allclose(sol.x_values, exact, atol=1e-9)
    np.testing.assert_allclose(sol.y_values, sol.x_values, atol=1e-9)


def test_shooting_flat_terminal_constant_backward():
    prob = build_problem("flat-terminal", c=0.75)
    sol = solve_bvp_shooting(prob, 0.0, [0.3])
    np.testing.assert_allclose(sol.y_values, 0.75, atol=1e-10)


def test_picard_agrees_with_shooting_on_short_horizon():
    prob = build_problem("linear", horizon=0.2)
    a = solve_bvp_shooting(prob, 0.0, [1.0])
    b = solve_bvp_picard(prob, 0.0, [1.0])
    assert b.method == "picard"
    np.testing.assert_allclose(b.y_values, a.y_values, atol=1e-6)


def test_picard_reports_non_contraction_on_long_horizon():
    prob = build_problem("linear")   # T = 0.5 is too long for the sweep
    with pytest.raises(ContractionError) as exc:
        solve_bvp_picard(prob, 0.0, [1.0])
    assert len(exc.value.residuals) >= 4


def test_picard_tanh_converges_with_budget():
    prob = build_problem("tanh")
    sweep = solve_bvp_picard(prob, 0.0, [1.0], max_iter=300)
    shot = solve_bvp_shooting(prob, 0.0, [1.0])
    np.testing.assert_allclose(sweep.y_values, shot.y_values, atol=1e-6)


def test_asymmetric_tanh_shooting_needs_newton_steps():
    # With a != b the diagonal Y = X is no longer invariant, so the initial
    # guess eta = h(x) is wrong and the batched Newton iteration has to do
    # real work (regression test for the stacked linear solve).
    prob = build_problem("tanh", b=1.25)
    sol = solve_bvp_shooting(prob, 0.0, [1.0])
    assert sol.residual < 1e-9
    assert abs(sol.y_values[0, 0] - 1.0) > 0.05


def test_limit_u_boundary_values():
    prob = build_problem("linear")
    at_horizon = limit_u(prob, prob.horizon, [1.3])
    np.testing.assert_allclose(at_horizon, [1.3])   # u(T, x) = h(x)
    at_start = limit_u(prob, 0.0, [prob.x0[0]])
    np.testing.assert_allclose(at_start, prob.x0, atol=1e-9)


def test_modulus_fit_constants():
    # Identity field: the spatial quotient is exactly one and there is no
    # time dependence at all.
    fit = modulus_fit(build_problem("linear"), -2.0, 2.0,
                      samples=128, n_steps=50, seed=7)
    assert fit.alpha == pytest.approx(1.0, rel=1e-6)
    assert fit.beta == pytest.approx(0.0, abs=1e-12)

    # Breaking the f/g symmetry makes the field genuinely time dependent.
    fit2 = modulus_fit(build_problem("tanh", b=1.25), -2.0, 2.0,
                       samples=64, n_steps=50, seed=7)
    assert 0.0 < fit2.alpha < 10.0
    assert 0.0 < fit2.beta < 10.0
