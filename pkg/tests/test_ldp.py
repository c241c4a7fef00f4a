"""Rate functionals and rare-event estimates on the identity-field problem."""

import numpy as np
import pytest

from fbsdelab import (
    BranchError,
    ConfigError,
    FieldBank,
    action_backward,
    action_forward,
    build_problem,
    control_from_path,
    make_grid,
    minimize_action_endpoint,
    minimize_action_tube,
    tube_probability,
)
from fbsdelab.limits import solve_bvp_shooting


@pytest.fixture(scope="module")
def linear():
    return build_problem("linear")


@pytest.fixture(scope="module")
def bank(linear):
    return FieldBank(linear, make_grid(linear, 101, 81))


@pytest.fixture(scope="module")
def field0(bank):
    return bank.get(0.0)


def nodes(linear, m=64):
    return np.linspace(linear.t0, linear.horizon, m + 1)


def test_limit_path_has_zero_action(linear, field0):
    t = nodes(linear)
    sol = solve_bvp_shooting(linear, linear.t0, linear.x0, t_nodes=t)
    out = action_forward(linear, field0, t, sol.x_values)
    assert out.feasible
    assert out.value < 1e-8


def test_constant_path_action_closed_form(linear, field0):
    # phi = x0 = 1: the control must cancel the drift f = -2 phi = -2, so
    # w = 2 and the action is 0.5 * 4 * T = 1.
    t = nodes(linear)
    phi = np.ones((t.shape[0], 1))
    out = action_forward(linear, field0, t, phi)
    assert out.feasible
    assert out.value == pytest.approx(1.0, abs=1e-12)


def test_pinned_start_rejects_wrong_initial_point(linear, field0):
    t = nodes(linear)
    phi = np.full((t.shape[0], 1), 0.5)
    out = action_forward(linear, field0, t, phi)
    assert not out.feasible
    assert out.value == np.inf
    out_free = action_forward(linear, field0, t, phi, pin_start=False)
    assert out_free.feasible


def test_degenerate_diffusion_makes_paths_infeasible():
    prob = build_problem("linear", sigma0=0.0, epsilons=(0.1,))
    bank0 = FieldBank(prob, make_grid(prob, 101, 81))
    f0 = bank0.get(0.0)
    t = np.linspace(prob.t0, prob.horizon, 65)
    out = action_forward(prob, f0, t, np.ones((65, 1)))
    assert not out.feasible
    # with no diffusion only an exact solution of the discrete dynamics is
    # admissible; the midpoint recursion provides one
    dt = t[1] - t[0]
    phi = (1.0 * ((1.0 - dt) / (1.0 + dt)) ** np.arange(65))[:, None]
    good = action_forward(prob, f0, t, phi)
    assert good.feasible
    assert good.value == 0.0


def test_action_scales_quadratically_in_the_control(linear, field0):
    # The residual is affine in the path for this problem, so perturbing a
    # path of exactly zero discrete action by lam * eta multiplies the
    # action by lam^2, to rounding.  The zero-action base solves the
    # midpoint recursion phi_{j+1} = phi_j (1 - dt) / (1 + dt).
    t = nodes(linear)
    dt = t[1] - t[0]
    base = (1.0 * ((1.0 - dt) / (1.0 + dt)) ** np.arange(t.shape[0]))[:, None]
    assert action_forward(linear, field0, t, base).value < 1e-25
    eta = (np.sin(np.pi * (t - t[0]) / (t[-1] - t[0])) * 0.3)[:, None]  # 0 at ends
    a1 = action_forward(linear, field0, t, base + eta).value
    for lam in (2.0, 10.0):
        alam = action_forward(linear, field0, t, base + lam * eta).value
        assert alam == pytest.approx(lam ** 2 * a1, rel=1e-9)


def test_endpoint_minimization(linear, bank, field0):
    det = bank.deterministic_path()
    free = minimize_action_endpoint(linear, field0, det.x_values[-1])
    assert free.action < 1e-5            # reaching the limit endpoint is free
    hit = minimize_action_endpoint(linear, field0, [1.0])
    assert hit.converged
    coarse = minimize_action_endpoint(linear, field0, [1.0], n_intervals=32)
    assert hit.action == pytest.approx(coarse.action, rel=0.05)
    # LQ closed form: steering the scalar mean-reverting state to y* costs
    # 2 (y* - x0 exp(-2T))^2 / (1 - exp(-4T)).
    T = linear.horizon
    exact = 2.0 * (1.0 - np.exp(-2.0 * T)) ** 2 / (1.0 - np.exp(-4.0 * T))
    assert hit.action == pytest.approx(exact, rel=2e-2)


def test_backward_action_agrees_with_forward_on_identity_field(linear, field0):
    # u(t, .) is the identity, so a backward path psi determines the forward
    # path phi = psi and both functionals must coincide.
    t = nodes(linear, 32)
    rng = np.random.default_rng(8)
    for _ in range(3):
        knots = rng.uniform(0.2, 1.8, size=5)
        psi = np.interp(t, np.linspace(t[0], t[-1], 5), knots)
        psi[0] = 1.0    # start value must match u(0, x0) = x0
        back = action_backward(linear, field0, t, psi[:, None])
        fwd = action_forward(linear, field0, t, psi[:, None])
        assert back.feasible
        np.testing.assert_allclose(back.forward_path, psi[:, None], atol=1e-7)
        assert back.value == pytest.approx(fwd.value, rel=1e-8, abs=1e-10)


def test_backward_action_infeasible_cases(linear, bank, field0):
    t = nodes(linear, 32)
    det = bank.deterministic_path()
    psi = np.interp(t, det.t_nodes, det.y_values[:, 0])[:, None]
    assert action_backward(linear, field0, t, psi).value < 1e-8
    # start value far from u(0, x0)
    bad = psi + 0.5
    out = action_backward(linear, field0, t, bad)
    assert not out.feasible and out.value == np.inf
    # target outside the field range on some slice
    wild = psi.copy()
    wild[10] = 99.0
    assert not action_backward(linear, field0, t, wild).feasible


def test_backward_action_rejects_flat_preimages():
    # A constant terminal map makes every grid point a preimage of c: the
    # branch enumeration must refuse rather than silently pick one.
    prob = build_problem("flat-terminal", c=0.75, epsilons=(0.1,))
    bank0 = FieldBank(prob, make_grid(prob, 41, 31))
    f0 = bank0.get(0.0)
    t = np.linspace(prob.t0, prob.horizon, 17)
    psi = np.full((17, 1), 0.75)
    with pytest.raises(BranchError):
        action_backward(prob, f0, t, psi)


def test_backward_action_is_scalar_only():
    prob = build_problem("linear", n=2, d=2, epsilons=(0.1,))
    bank2 = FieldBank(prob, make_grid(prob, 81, 21))
    f0 = bank2.get(0.0)
    t = np.linspace(prob.t0, prob.horizon, 9)
    with pytest.raises(ConfigError):
        action_backward(prob, f0, t, np.ones((9, 2)))


def test_tube_minimization_contains_limit_path(linear, field0):
    # The limit path stays inside a radius-1 tube around x0, so the infimum
    # is zero; the optimizer stalls somewhere in the flat valley.
    out = minimize_action_tube(linear, field0, 1.0, 1.0)
    assert out.action < 1e-4
    assert np.all(np.abs(out.values[:, 0] - 1.0) <= 1.0)
    with pytest.raises(ValueError):
        minimize_action_tube(linear, field0, 3.0, 0.5)   # x0 outside the tube


def test_tube_probability_certain_at_zero_noise(linear, bank):
    est = tube_probability(linear, bank.get(0.0), 0.0, 1.0, 1.0, 500, 1)
    assert est.probability == 1.0
    assert est.hits == 500
    assert est.decay_exponent == 0.0


def test_tilting_reduces_relative_error(linear, bank, field0):
    center, radius = 1.0, 0.25
    mini = minimize_action_tube(linear, field0, center, radius)
    # the control drives the simulation, so it lives on the field grid
    g = bank.grid.t_nodes
    fine = np.interp(g, mini.t_nodes, mini.values[:, 0])[:, None]
    ctrl = control_from_path(linear, field0, g, fine)
    eps = 0.1
    field = bank.get(eps)
    crude = tube_probability(linear, field, eps, center, radius, 4000, 2)
    tilted = tube_probability(linear, field, eps, center, radius, 4000, 2,
                              control=ctrl)
    assert tilted.tilted and not crude.tilted
    assert crude.hits > 0
    assert tilted.std_error / tilted.probability < crude.std_error / crude.probability
    # both estimate the same probability
    agree = abs(tilted.probability - crude.probability)
    assert agree < 4.0 * np.hypot(tilted.std_error, crude.std_error)
