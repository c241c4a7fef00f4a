"""Coupled sweeps against the closed forms of the mean-reverting problem."""

import numpy as np
import pytest

from fbsdelab import (
    ConfigError,
    CouplingError,
    FieldBank,
    ShapeError,
    build_problem,
    conditional_variation,
    coupled_gap_moments,
    epsilon_gap_moments,
    fit_rate,
    make_grid,
    meyer_zheng_distance,
    simulate_forward,
    sup_deviation_probability,
    sweep_conditional_variation,
    uniformity_ratio,
    x_lipschitz_moments,
)


@pytest.fixture(scope="module")
def linear():
    return build_problem("linear", epsilons=(0.8, 0.4, 0.2, 0.1))


@pytest.fixture(scope="module")
def bank(linear):
    return FieldBank(linear, make_grid(linear, 101, 81))


def test_start_point_gap_is_exactly_linear(linear, bank):
    # d(X_a - X_b)/dt = -2 (X_a - X_b) pathwise: the gap is deterministic,
    # and sup |dX|^2 / |x_a - x_b|^2 = 1 at the initial node for every eps.
    rows = x_lipschitz_moments(linear, bank, 0.5, 1.5, n_paths=200)
    for row in rows:
        assert row.constant == pytest.approx(1.0, abs=1e-10)
    assert uniformity_ratio(rows) == pytest.approx(1.0, abs=1e-10)


def test_noise_gap_ratio_halves_exactly(linear, bank):
    # Coupled ensembles satisfy X_e1 - X_e2 = (sqrt(e1) - sqrt(e2)) V with
    # one shared process V.  Halving eps scales sqrt(eps) by 1/sqrt(2), so
    # the squared-gap moments of consecutive pairs sit in the exact ratio
    # 2 : 1 and the sqrt-gap-normalized constants in sqrt(2) : 1.
    rows = epsilon_gap_moments(linear, bank, n_paths=300)
    sups = [row.stats["sup_dx2"].value for row in rows]
    assert sups[0] / sups[1] == pytest.approx(2.0, rel=1e-9)
    assert sups[1] / sups[2] == pytest.approx(2.0, rel=1e-9)
    assert rows[0].constant / rows[1].constant == pytest.approx(np.sqrt(2.0), rel=1e-9)


def test_z_gap_integral_closed_form(linear, bank):
    # Z = sqrt(eps) sigma0 identically, so int |dZ|^2 = (d sqrt(eps))^2 T.
    rows = epsilon_gap_moments(linear, bank, n_paths=50)
    for row in rows:
        e1, e2 = row.epsilons
        expect = (np.sqrt(e1) - np.sqrt(e2)) ** 2 * linear.horizon
        assert abs(row.stats["int_dz2"].value - expect) < 1e-12


def test_gap_against_deterministic_limit(linear, bank):
    rows = epsilon_gap_moments(linear, bank, n_paths=100, pairs=[(0.4, 0.0)])
    assert len(rows) == 1
    assert np.isfinite(rows[0].constant)
    expect = np.sqrt(0.4) ** 2 * linear.horizon
    assert abs(rows[0].stats["int_dz2"].value - expect) < 1e-12


def test_gap_pair_ordering_enforced(linear, bank):
    with pytest.raises(ValueError):
        epsilon_gap_moments(linear, bank, n_paths=10, pairs=[(0.1, 0.4)])


def test_uncoupled_bundles_rejected(linear, bank):
    a = simulate_forward(linear, bank.get(0.4), 0.4, 50, seed_root=1)
    b = simulate_forward(linear, bank.get(0.2), 0.2, 50, seed_root=2)
    with pytest.raises(CouplingError):
        coupled_gap_moments(a, b)


def test_deviation_probability_edge_cases(linear, bank):
    rows = sup_deviation_probability(linear, bank, 50.0, n_paths=100,
                                     epsilons=(0.4,))
    assert rows[0].constant == 0.0
    rows0 = sup_deviation_probability(linear, bank, 1e-3, n_paths=10,
                                      epsilons=(0.0,))
    # zero noise: the Euler path tracks the limit within O(dt), well inside
    # any radius above the scheme error... 1e-3 is not, so compare at 1e-2.
    rows0b = sup_deviation_probability(linear, bank, 1e-2, n_paths=10,
                                       epsilons=(0.0,))
    assert rows0b[0].constant == 0.0
    assert rows0[0].stats["sup_x"].value < 2e-3


def test_pseudo_path_distance_basics(linear, bank):
    bundle = simulate_forward(linear, bank.get(0.1), 0.1, 8, seed_root=1)
    zero = meyer_zheng_distance(bundle.t_nodes, bundle.x_paths, bundle.x_paths)
    np.testing.assert_allclose(zero, 0.0)
    # an offset of at least one saturates the clip, so the distance is T - t0
    far = meyer_zheng_distance(bundle.t_nodes, bundle.x_paths,
                               bundle.x_paths + 5.0)
    np.testing.assert_allclose(far, linear.horizon - linear.t0, atol=1e-12)
    with pytest.raises(ShapeError):
        meyer_zheng_distance(bundle.t_nodes[:-1], bundle.x_paths, bundle.x_paths)


def test_conditional_variation_flat_terminal():
    # g = 0 and h = c: Y is constant, so every conditional increment is
    # zero, the terminal summand is |c|, and the majorant is also |c|.
    prob = build_problem("flat-terminal", c=0.75, epsilons=(0.3,))
    bank = FieldBank(prob, make_grid(prob, 41, 31))
    cv = conditional_variation(prob, bank.get(0.3), 0.3, n_outer=8, n_inner=4,
                               n_partition=4)
    assert cv.variation == pytest.approx(0.75, abs=1e-9)
    assert cv.majorant == pytest.approx(0.75, abs=1e-9)
    assert cv.terminal == pytest.approx(0.75, abs=1e-9)


def test_conditional_variation_needs_inner_ensemble(linear, bank):
    with pytest.raises(ConfigError):
        conditional_variation(linear, bank.get(0.1), 0.1, n_inner=1)


def test_conditional_variation_partition_bounds(linear, bank):
    with pytest.raises(ValueError):
        conditional_variation(linear, bank.get(0.1), 0.1, n_inner=4,
                              n_partition=0)


def test_variation_below_majorant_under_refinement(linear, bank):
    for p in (4, 8, 16):
        cv = conditional_variation(linear, bank.get(0.1), 0.1, n_outer=32,
                                   n_inner=64, n_partition=p, seed_root=2)
        assert cv.variation <= cv.majorant + 3.0 * cv.se_slack


def test_sweep_conditional_variation_rows(linear, bank):
    rows = sweep_conditional_variation(linear, bank, n_outer=16, n_inner=32,
                                       n_partition=8, epsilons=(0.4, 0.1))
    assert [row.epsilons for row in rows] == [(0.4,), (0.1,)]
    for row in rows:
        assert row.constant <= 1.0 + 3.0 * row.stats["slack_se"].value / row.stats["majorant"].value


def test_fit_rate_recovers_exact_slopes():
    eps = np.array([0.8, 0.4, 0.2, 0.1])
    fit1 = fit_rate(eps, 3.0 * eps)
    assert fit1.slope == pytest.approx(1.0, abs=1e-12)
    assert fit1.max_log_misfit < 1e-12
    fit2 = fit_rate(eps, np.sqrt(eps))
    assert fit2.slope == pytest.approx(0.5, abs=1e-12)
    assert fit2.predict(0.05) == pytest.approx(np.sqrt(0.05), rel=1e-9)


def test_fit_rate_input_validation():
    with pytest.raises(ValueError):
        fit_rate([0.4, 0.2], [1.0, 0.5])
    with pytest.raises(ValueError):
        fit_rate([0.4, 0.2, 0.1], [1.0, -0.5, 0.2])


def test_small_gap_forces_small_deviation_probability(linear, bank):
    # When the coupled gap to the zero-noise limit is small against the
    # radius, the exceedance probability must be small too: the two sweeps
    # are mutually consistent.
    radius = 0.25
    rows = epsilon_gap_moments(linear, bank, n_paths=400, pairs=[(0.01, 0.0)],
                               seed_root=3)
    gap = rows[0].stats["sup_dx2"].value
    assert gap < radius ** 2 / 10.0
    dev = sup_deviation_probability(linear, bank, radius, n_paths=400,
                                    epsilons=(0.01,), seed_root=3)
    assert dev[0].constant < 0.2
