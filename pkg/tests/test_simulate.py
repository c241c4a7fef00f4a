"""Monte Carlo through the solved field against Gaussian closed forms."""

import numpy as np
import pytest

from fbsdelab import (
    CouplingError,
    FieldBank,
    ShapeError,
    backward_residual,
    build_problem,
    make_grid,
    simulate_forward,
)


@pytest.fixture(scope="module")
def linear():
    return build_problem("linear")


@pytest.fixture(scope="module")
def bank(linear):
    return FieldBank(linear, make_grid(linear, 101, 81))


def test_mean_reverting_gaussian_moments(linear, bank):
    # Identity field: X solves dX = -2X dt + sqrt(eps) dW, so
    # mean = x0 exp(-2s), var = eps (1 - exp(-4s)) / 4.
    eps = 0.3
    bundle = simulate_forward(linear, bank.get(eps), eps, 20000, seed_root=5)
    s = bundle.t_nodes
    mean_th = np.exp(-2.0 * s)
    var_th = eps * (1.0 - np.exp(-4.0 * s)) / 4.0
    mean = bundle.x_paths[:, :, 0].mean(axis=0)
    var = bundle.x_paths[:, :, 0].var(axis=0)
    se_mean = np.sqrt(np.maximum(var_th, 1e-30) / bundle.n_paths)
    assert np.all(np.abs(mean - mean_th)[1:] < 4.0 * se_mean[1:] + 2e-3)
    # Euler bias in the variance is O(dt); allow for it explicitly.
    assert np.max(np.abs(var - var_th)) < 4.0 * var_th.max() * np.sqrt(2.0 / bundle.n_paths) + 2e-3


def test_backward_pair_reads_off_field(linear, bank):
    eps = 0.1
    bundle = simulate_forward(linear, bank.get(eps), eps, 200, seed_root=2)
    np.testing.assert_allclose(bundle.y_paths, bundle.x_paths, atol=1e-10)
    np.testing.assert_allclose(bundle.z_paths, np.sqrt(eps), atol=1e-8)


def test_backward_residual_vanishes_on_linear(linear, bank):
    # y = x makes the discrete backward identity algebraic: the residual is
    # pure floating-point noise.
    eps = 0.3
    bundle = simulate_forward(linear, bank.get(eps), eps, 500, seed_root=3)
    stats = backward_residual(linear, bundle)
    assert stats.overall_max < 1e-10


def test_start_time_must_be_grid_node(linear, bank):
    with pytest.raises(ShapeError):
        simulate_forward(linear, bank.get(0.1), 0.1, 10, seed_root=1,
                         t_start=0.1234)


def test_field_and_simulation_noise_must_match(linear, bank):
    with pytest.raises(CouplingError):
        simulate_forward(linear, bank.get(0.1), 0.3, 10, seed_root=1)


def test_same_seed_reproduces_bitwise(linear, bank):
    a = simulate_forward(linear, bank.get(0.1), 0.1, 64, seed_root=11)
    b = simulate_forward(linear, bank.get(0.1), 0.1, 64, seed_root=11)
    assert np.array_equal(a.x_paths, b.x_paths)
    assert np.array_equal(a.dw, b.dw)
    c = simulate_forward(linear, bank.get(0.1), 0.1, 64, seed_root=12)
    assert not np.array_equal(a.x_paths, c.x_paths)


def test_zero_noise_collapses_to_limit_path(linear, bank):
    bundle = simulate_forward(linear, bank.get(0.0), 0.0, 32, seed_root=7)
    assert np.all(bundle.x_paths == bundle.x_paths[:1])   # every path equal
    det = bank.deterministic_path()
    gap = np.max(np.abs(bundle.x_paths[0] - det.x_values))
    assert gap < 2e-3   # Euler versus RK4, O(dt)


def test_delayed_start_shares_increment_suffix(linear, bank):
    # Runs with the same seed consume increments indexed by absolute grid
    # interval, so a later start sees a suffix of the full-run noise.
    full = simulate_forward(linear, bank.get(0.1), 0.1, 16, seed_root=4)
    t_mid = full.t_nodes[30]
    late = simulate_forward(linear, bank.get(0.1), 0.1, 16, seed_root=4,
                            t_start=t_mid, x_start=[0.5])
    assert late.start_index == 30
    assert np.array_equal(late.dw, full.dw[:, 30:, :])
