"""Forward Monte Carlo through a solved decoupling field.

With the field in hand the system decouples: paths follow the explicit
scheme

    X_{j+1} = X_j + f(t_j, X_j, u(t_j, X_j)) dt
              + sqrt(eps) sigma(t_j, X_j, u(t_j, X_j)) dW_j,

and the backward pair is read off the field, Y_j = u(t_j, X_j) and
Z_j = sqrt(eps) Du(t_j, X_j) sigma(t_j, X_j, Y_j).  Noise comes from
counter-based per-path streams indexed by absolute grid interval, so runs
that share a root seed are synchronously coupled across noise levels, start
points, and start times.  The backward residual audits how well the sampled
pair satisfies the backward equation step by step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CouplingError, DivergenceError, ExcursionError, ShapeError
from .pdefield import DecouplingField
from .problems import ProblemSpec
from .rng import ensemble_increments


@dataclass(frozen=True)
class TrajectoryBundle:
    """An ensemble of coupled forward/backward paths on a field's time grid."""

    t_nodes: np.ndarray      # (N,) slice of the field grid from start_index
    start_index: int         # position of t_nodes[0] in the field grid
    epsilon: float
    seed_root: int
    x_paths: np.ndarray      # (K, N, n)
    y_paths: np.ndarray      # (K, N, n)
    z_paths: np.ndarray      # (K, N, n, d)
    dw: np.ndarray           # (K, N-1, d), increments actually consumed

    @property
    def n_paths(self) -> int:
        return self.x_paths.shape[0]

    @property
    def dt(self) -> float:
        return float(self.t_nodes[1] - self.t_nodes[0])


def simulate_forward(problem: ProblemSpec, field: DecouplingField, epsilon: float,
                     n_paths: int, seed_root: int, *, t_start: float = None,
                     x_start=None) -> TrajectoryBundle:
    """Simulate a coupled ensemble from (t_start, x_start) to the horizon.

    The start time must be a node of the field grid.  Every path is checked
    against the field's safe region (box shrunk by the declared margin) at
    every step; the first offending path aborts the run with its identity, so
    the caller can enlarge the truncation box rather than silently trust
    boundary-polluted field values.
    """
    grid = field.grid
    if abs(field.epsilon - float(epsilon)) > 1e-12:
        raise CouplingError(
            f"field was solved at eps={field.epsilon}, simulation requested eps={epsilon}")
    t0 = problem.t0 if t_start is None else float(t_start)
    j0 = grid.time_index(t0)
    if abs(grid.t_nodes[j0] - t0) > 1e-9:
        raise ShapeError(f"start time {t0} is not a node of the field grid")
    x0 = problem.x0 if x_start is None else np.atleast_1d(np.asarray(x_start, dtype=float))
    safe_lo, safe_hi = grid.safe_lo, grid.safe_hi
    if np.any(x0 < safe_lo) or np.any(x0 > safe_hi):
        raise ExcursionError(f"start point {x0} outside the safe region "
                             f"[{safe_lo}, {safe_hi}]")

    t_nodes = grid.t_nodes[j0:]
    n_nodes = t_nodes.shape[0]
    n, d = problem.n, problem.d
    co = problem.coefficients
    root_eps = np.sqrt(float(epsilon))

    # full-grid increments, sliced so absolute step indices line up across runs
    dw_full = ensemble_increments(seed_root, n_paths, grid.t_nodes.shape[0] - 1,
                                  d, grid.dt)
    dw = np.ascontiguousarray(dw_full[:, j0:, :])

    x = np.empty((n_paths, n_nodes, n))
    x[:, 0] = x0
    for j in range(n_nodes - 1):
        t = t_nodes[j]
        xj = x[:, j]
        uj = field.evaluate_at_index(j0 + j, xj)
        drift = co.f(t, xj, uj)
        sig = co.sigma(t, xj, uj)
        x_next = xj + drift * grid.dt + root_eps * np.einsum("kid,kd->ki", sig, dw[:, j])
        if not np.all(np.isfinite(x_next)):
            bad = int(np.argwhere(~np.all(np.isfinite(x_next), axis=1))[0, 0])
            raise DivergenceError(f"path {bad} became non-finite at step {j + 1}")
        outside = np.any((x_next < safe_lo) | (x_next > safe_hi), axis=1)
        if np.any(outside):
            bad = int(np.nonzero(outside)[0][0])
            raise ExcursionError(
                f"path {bad} left the safe region at step {j + 1} "
                f"(x = {x_next[bad]}); enlarge the truncation box",
                path_index=bad, step_index=j + 1)
        x[:, j + 1] = x_next

    y = np.empty_like(x)
    z = np.empty((n_paths, n_nodes, n, d))
    for j in range(n_nodes):
        t = t_nodes[j]
        xj = x[:, j]
        y[:, j] = field.evaluate_at_index(j0 + j, xj)
        grad = field.gradient_at_index(j0 + j, xj)
        sig = co.sigma(t, xj, y[:, j])
        z[:, j] = root_eps * np.einsum("kli,kim->klm", grad, sig)
    return TrajectoryBundle(t_nodes, j0, float(epsilon), int(seed_root), x, y, z, dw)


@dataclass(frozen=True)
class ResidualStats:
    """Per-step statistics of the backward-equation residual."""

    step_mean: np.ndarray      # (N-1,) mean |r| over paths
    step_rms: np.ndarray
    step_max: np.ndarray
    terminal_mean: float       # |Y_T - h(X_T)| over paths
    terminal_max: float

    @property
    def overall_rms(self) -> float:
        return float(np.sqrt(np.mean(self.step_rms ** 2)))

    @property
    def overall_max(self) -> float:
        return float(np.max(self.step_max)) if self.step_max.size else 0.0


def backward_residual(problem: ProblemSpec, bundle: TrajectoryBundle) -> ResidualStats:
    """Discrete backward-equation residual of a sampled ensemble.

    r_j = Y_{j+1} - Y_j + g(t_j, X_j, Y_j, Z_j) dt - Z_j dW_j, reported as
    mean, RMS and max of |r_j| over paths for each step, plus the terminal
    mismatch Y_T - h(X_T) (identically zero when Y is read off a field whose
    terminal slice is exact).
    """
    co = problem.coefficients
    dt = bundle.dt
    x, y, z, dw = bundle.x_paths, bundle.y_paths, bundle.z_paths, bundle.dw
    n_steps = bundle.t_nodes.shape[0] - 1
    mean = np.empty(n_steps)
    rms = np.empty(n_steps)
    mx = np.empty(n_steps)
    for j in range(n_steps):
        gv = co.g(bundle.t_nodes[j], x[:, j], y[:, j], z[:, j])
        mart = np.einsum("kld,kd->kl", z[:, j], dw[:, j])
        r = y[:, j + 1] - y[:, j] + gv * dt - mart
        norms = np.linalg.norm(r, axis=1)
        mean[j] = float(np.mean(norms))
        rms[j] = float(np.sqrt(np.mean(norms ** 2)))
        mx[j] = float(np.max(norms))
    term = np.linalg.norm(y[:, -1] - co.h(x[:, -1]), axis=1)
    return ResidualStats(mean, rms, mx, float(np.mean(term)), float(np.max(term)))


def estimate_u_probabilistic(problem: ProblemSpec, field: DecouplingField,
                             epsilon: float, t: float, x, n_paths: int,
                             seed_root: int):
    """Monte Carlo estimate of the field value via the backward representation.

    The martingale part of the backward equation has zero mean, so
    u(t, x) = E[ h(X_T) + integral of g along the path ].  The estimator
    simulates the decoupled forward ensemble from (t, x), fills the backward
    pair from the field along each path, and averages the terminal value
    plus the trapezoid quadrature of the driver.  Returns (mean, standard
    error), each of shape (n,).  Independent of the field value at (t, x)
    itself, so it cross-checks the analytic and probabilistic pictures.
    """
    bundle = simulate_forward(problem, field, epsilon, n_paths, seed_root,
                              t_start=t, x_start=x)
    co = problem.coefficients
    t_nodes = bundle.t_nodes
    weights = np.full(t_nodes.shape[0], bundle.dt)
    weights[0] *= 0.5
    weights[-1] *= 0.5
    acc = co.h(bundle.x_paths[:, -1]).astype(float)
    for j in range(t_nodes.shape[0]):
        gv = co.g(t_nodes[j], bundle.x_paths[:, j], bundle.y_paths[:, j],
                  bundle.z_paths[:, j])
        acc += weights[j] * gv
    mean = acc.mean(axis=0)
    se = acc.std(axis=0, ddof=1) / np.sqrt(n_paths)
    return mean, se
