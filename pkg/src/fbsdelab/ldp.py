"""Large-deviation machinery: action functionals, minimizers, and rare-event
probability estimates.

The zero-noise trajectory is the unique path of vanishing action; the cost of
forcing the forward component along any other absolutely continuous path phi
is

    I1(phi) = 1/2 int |w(s)|^2 ds,   sigma(s, phi, u0(s, phi)) w = phi' - f(s, phi, u0(s, phi)),

with u0 the deterministic limit field, and +infinity when the residual
phi' - f leaves the range of sigma or the start point is wrong.  The backward
component inherits the rate I2(psi) = inf { I1(phi) : psi = u0(., phi) },
computed here by inverting the limit field slice by slice and running dynamic
programming over the preimage branches.  Tube probabilities at small noise
are estimated by exponential tilting along the minimizing path, so the decay
exponent -eps log P can be compared against the minimized action directly.

Discretization: paths are piecewise linear on their node set, the action uses
the midpoint rule per interval, and minimization runs L-BFGS-B over the free
nodes with finite-difference gradients evaluated in one batched call.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.optimize

from .errors import BranchError, ConfigError, EmptyEstimateError, ShapeError
from .pdefield import DecouplingField, FieldBank
from .problems import ProblemSpec
from .rng import brownian_increments

FEASIBILITY_TOL = 1e-8
START_TOL = 1e-9


@dataclass(frozen=True)
class ActionBreakdown:
    """Action value with its per-interval contributions."""

    value: float
    per_interval: np.ndarray
    feasible: bool


@dataclass(frozen=True)
class MinimizedPath:
    """Result of an action minimization over a family of discrete paths."""

    t_nodes: np.ndarray
    values: np.ndarray          # (N, n)
    action: float
    iterations: int
    grad_norm: float
    converged: bool


def _interval_actions(problem: ProblemSpec, field0: DecouplingField,
                      t_nodes: np.ndarray, phis: np.ndarray) -> np.ndarray:
    """Midpoint-rule action contributions for a batch of paths.

    phis has shape (B, N, n); the return is (B, N-1) with +infinity standing
    in for intervals whose velocity residual cannot be produced by the
    diffusion matrix.
    """
    t_nodes = np.asarray(t_nodes, dtype=float)
    b, n_nodes, n = phis.shape
    m = n_nodes - 1
    dt = np.diff(t_nodes)                                     # (m,)
    t_mid = 0.5 * (t_nodes[:-1] + t_nodes[1:])
    x_mid = 0.5 * (phis[:, :-1] + phis[:, 1:])                # (b, m, n)
    vel = (phis[:, 1:] - phis[:, :-1]) / dt[None, :, None]

    u_mid = np.empty((b, m, n))
    for k in range(m):
        j = field0.grid.time_index(t_mid[k])
        u_mid[:, k] = field0.evaluate_at_index(j, x_mid[:, k])

    co = problem.coefficients
    t_flat = np.broadcast_to(t_mid[None, :], (b, m)).reshape(-1, 1)
    x_flat = x_mid.reshape(-1, n)
    u_flat = u_mid.reshape(-1, n)
    fv = co.f(t_flat, x_flat, u_flat)
    sv = co.sigma(t_flat[..., None], x_flat, u_flat)          # (b*m, n, d)
    resid = vel.reshape(-1, n) - fv

    w = np.einsum("kdi,ki->kd", np.linalg.pinv(sv), resid)
    misfit = np.linalg.norm(np.einsum("kid,kd->ki", sv, w) - resid, axis=1)
    bad = misfit > FEASIBILITY_TOL * (1.0 + np.linalg.norm(resid, axis=1))
    cost = 0.5 * np.sum(w ** 2, axis=1)
    cost[bad] = np.inf
    return cost.reshape(b, m) * dt[None, :]


def action_forward(problem: ProblemSpec, field0: DecouplingField, t_nodes,
                   phi, *, pin_start: bool = True) -> ActionBreakdown:
    """Action of one piecewise-linear forward path on its node set.

    With pin_start the path must leave from the problem's start point; a
    mismatch makes the action +infinity, mirroring the definition of the
    rate function rather than raising.
    """
    t_nodes = np.asarray(t_nodes, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if phi.ndim == 1:
        phi = phi[:, None]
    if phi.shape != (t_nodes.shape[0], problem.n):
        raise ShapeError("path values must have shape (len(t_nodes), n)")
    if pin_start and np.linalg.norm(phi[0] - problem.x0) > START_TOL:
        return ActionBreakdown(np.inf, np.full(t_nodes.shape[0] - 1, np.inf), False)
    per = _interval_actions(problem, field0, t_nodes, phi[None])[0]
    feasible = bool(np.all(np.isfinite(per)))
    return ActionBreakdown(float(per.sum()) if feasible else np.inf, per, feasible)


def _free_node_minimize(problem, field0, t_nodes, phi_init, free_nodes,
                        lo, hi, max_iter):
    """L-BFGS-B over the free nodes of a discrete path.

    free_nodes is a boolean mask over nodes; lo/hi are optional per-node
    bounds arrays (N, n).  The finite-difference gradient perturbs every free
    coordinate at once through one batched interval-action call.
    """
    t_nodes = np.asarray(t_nodes, dtype=float)
    phi_init = np.array(phi_init, dtype=float, copy=True)
    n = phi_init.shape[1]
    free_idx = np.nonzero(free_nodes)[0]
    n_free = free_idx.shape[0] * n

    def unpack(vec):
        phi = phi_init.copy()
        phi[free_idx] = vec.reshape(-1, n)
        return phi

    def fun(vec):
        per = _interval_actions(problem, field0, t_nodes, unpack(vec)[None])[0]
        total = per.sum()
        return float(total) if np.isfinite(total) else 1e30

    def jac(vec):
        base_phi = unpack(vec)
        deltas = 1e-6 * (1.0 + np.abs(base_phi[free_idx]).ravel())
        batch = np.repeat(base_phi[None], n_free + 1, axis=0)
        for v in range(n_free):
            node = free_idx[v // n]
            comp = v % n
            batch[v + 1, node, comp] += deltas[v]
        per = _interval_actions(problem, field0, t_nodes, batch)
        totals = per.sum(axis=1)
        totals[~np.isfinite(totals)] = 1e30
        return (totals[1:] - totals[0]) / deltas

    bounds = None
    if lo is not None:
        bounds = list(zip(lo[free_idx].ravel(), hi[free_idx].ravel()))
    res = scipy.optimize.minimize(
        fun, phi_init[free_idx].ravel(), jac=jac, method="L-BFGS-B",
        bounds=bounds, options={"maxiter": max_iter, "ftol": 1e-14, "gtol": 1e-8})
    phi = unpack(res.x)
    per = _interval_actions(problem, field0, t_nodes, phi[None])[0]
    grad_norm = float(np.max(np.abs(res.jac))) if np.size(res.jac) else 0.0
    return MinimizedPath(t_nodes, phi, float(per.sum()), int(res.nit),
                         grad_norm, bool(res.success))


def minimize_action_endpoint(problem: ProblemSpec, field0: DecouplingField,
                             target, *, n_intervals: int = 64,
                             max_iter: int = 500) -> MinimizedPath:
    """Cheapest discrete path from the problem's start point to a terminal
    target: interior nodes free, both endpoints pinned, straight-line start.
    """
    target = np.broadcast_to(np.asarray(target, dtype=float), (problem.n,))
    t_nodes = np.linspace(problem.t0, problem.horizon, n_intervals + 1)
    lam = np.linspace(0.0, 1.0, n_intervals + 1)[:, None]
    phi0 = (1.0 - lam) * problem.x0[None, :] + lam * target[None, :]
    free = np.ones(n_intervals + 1, dtype=bool)
    free[0] = free[-1] = False
    return _free_node_minimize(problem, field0, t_nodes, phi0, free,
                               None, None, max_iter)


def minimize_action_tube(problem: ProblemSpec, field0: DecouplingField,
                         center, radius: float, *, n_intervals: int = 64,
                         max_iter: int = 500, shrink: float = 1e-6) -> MinimizedPath:
    """Cheapest discrete path staying inside a sup-norm tube.

    center may be a scalar, an (n,) point, or per-node values (N, n); the
    search space is the per-node box [center - r', center + r'] with r'
    slightly inside the requested radius, the start node pinned at the
    problem's start point, and the terminal node free within the box.
    """
    if radius <= 0:
        raise ValueError("tube radius must be positive")
    t_nodes = np.linspace(problem.t0, problem.horizon, n_intervals + 1)
    n_nodes = n_intervals + 1
    center = np.asarray(center, dtype=float)
    if center.ndim <= 1:
        center = np.broadcast_to(center, (problem.n,))
        center = np.repeat(center[None, :], n_nodes, axis=0)
    if center.shape != (n_nodes, problem.n):
        raise ShapeError("tube center must broadcast to (n_intervals + 1, n)")
    r_in = radius * (1.0 - shrink)
    lo, hi = center - r_in, center + r_in
    if np.any(problem.x0 < lo[0]) or np.any(problem.x0 > hi[0]):
        raise ValueError("the start point lies outside the tube")
    phi0 = center.copy()
    phi0[0] = problem.x0
    free = np.ones(n_nodes, dtype=bool)
    free[0] = False
    return _free_node_minimize(problem, field0, t_nodes, phi0, free,
                               lo, hi, max_iter)


# ---------------------------------------------------------------------------
# backward-path action via field inversion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BackwardAction:
    """Backward-path action and the forward path realizing it (when any)."""

    value: float
    forward_path: Optional[np.ndarray]   # (N, n) or None when infeasible
    branch_counts: np.ndarray            # (N,) preimages found per node
    feasible: bool


def _invert_slice(field0: DecouplingField, j: int, target: float,
                  branch_cap: int) -> np.ndarray:
    """All x with u0(t_j, x) = target, by exact inversion of the piecewise
    linear interpolant along the (single) spatial axis."""
    axis = field0.grid.axes[0]
    vals = field0.u_values[j, :, 0] - target
    roots = []
    hit = np.isclose(vals, 0.0, atol=1e-13)
    for k in np.nonzero(hit)[0]:
        roots.append(float(axis[k]))
    sign_change = np.nonzero(vals[:-1] * vals[1:] < 0)[0]
    for k in sign_change:
        frac = vals[k] / (vals[k] - vals[k + 1])
        roots.append(float(axis[k] + frac * (axis[k + 1] - axis[k])))
    roots = np.unique(np.round(np.array(roots, dtype=float), 12))
    if roots.shape[0] > branch_cap:
        raise BranchError(
            f"field inversion found {roots.shape[0]} preimage branches at "
            f"time node {j}, more than the cap {branch_cap}")
    return roots


def action_backward(problem: ProblemSpec, field0: DecouplingField, t_nodes,
                    psi, *, branch_cap: int = 8,
                    start_tol: float = 1e-6) -> BackwardAction:
    """Action of a backward path: cheapest forward path whose field image
    matches psi at every node.

    Each time slice of the limit field is inverted at the prescribed value;
    dynamic programming over the preimage branches then selects the forward
    path of least action.  The start node is feasible only if the field value
    at the problem's start point matches psi there.  Supported in one
    spatial dimension.
    """
    if problem.n != 1 or field0.grid.n != 1:
        raise ConfigError("backward-path action inversion supports one "
                          "spatial dimension only")
    t_nodes = np.asarray(t_nodes, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if psi.ndim == 1:
        psi = psi[:, None]
    if psi.shape != (t_nodes.shape[0], 1):
        raise ShapeError("backward path values must have shape (len(t_nodes), 1)")
    n_nodes = t_nodes.shape[0]
    branch_counts = np.zeros(n_nodes, dtype=int)

    j0 = field0.grid.time_index(t_nodes[0])
    u_start = field0.evaluate_at_index(j0, problem.x0[None, :])[0, 0]
    if abs(u_start - psi[0, 0]) > start_tol:
        return BackwardAction(np.inf, None, branch_counts, False)
    candidates = [np.array([problem.x0[0]])]
    branch_counts[0] = 1
    for j in range(1, n_nodes):
        roots = _invert_slice(field0, field0.grid.time_index(t_nodes[j]),
                              psi[j, 0], branch_cap)
        branch_counts[j] = roots.shape[0]
        if roots.shape[0] == 0:
            return BackwardAction(np.inf, None, branch_counts, False)
        candidates.append(roots)

    cost = np.zeros(1)
    back = []
    for j in range(1, n_nodes):
        xa, xb = candidates[j - 1], candidates[j]
        p, q = xa.shape[0], xb.shape[0]
        seg = np.empty((p * q, 2, 1))
        seg[:, 0, 0] = np.repeat(xa, q)
        seg[:, 1, 0] = np.tile(xb, p)
        per = _interval_actions(problem, field0, t_nodes[j - 1:j + 1],
                                seg)[:, 0].reshape(p, q)
        total = cost[:, None] + per
        back.append(np.argmin(total, axis=0))
        cost = np.min(total, axis=0)

    end = int(np.argmin(cost))
    if not np.isfinite(cost[end]):
        return BackwardAction(np.inf, None, branch_counts, False)
    path = np.empty((n_nodes, 1))
    k = end
    for j in range(n_nodes - 1, 0, -1):
        path[j, 0] = candidates[j][k]
        k = int(back[j - 1][k])
    path[0, 0] = candidates[0][k]
    return BackwardAction(float(cost[end]), path, branch_counts, True)


# ---------------------------------------------------------------------------
# rare-event estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TubeEstimate:
    """Estimated probability that the forward component stays inside a tube."""

    epsilon: float
    probability: float
    std_error: float
    n_paths: int
    hits: int
    tilted: bool

    @property
    def decay_exponent(self) -> float:
        """-eps log P, the quantity the minimized action predicts."""
        if self.probability <= 0:
            return float("inf")
        return -self.epsilon * float(np.log(self.probability))


def control_from_path(problem: ProblemSpec, field0: DecouplingField,
                      t_nodes, phi) -> np.ndarray:
    """Open-loop control realizing a path: per interval the least-squares
    solution of sigma w = phi' - f along the path, shape (N-1, d)."""
    t_nodes = np.asarray(t_nodes, dtype=float)
    phi = np.asarray(phi, dtype=float)
    co = problem.coefficients
    dt = np.diff(t_nodes)
    x = phi[:-1]
    u = np.empty_like(x)
    for j in range(x.shape[0]):
        u[j] = field0.evaluate_at_index(field0.grid.time_index(t_nodes[j]),
                                        x[j][None, :])[0]
    vel = (phi[1:] - phi[:-1]) / dt[:, None]
    t_col = t_nodes[:-1].reshape(-1, 1)
    fv = co.f(t_col, x, u)
    sv = co.sigma(t_col[..., None], x, u)
    return np.einsum("kdi,ki->kd", np.linalg.pinv(sv), vel - fv)


def tube_probability(problem: ProblemSpec, field: DecouplingField, epsilon: float,
                     center, radius: float, n_paths: int, seed_root: int, *,
                     control: Optional[np.ndarray] = None,
                     chunk: int = 20000) -> TubeEstimate:
    """Probability that the forward path stays strictly inside a sup-norm tube.

    Without a control this is plain Monte Carlo through the field at the
    requested noise level.  With a control v the simulated drift is shifted
    by sigma v and every path carries the exponential change-of-measure
    weight, which moves the mass onto the tube and leaves the estimator
    unbiased; v is given per grid interval, as from control_from_path on the
    tube's minimizing path.  Paths are simulated in chunks with globally
    indexed noise streams, so the estimate is independent of the chunking.
    """
    grid = field.grid
    t_nodes = grid.t_nodes
    n_steps = t_nodes.shape[0] - 1
    n, d = problem.n, problem.d
    center = np.asarray(center, dtype=float)
    if center.ndim <= 1:
        center = np.broadcast_to(np.broadcast_to(center, (n,)),
                                 (n_steps + 1, n))
    if center.shape != (n_steps + 1, n):
        raise ShapeError("tube center must broadcast to (grid nodes, n)")
    if np.linalg.norm(problem.x0 - center[0]) >= radius:
        raise ValueError("the start point lies outside the tube")
    if control is not None:
        control = np.asarray(control, dtype=float)
        if control.shape != (n_steps, d):
            raise ShapeError("control must have shape (grid steps, d)")

    co = problem.coefficients
    dt = grid.dt
    root_eps = np.sqrt(float(epsilon))
    lo = np.array([a[0] for a in grid.axes])
    hi = np.array([a[-1] for a in grid.axes])

    total = 0
    hits = 0
    acc = 0.0
    acc_sq = 0.0
    while total < n_paths:
        k = min(chunk, n_paths - total)
        dw = np.empty((k, n_steps, d))
        for i in range(k):
            dw[i] = brownian_increments(seed_root, total + i, n_steps, d, dt)
        x = np.repeat(problem.x0[None, :], k, axis=0)
        alive = np.ones(k, dtype=bool)
        log_w = np.zeros(k)
        for j in range(n_steps):
            u = field.evaluate_at_index(j, x)
            drift = co.f(t_nodes[j], x, u)
            sig = co.sigma(t_nodes[j], x, u)
            if control is not None:
                drift = drift + np.einsum("kid,d->ki", sig, control[j])
                log_w -= (dw[:, j] @ control[j]) / root_eps \
                    + 0.5 * np.sum(control[j] ** 2) * dt / epsilon
            x = x + drift * dt + root_eps * np.einsum("kid,kd->ki", sig, dw[:, j])
            x = np.clip(x, lo, hi)
            alive &= np.linalg.norm(x - center[j + 1], axis=1) < radius
        vals = np.where(alive, np.exp(log_w), 0.0) if control is not None \
            else alive.astype(float)
        acc += float(vals.sum())
        acc_sq += float((vals ** 2).sum())
        hits += int(alive.sum())
        total += k

    prob = acc / total
    var = max(acc_sq / total - prob ** 2, 0.0)
    se = float(np.sqrt(var / total))
    return TubeEstimate(float(epsilon), prob, se, total, hits, control is not None)


def sweep_tube_probability(problem: ProblemSpec, bank: FieldBank, radius: float, *,
                           center=None, epsilons=None, n_paths: int = 100000,
                           seed_root: int = 1, tilt: bool = True,
                           n_intervals: int = 64, chunk: int = 20000):
    """Tube probabilities across the noise grid against the minimized action.

    Returns (estimates, minimizer): one TubeEstimate per noise level and the
    tube-constrained action minimizer whose value predicts the decay
    exponents.  When tilting is on, the minimizer also supplies the
    importance-sampling control (interpolated onto the simulation grid).
    Raises EmptyEstimateError when every level produced zero hits.
    """
    grid = bank.grid
    center_arr = problem.x0 if center is None else np.asarray(center, dtype=float)
    field0 = bank.get(0.0)
    mini = minimize_action_tube(problem, field0, center_arr, radius,
                                n_intervals=n_intervals)
    control = None
    if tilt:
        fine_phi = np.empty((grid.t_nodes.shape[0], problem.n))
        for i in range(problem.n):
            fine_phi[:, i] = np.interp(grid.t_nodes, mini.t_nodes, mini.values[:, i])
        control = control_from_path(problem, field0, grid.t_nodes, fine_phi)

    estimates = []
    eps_list = tuple(problem.epsilon_grid if epsilons is None else
                     tuple(float(e) for e in epsilons))
    for eps in eps_list:
        estimates.append(tube_probability(
            problem, bank.get(eps), eps, center_arr, radius, n_paths,
            seed_root, control=control, chunk=chunk))
    if all(e.hits == 0 for e in estimates):
        raise EmptyEstimateError(
            "no path stayed inside the tube at any noise level; enlarge the "
            "radius or enable tilting")
    return estimates, mini
