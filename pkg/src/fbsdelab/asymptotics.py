"""Monte Carlo estimators for the small-noise asymptotics.

Everything here post-processes trajectory bundles produced by the simulator.
The sweep functions drive one bundle per noise level through a shared field
bank and reduce each to the moment statistics whose boundedness (uniformly in
the noise level) the theory asserts: second moments, coupled gaps across
noise levels / start points / start times, sup-norm deviation probabilities
against the deterministic limit trajectory, pseudo-path (convergence in
measure) distances, and the conditional variation that underlies tightness of
the backward component.

Coupled comparisons rely on the counter-based noise streams: two bundles with
the same root seed consume identical Brownian increments on every grid
interval they share, so differences measure the parameter change and not the
noise.  This is checked, not assumed; a mismatch raises CouplingError.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, CouplingError, ShapeError
from .pdefield import DecouplingField, FieldBank
from .problems import ProblemSpec
from .rng import derive_seed
from .simulate import TrajectoryBundle, simulate_forward


@dataclass(frozen=True)
class EnsembleStat:
    """A Monte Carlo mean with its standard error."""

    value: float
    std_error: float
    n_samples: int


def _stat(samples: np.ndarray) -> EnsembleStat:
    samples = np.asarray(samples, dtype=float)
    k = samples.shape[0]
    se = float(samples.std(ddof=1) / np.sqrt(k)) if k > 1 else float("nan")
    return EnsembleStat(float(samples.mean()), se, k)


def _quad_weights(n_nodes: int, dt: float) -> np.ndarray:
    w = np.full(n_nodes, dt)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def _sup_sq(paths: np.ndarray) -> np.ndarray:
    """Per-path sup over nodes of the squared Euclidean norm, (K,)."""
    return np.max(np.sum(paths ** 2, axis=-1), axis=1)


def _int_sq(paths: np.ndarray, dt: float) -> np.ndarray:
    """Per-path trapezoid quadrature of the squared norm, (K,)."""
    sq = np.sum(paths.reshape(paths.shape[0], paths.shape[1], -1) ** 2, axis=-1)
    return sq @ _quad_weights(paths.shape[1], dt)


# ---------------------------------------------------------------------------
# pairwise coupled gaps
# ---------------------------------------------------------------------------

def coupled_gap_moments(bundle_a: TrajectoryBundle, bundle_b: TrajectoryBundle) -> dict:
    """Gap moments of two synchronously coupled ensembles.

    The bundles may start at different grid nodes; the comparison runs over
    the common suffix of the time grid.  Returns EnsembleStat entries
    ``sup_dx2`` (E sup |dX|^2), ``sup_dy2``, and ``int_dz2`` (E of the time
    integral of |dZ|^2).  Raises CouplingError unless the bundles share the
    root seed, the path count, and — bitwise — the Brownian increments on the
    common suffix.
    """
    if bundle_a.seed_root != bundle_b.seed_root:
        raise CouplingError("bundles use different root seeds")
    if bundle_a.n_paths != bundle_b.n_paths:
        raise CouplingError("bundles have different path counts")
    if bundle_a.start_index > bundle_b.start_index:
        bundle_a, bundle_b = bundle_b, bundle_a
    off = bundle_b.start_index - bundle_a.start_index
    if bundle_a.t_nodes.shape[0] - off != bundle_b.t_nodes.shape[0] or not np.allclose(
            bundle_a.t_nodes[off:], bundle_b.t_nodes):
        raise ShapeError("bundles do not share a common time-grid suffix")
    if not np.array_equal(bundle_a.dw[:, off:], bundle_b.dw):
        raise CouplingError("bundles do not share Brownian increments on the "
                            "common suffix; they are not coupled")
    dx = bundle_a.x_paths[:, off:] - bundle_b.x_paths
    dy = bundle_a.y_paths[:, off:] - bundle_b.y_paths
    dz = bundle_a.z_paths[:, off:] - bundle_b.z_paths
    dt = bundle_b.dt
    return {
        "sup_dx2": _stat(_sup_sq(dx)),
        "sup_dy2": _stat(_sup_sq(dy)),
        "int_dz2": _stat(_int_sq(dz, dt)),
    }


def second_moment_stats(bundle: TrajectoryBundle) -> dict:
    """E sup |X|^2, E sup |Y|^2 and E int |Z|^2 of one ensemble."""
    return {
        "sup_x2": _stat(_sup_sq(bundle.x_paths)),
        "sup_y2": _stat(_sup_sq(bundle.y_paths)),
        "int_z2": _stat(_int_sq(bundle.z_paths, bundle.dt)),
    }


# ---------------------------------------------------------------------------
# sweeps over the noise grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    """One row of a moment sweep: the noise level(s) involved, the raw
    statistics, and the implied constant after dividing out the claimed
    scaling."""

    epsilons: tuple
    stats: dict
    constant: float


def uniformity_ratio(rows: Sequence[SweepRow]) -> float:
    """max/min of the implied constants across a sweep; close to one means
    the claimed scaling captured the parameter dependence."""
    consts = np.array([r.constant for r in rows], dtype=float)
    if np.any(consts <= 0):
        raise ValueError("uniformity ratio needs positive constants")
    return float(consts.max() / consts.min())


def _epsilons(problem: ProblemSpec, epsilons) -> tuple:
    return tuple(problem.epsilon_grid if epsilons is None else
                 tuple(float(e) for e in epsilons))


def second_moments(problem: ProblemSpec, bank: FieldBank, *,
                   n_paths: int = 2000, seed_root: int = 1,
                   epsilons=None) -> list:
    """Second-moment bound sweep: constants are the largest of the three
    moment statistics divided by 1 + |x0|^2, one row per noise level."""
    rows = []
    norm = 1.0 + float(np.sum(problem.x0 ** 2))
    for eps in _epsilons(problem, epsilons):
        bundle = simulate_forward(problem, bank.get(eps), eps, n_paths, seed_root)
        stats = second_moment_stats(bundle)
        constant = max(s.value for s in stats.values()) / norm
        rows.append(SweepRow((eps,), stats, constant))
    return rows


def epsilon_gap_moments(problem: ProblemSpec, bank: FieldBank, *,
                        n_paths: int = 2000, seed_root: int = 1,
                        epsilons=None, pairs=None) -> list:
    """Coupled-gap moments across noise levels.

    Row (eps1, eps2) reports the gap moments of the ensembles at the two
    levels driven by the same Brownian paths; the implied constant divides
    the largest moment by sqrt(eps1) - sqrt(eps2), the scaling the gap bound
    asserts.  By default consecutive grid levels are paired; explicit
    ``pairs`` override that, and a pair may use eps2 = 0, in which case the
    comparison runs against the zero-noise ensemble (every path equal to the
    deterministic trajectory).
    """
    if pairs is None:
        eps_list = _epsilons(problem, epsilons)
        pairs = tuple(zip(eps_list, eps_list[1:]))
    else:
        pairs = tuple((float(a), float(b)) for a, b in pairs)
    levels = sorted({e for pair in pairs for e in pair}, reverse=True)
    bundles = {eps: simulate_forward(problem, bank.get(eps), eps, n_paths, seed_root)
               for eps in levels}
    rows = []
    for e1, e2 in pairs:
        if e1 <= e2:
            raise ValueError("noise-gap pairs must be (larger, smaller)")
        stats = coupled_gap_moments(bundles[e1], bundles[e2])
        scale = np.sqrt(e1) - np.sqrt(e2)
        constant = max(s.value for s in stats.values()) / scale
        rows.append(SweepRow((e1, e2), stats, constant))
    return rows


def x_lipschitz_moments(problem: ProblemSpec, bank: FieldBank, x_a, x_b, *,
                        n_paths: int = 2000, seed_root: int = 1,
                        epsilons=None) -> list:
    """Coupled-gap sweep over the start point: ensembles from x_a and x_b
    share their noise, and the constant divides the largest gap moment by
    |x_a - x_b|^2.  One row per noise level."""
    x_a = np.atleast_1d(np.asarray(x_a, dtype=float))
    x_b = np.atleast_1d(np.asarray(x_b, dtype=float))
    scale = float(np.sum((x_a - x_b) ** 2))
    if scale <= 0:
        raise ValueError("start points must differ")
    rows = []
    for eps in _epsilons(problem, epsilons):
        field = bank.get(eps)
        ba = simulate_forward(problem, field, eps, n_paths, seed_root, x_start=x_a)
        bb = simulate_forward(problem, field, eps, n_paths, seed_root, x_start=x_b)
        stats = coupled_gap_moments(ba, bb)
        rows.append(SweepRow((eps,), stats, max(s.value for s in stats.values()) / scale))
    return rows


def time_shift_moments(problem: ProblemSpec, bank: FieldBank, t_a: float, t_b: float,
                       *, x=None, n_paths: int = 2000, seed_root: int = 1,
                       epsilons=None) -> list:
    """Coupled-gap sweep over the start time.

    Both ensembles start from the same point, one at t_a and one at t_b, and
    share their noise on the overlap; moments are taken over the common
    suffix and the constant divides by (1 + |x|^2) |t_a - t_b|, the scaling
    the time-regularity bound asserts.
    """
    xv = problem.x0 if x is None else np.atleast_1d(np.asarray(x, dtype=float))
    scale = (1.0 + float(np.sum(xv ** 2))) * abs(float(t_a) - float(t_b))
    if scale <= 0:
        raise ValueError("start times must differ")
    rows = []
    for eps in _epsilons(problem, epsilons):
        field = bank.get(eps)
        ba = simulate_forward(problem, field, eps, n_paths, seed_root,
                              t_start=t_a, x_start=xv)
        bb = simulate_forward(problem, field, eps, n_paths, seed_root,
                              t_start=t_b, x_start=xv)
        stats = coupled_gap_moments(ba, bb)
        rows.append(SweepRow((eps,), stats, max(s.value for s in stats.values()) / scale))
    return rows


# ---------------------------------------------------------------------------
# deviation from the deterministic limit
# ---------------------------------------------------------------------------

def deviation_stats(bundle: TrajectoryBundle, reference, radius: float) -> dict:
    """Sup-norm deviation of an ensemble from a deterministic trajectory.

    reference is an OdeSolution on the bundle's node set.  Returns
    EnsembleStat entries ``prob_x``, ``prob_y``, ``prob_joint`` (probability
    that the sup over nodes of |dX|, |dY|, or their sum exceeds radius) and
    ``sup_x``, ``sup_y`` (mean sup-norm deviations).
    """
    if reference.t_nodes.shape[0] != bundle.t_nodes.shape[0] or not np.allclose(
            reference.t_nodes, bundle.t_nodes):
        raise ShapeError("reference trajectory lives on different time nodes")
    dxn = np.linalg.norm(bundle.x_paths - reference.x_values[None], axis=-1)
    dyn = np.linalg.norm(bundle.y_paths - reference.y_values[None], axis=-1)
    sup_x = dxn.max(axis=1)
    sup_y = dyn.max(axis=1)
    sup_joint = (dxn + dyn).max(axis=1)
    return {
        "prob_x": _stat(sup_x >= radius),
        "prob_y": _stat(sup_y >= radius),
        "prob_joint": _stat(sup_joint >= radius),
        "sup_x": _stat(sup_x),
        "sup_y": _stat(sup_y),
    }


def sup_deviation_probability(problem: ProblemSpec, bank: FieldBank, radius: float, *,
                              n_paths: int = 4000, seed_root: int = 1,
                              epsilons=None) -> list:
    """Sweep of P(sup_s |X - limit| > radius) over the noise grid, with the
    backward component and the joint statistic carried as diagnostics.  The
    row constant is the forward exceedance probability itself."""
    ref = bank.deterministic_path()
    rows = []
    for eps in _epsilons(problem, epsilons):
        bundle = simulate_forward(problem, bank.get(eps), eps, n_paths, seed_root)
        stats = deviation_stats(bundle, ref, radius)
        rows.append(SweepRow((eps,), stats, stats["prob_x"].value))
    return rows


# ---------------------------------------------------------------------------
# Meyer-Zheng (pseudo-path) distance, i.e. convergence in measure
# ---------------------------------------------------------------------------

def meyer_zheng_distance(t_nodes: np.ndarray, paths_a: np.ndarray,
                         paths_b: np.ndarray) -> np.ndarray:
    """Distance in the Meyer-Zheng (pseudo-path) topology.

    For each path pair the distance is the time integral of
    min(|a(s) - b(s)|, 1), by trapezoid quadrature on the common nodes.
    Accepts (K, N, n) against (K, N, n) or a single (N, n) reference.
    """
    t_nodes = np.asarray(t_nodes, dtype=float)
    a = np.asarray(paths_a, dtype=float)
    b = np.asarray(paths_b, dtype=float)
    if b.ndim == 2:
        b = b[None]
    if a.shape[1] != t_nodes.shape[0] or b.shape[1] != t_nodes.shape[0]:
        raise ShapeError("paths and t_nodes disagree on the node count")
    gap = np.minimum(np.linalg.norm(a - b, axis=-1), 1.0)
    dt = float(t_nodes[1] - t_nodes[0])
    return gap @ _quad_weights(t_nodes.shape[0], dt)


def meyer_zheng_sweep(problem: ProblemSpec, bank: FieldBank, *,
                      n_paths: int = 2000, seed_root: int = 1,
                      epsilons=None) -> list:
    """Mean Meyer-Zheng distance of both components to the limit trajectory,
    one row per noise level; the row constant is the backward-component mean
    distance (the quantity whose decay rate the tightness sweep fits)."""
    ref = bank.deterministic_path()
    rows = []
    for eps in _epsilons(problem, epsilons):
        bundle = simulate_forward(problem, bank.get(eps), eps, n_paths, seed_root)
        stats = {
            "rho_x": _stat(meyer_zheng_distance(bundle.t_nodes, bundle.x_paths,
                                                ref.x_values)),
            "rho_y": _stat(meyer_zheng_distance(bundle.t_nodes, bundle.y_paths,
                                                ref.y_values)),
        }
        rows.append(SweepRow((eps,), stats, stats["rho_y"].value))
    return rows


# ---------------------------------------------------------------------------
# conditional variation of the backward component
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConditionalVariation:
    """Estimated conditional variation of Y over a time partition, against
    the integrability majorant E|h(X_T)| + E int |g| ds that bounds it for
    every partition and noise level.

    ``se_slack`` is the standard error of the per-path difference
    variation - majorant (both sides are evaluated on the same outer paths,
    so the comparison uses the paired error, not the two marginal ones)."""

    epsilon: float
    variation: float
    majorant: float
    terminal: float             # the E|Y(T)| summand
    per_interval: np.ndarray    # (P,) conditional-increment summands
    se_variation: float
    se_majorant: float
    se_slack: float
    n_outer: int
    n_inner: int


def _euler_block(problem: ProblemSpec, field: DecouplingField, epsilon: float,
                 j_from: int, j_to: int, x_start: np.ndarray,
                 dw_block: np.ndarray) -> np.ndarray:
    """Euler steps of the decoupled forward dynamics from grid node j_from to
    j_to with supplied increments; states are clipped to the truncation box
    (the clip only ever acts on astronomically unlikely inner excursions)."""
    grid = field.grid
    co = problem.coefficients
    root_eps = np.sqrt(epsilon)
    lo = np.array([a[0] for a in grid.axes])
    hi = np.array([a[-1] for a in grid.axes])
    x = np.array(x_start, dtype=float, copy=True)
    for idx, j in enumerate(range(j_from, j_to)):
        u = field.evaluate_at_index(j, x)
        drift = co.f(grid.t_nodes[j], x, u)
        sig = co.sigma(grid.t_nodes[j], x, u)
        x = x + drift * grid.dt + root_eps * np.einsum("kid,kd->ki", sig, dw_block[:, idx])
        x = np.clip(x, lo, hi)
    return x


def conditional_variation(problem: ProblemSpec, field: DecouplingField,
                          epsilon: float, *, n_outer: int = 32,
                          n_inner: int = 256, seed_root: int = 1,
                          n_partition: Optional[int] = None) -> ConditionalVariation:
    """Nested Monte Carlo estimate of the conditional variation of Y.

    The outer ensemble carries the conditioning states; for each partition
    interval the conditional increment E[Y_next - Y_now | now] is estimated
    per outer path by an inner ensemble restarted from the conditioning state
    with fresh noise, and its absolute values are averaged.  The terminal
    summand E|Y(T)| comes from the outer ensemble, as does the majorant
    E|h(X_T)| + E int |g| ds.  Inner noise is derived per interval from the
    root seed, so the estimate is deterministic.
    """
    if int(n_inner) < 2:
        raise ConfigError("conditional variation needs at least two inner paths")
    bundle = simulate_forward(problem, field, epsilon, n_outer,
                              derive_seed(seed_root, "cond-var-outer"))
    n_nodes = bundle.t_nodes.shape[0]
    j0 = bundle.start_index
    n_steps = n_nodes - 1
    p = n_steps if n_partition is None else int(n_partition)
    if not 1 <= p <= n_steps:
        raise ValueError("partition count must lie in [1, number of grid steps]")
    cuts = np.unique(np.round(np.linspace(0, n_steps, p + 1)).astype(int))

    d = problem.d
    dt = bundle.dt
    per = np.empty(cuts.shape[0] - 1)
    per_path_var = np.zeros(n_outer)
    for i in range(cuts.shape[0] - 1):
        ja, jb = int(cuts[i]), int(cuts[i + 1])
        x_out = bundle.x_paths[:, ja]
        y_out = bundle.y_paths[:, ja]
        rng = np.random.default_rng(derive_seed(seed_root, "cond-var-inner", i))
        dwb = rng.standard_normal((n_outer * n_inner, jb - ja, d)) * np.sqrt(dt)
        x_in = np.repeat(x_out, n_inner, axis=0)
        x_end = _euler_block(problem, field, epsilon, j0 + ja, j0 + jb, x_in, dwb)
        u_end = field.evaluate_at_index(j0 + jb, x_end)
        cond = u_end.reshape(n_outer, n_inner, -1).mean(axis=1) - y_out
        contrib = np.linalg.norm(cond, axis=-1)
        per_path_var += contrib
        per[i] = float(np.mean(contrib))

    term_path = np.linalg.norm(bundle.y_paths[:, -1], axis=-1)
    per_path_var += term_path
    terminal = float(np.mean(term_path))
    variation = float(per.sum() + terminal)

    co = problem.coefficients
    gabs = np.empty((n_outer, n_nodes))
    for j in range(n_nodes):
        gv = co.g(bundle.t_nodes[j], bundle.x_paths[:, j], bundle.y_paths[:, j],
                  bundle.z_paths[:, j])
        gabs[:, j] = np.linalg.norm(np.atleast_2d(gv), axis=-1)
    int_g = gabs @ _quad_weights(n_nodes, dt)
    per_path_maj = np.linalg.norm(co.h(bundle.x_paths[:, -1]), axis=-1) + int_g
    majorant = float(np.mean(per_path_maj))
    rt = np.sqrt(n_outer)
    return ConditionalVariation(
        float(epsilon), variation, majorant, terminal, per,
        float(per_path_var.std(ddof=1) / rt),
        float(per_path_maj.std(ddof=1) / rt),
        float((per_path_var - per_path_maj).std(ddof=1) / rt),
        n_outer, n_inner)


def sweep_conditional_variation(problem: ProblemSpec, bank: FieldBank, *,
                                n_outer: int = 32, n_inner: int = 256,
                                seed_root: int = 1, n_partition: Optional[int] = None,
                                epsilons=None) -> list:
    """Conditional variation against its majorant at every noise level; the
    row constant is variation / majorant (at most one up to sampling error,
    uniformly in the noise level, which is the tightness evidence)."""
    rows = []
    for eps in _epsilons(problem, epsilons):
        cv = conditional_variation(problem, bank.get(eps), eps, n_outer=n_outer,
                                   n_inner=n_inner, seed_root=seed_root,
                                   n_partition=n_partition)
        stats = {
            "variation": EnsembleStat(cv.variation, cv.se_variation, n_outer),
            "majorant": EnsembleStat(cv.majorant, cv.se_majorant, n_outer),
            "terminal": EnsembleStat(cv.terminal, float("nan"), n_outer),
            "slack_se": EnsembleStat(cv.se_slack, float("nan"), n_outer),
        }
        rows.append(SweepRow((eps,), stats, cv.variation / cv.majorant))
    return rows


# ---------------------------------------------------------------------------
# rate fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RateFit:
    """Least-squares power law value = exp(intercept) * eps**slope."""

    slope: float
    intercept: float
    epsilons: tuple
    values: tuple
    max_log_misfit: float

    def predict(self, eps: float) -> float:
        return float(np.exp(self.intercept) * eps ** self.slope)


def fit_rate(epsilons, values) -> RateFit:
    """Fit a power law in the noise level through positive data points."""
    eps = np.asarray(epsilons, dtype=float)
    vals = np.asarray(values, dtype=float)
    if eps.shape != vals.shape or eps.ndim != 1 or eps.shape[0] < 3:
        raise ValueError("need matching 1-d arrays with at least three points")
    if np.any(eps <= 0) or np.any(vals <= 0):
        raise ValueError("rate fits need strictly positive data")
    slope, intercept = np.polyfit(np.log(eps), np.log(vals), 1)
    misfit = float(np.max(np.abs(np.log(vals) - (slope * np.log(eps) + intercept))))
    return RateFit(float(slope), float(intercept), tuple(eps), tuple(vals), misfit)
