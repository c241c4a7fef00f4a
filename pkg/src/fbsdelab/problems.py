"""Problem definitions and structural-assumption checkers.

A problem is the coefficient quadruple (f, g, sigma, h) of the coupled
forward-backward system

    dX = f(s, X, Y) ds + sqrt(eps) sigma(s, X, Y) dW,      X(t) = x,
    dY = -g(s, X, Y, Z) ds + Z dW,                         Y(T) = h(X(T)),

together with the horizon, the initial state, and the noise grid.  The
checkers sample the structural conditions the theory rests on: Lipschitz
bounds, a joint monotonicity inequality for the stacked operator
(-g, f, sqrt(eps) sigma) against the ordering (x, y, z), linear growth, and
uniform ellipticity of sigma sigma^T.  Sampling can refute a condition and
can certify it only up to the sampled resolution, which is why every entry
reports its worst sample and a margin.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import EvaluationError

_REL_SLACK = 0.01  # declared constants may be undershot by estimates, never
                   # exceeded by more than this relative slack


@dataclass(frozen=True)
class CoefficientSet:
    """Coefficient maps of one problem plus its declared constants.

    The maps must be pure and vectorized: states carry a trailing component
    axis (x, y of shape (..., n); z of shape (..., n, d)); the time argument
    broadcasts against the leading batch axes.  f and sigma do not read z,
    h reads only x.
    """

    f: Callable          # (t, x, y) -> (..., n)
    g: Callable          # (t, x, y, z) -> (..., n)
    sigma: Callable      # (t, x, y) -> (..., n, d)
    h: Callable          # (x,) -> (..., n)
    lipschitz_c1: float  # declared joint Lipschitz constant
    monotonicity_c2: float  # declared monotonicity constant, > 0
    growth_lambda: float    # declared linear-growth constant

    def __post_init__(self):
        if not self.lipschitz_c1 > 0:
            raise ValueError("lipschitz_c1 must be positive")
        if not self.monotonicity_c2 > 0:
            raise ValueError("monotonicity_c2 must be positive")
        if not self.growth_lambda > 0:
            raise ValueError("growth_lambda must be positive")


@dataclass(frozen=True)
class SampleBox:
    """Axis-aligned box in (x, y, z) space used by the samplers."""

    x_lo: np.ndarray
    x_hi: np.ndarray
    y_lo: np.ndarray
    y_hi: np.ndarray
    z_lo: np.ndarray
    z_hi: np.ndarray

    @staticmethod
    def cube(n: int, d: int, radius: float = 2.0) -> "SampleBox":
        xn = np.full(n, float(radius))
        zn = np.full((n, d), float(radius))
        return SampleBox(-xn, xn, -xn, xn, -zn, zn)


@dataclass(frozen=True)
class ProblemSpec:
    """A fully specified experiment problem.

    epsilon_grid is the ordered list of noise levels a sweep visits; it must
    be strictly decreasing inside (0, 1].  The truncation box is where fields
    are solved; sample_box is where the assumption checkers probe.
    """

    coefficients: CoefficientSet
    n: int
    d: int
    t0: float
    horizon: float          # terminal time T
    x0: np.ndarray          # shape (n,)
    epsilon_grid: tuple
    box_lo: np.ndarray      # truncation box, shape (n,)
    box_hi: np.ndarray
    sample_box: SampleBox
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n not in (1, 2):
            raise ValueError("spatial dimension must be 1 or 2")
        if self.d < 1:
            raise ValueError("noise dimension must be >= 1")
        if not (0.0 <= self.t0 < self.horizon):
            raise ValueError("need 0 <= t0 < T")
        eps = tuple(float(e) for e in self.epsilon_grid)
        if any(not (0.0 < e <= 1.0) for e in eps):
            raise ValueError("epsilon grid entries must lie in (0, 1]")
        if any(a <= b for a, b in zip(eps, eps[1:])):
            raise ValueError("epsilon grid must be strictly decreasing")
        object.__setattr__(self, "epsilon_grid", eps)
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=float)))
        object.__setattr__(self, "box_lo", np.atleast_1d(np.asarray(self.box_lo, dtype=float)))
        object.__setattr__(self, "box_hi", np.atleast_1d(np.asarray(self.box_hi, dtype=float)))
        if self.x0.shape != (self.n,):
            raise ValueError("x0 must have shape (n,)")
        if np.any(self.box_hi <= self.box_lo):
            raise ValueError("truncation box is empty")
        if np.any(self.x0 <= self.box_lo) or np.any(self.x0 >= self.box_hi):
            raise ValueError("x0 must lie strictly inside the truncation box")

    @property
    def terminal_time(self) -> float:
        return self.horizon


@dataclass(frozen=True)
class AssumptionEntry:
    name: str
    constant: float                 # estimated or largest-admissible constant
    margin: float                   # >= 0 means the check passed
    worst_input: Optional[np.ndarray]
    samples: int
    passed: bool


@dataclass
class AssumptionReport:
    """Per-assumption sampled evidence.  passed is the conjunction of entries."""

    entries: dict

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries.values())

    def __getitem__(self, key) -> AssumptionEntry:
        return self.entries[key]


def _finite_or_raise(values, what, where):
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(values)))
        raise EvaluationError(f"{what} returned a non-finite value", offending_input=where)


def _draw_states(rng, box: SampleBox, samples: int):
    n = box.x_lo.shape[0]
    d = box.z_lo.shape[1]
    x = rng.uniform(box.x_lo, box.x_hi, size=(samples, n))
    y = rng.uniform(box.y_lo, box.y_hi, size=(samples, n))
    z = rng.uniform(box.z_lo, box.z_hi, size=(samples, n, d))
    return x, y, z


def estimate_lipschitz(problem: ProblemSpec, samples: int = 4096,
                       seed: int = 0) -> AssumptionReport:
    """Sampled Lipschitz estimates for f, g, sigma (in state) and h.

    Each estimate is the maximum difference quotient |map(u1) - map(u2)| /
    |u1 - u2| over sampled pairs drawn uniformly from the problem's sample
    box, with both points of a pair sharing the time argument.  The estimate
    is monotone in the sample count for a fixed seed, so it never exceeds the
    true constant from below incorrectly: it can only under-report.
    An entry fails when its estimate exceeds the declared constant by more
    than one percent.
    """
    co = problem.coefficients
    rng = np.random.default_rng(seed)
    t = rng.uniform(problem.t0, problem.horizon, size=(samples, 1))
    x1, y1, z1 = _draw_states(rng, problem.sample_box, samples)
    x2, y2, z2 = _draw_states(rng, problem.sample_box, samples)

    def quotients(delta_out, *delta_ins):
        dist = np.sqrt(sum(np.sum(di.reshape(samples, -1) ** 2, axis=1) for di in delta_ins))
        num = np.sqrt(np.sum(delta_out.reshape(samples, -1) ** 2, axis=1))
        keep = dist > 0
        q = np.zeros(samples)
        q[keep] = num[keep] / dist[keep]
        return q

    f1 = co.f(t, x1, y1)
    f2 = co.f(t, x2, y2)
    _finite_or_raise(f1, "f", np.concatenate([x1, y1], axis=1))
    q_f = quotients(f1 - f2, x1 - x2, y1 - y2)

    g1 = co.g(t, x1, y1, z1)
    g2 = co.g(t, x2, y2, z2)
    _finite_or_raise(g1, "g", np.concatenate([x1, y1], axis=1))
    q_g = quotients(g1 - g2, x1 - x2, y1 - y2, z1 - z2)

    # sigma output carries one extra axis, so give t one more singleton axis
    s1 = co.sigma(t[..., None], x1, y1)
    s2 = co.sigma(t[..., None], x2, y2)
    _finite_or_raise(s1, "sigma", np.concatenate([x1, y1], axis=1))
    q_s = quotients(s1 - s2, x1 - x2, y1 - y2)

    h1 = co.h(x1)
    h2 = co.h(x2)
    _finite_or_raise(h1, "h", x1)
    q_h = quotients(h1 - h2, x1 - x2)

    entries = {}
    for name, q, pair in (
        ("lip_f", q_f, (x1, y1, x2, y2)),
        ("lip_g", q_g, (x1, y1, z1, x2, y2, z2)),
        ("lip_sigma", q_s, (x1, y1, x2, y2)),
        ("lip_h", q_h, (x1, x2)),
    ):
        k = int(np.argmax(q))
        est = float(q[k])
        worst = np.concatenate([np.ravel(p[k]) for p in pair])
        margin = co.lipschitz_c1 * (1.0 + _REL_SLACK) - est
        entries[name] = AssumptionEntry(name, est, margin, worst, samples, margin >= 0.0)
    return AssumptionReport(entries)


def check_monotonicity(problem: ProblemSpec, epsilon: float, samples: int = 4096,
                       seed: int = 0) -> AssumptionReport:
    """Sampled check of the joint monotonicity inequality at one noise level.

    For state pairs u = (x, y, z) the stacked operator A(u) = (-g, f,
    sqrt(eps) sigma) must satisfy

        <A(u1) - A(u2), u1 - u2>  <=  -(C2 + sqrt(eps)) (|dx|^2 + |dy|^2),

    and the terminal map must satisfy <h(x1) - h(x2), x1 - x2> >= C2 |dx|^2.
    The entry ``mono_pair`` reports the largest admissible C2 at this eps
    (the sampled infimum of -<dA, du>/(|dx|^2 + |dy|^2) minus sqrt(eps)) and
    the margin against the declared constant; ``mono_h`` does the same for
    the terminal clause.  Pairs with dx = dy = 0 impose no constraint here
    and are skipped.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    co = problem.coefficients
    rng = np.random.default_rng(seed)
    samples = int(samples)
    t = rng.uniform(problem.t0, problem.horizon, size=(samples, 1))
    x1, y1, z1 = _draw_states(rng, problem.sample_box, samples)
    x2, y2, z2 = _draw_states(rng, problem.sample_box, samples)
    dx, dy, dz = x1 - x2, y1 - y2, z1 - z2

    root_eps = np.sqrt(epsilon)
    dg = co.g(t, x1, y1, z1) - co.g(t, x2, y2, z2)
    df = co.f(t, x1, y1) - co.f(t, x2, y2)
    dsig = co.sigma(t[..., None], x1, y1) - co.sigma(t[..., None], x2, y2)
    _finite_or_raise(dg, "g", None)
    _finite_or_raise(df, "f", None)
    _finite_or_raise(dsig, "sigma", None)

    inner = (np.sum(-dg * dx, axis=1) + np.sum(df * dy, axis=1)
             + root_eps * np.sum(dsig * dz, axis=(1, 2)))
    weight = np.sum(dx * dx, axis=1) + np.sum(dy * dy, axis=1)
    keep = weight > 0
    quotient = -inner[keep] / weight[keep]
    k_rel = int(np.argmin(quotient))
    k = int(np.nonzero(keep)[0][k_rel])
    admissible = float(np.min(quotient)) - root_eps
    margin = admissible - co.monotonicity_c2
    worst = np.concatenate([x1[k], y1[k], z1[k].ravel(), x2[k], y2[k], z2[k].ravel()])
    pair_entry = AssumptionEntry("mono_pair", admissible, margin, worst,
                                 int(np.count_nonzero(keep)), margin >= 0.0)

    dh = co.h(x1) - co.h(x2)
    _finite_or_raise(dh, "h", x1)
    wx = np.sum(dx * dx, axis=1)
    keep_h = wx > 0
    q_h = np.sum(dh * dx, axis=1)[keep_h] / wx[keep_h]
    kh_rel = int(np.argmin(q_h))
    kh = int(np.nonzero(keep_h)[0][kh_rel])
    admissible_h = float(np.min(q_h))
    margin_h = admissible_h - co.monotonicity_c2
    h_entry = AssumptionEntry("mono_h", admissible_h, margin_h,
                              np.concatenate([x1[kh], x2[kh]]),
                              int(np.count_nonzero(keep_h)), margin_h >= 0.0)
    return AssumptionReport({"mono_pair": pair_entry, "mono_h": h_entry})


def check_growth_and_ellipticity(problem: ProblemSpec, samples: int = 4096,
                                 seed: int = 0) -> AssumptionReport:
    """Sampled linear-growth ratios, uniform bounds, and ellipticity floor.

    Reports max |f|/(1+|x|+|y|), max |g|/(1+|x|+|y|+|z|), max |sigma|
    (Frobenius), max |h|, and the sampled minimum eigenvalue of
    sigma sigma^T.  Growth entries fail when exceeding the declared growth
    constant by more than one percent; the ellipticity entry fails when the
    sampled floor is not strictly positive.
    """
    co = problem.coefficients
    rng = np.random.default_rng(seed)
    t = rng.uniform(problem.t0, problem.horizon, size=(samples, 1))
    x, y, z = _draw_states(rng, problem.sample_box, samples)

    norm = lambda v: np.sqrt(np.sum(np.reshape(v, (samples, -1)) ** 2, axis=1))
    nx, ny, nz = norm(x), norm(y), norm(z)

    fv = co.f(t, x, y)
    gv = co.g(t, x, y, z)
    sv = co.sigma(t[..., None], x, y)
    hv = co.h(x)
    for vals, what in ((fv, "f"), (gv, "g"), (sv, "sigma"), (hv, "h")):
        _finite_or_raise(vals, what, np.concatenate([x, y], axis=1))

    ratio_f = norm(fv) / (1.0 + nx + ny)
    ratio_g = norm(gv) / (1.0 + nx + ny + nz)
    bound_s = norm(sv)
    bound_h = norm(hv) / (1.0 + nx)

    a = np.einsum("kid,kjd->kij", sv, sv)
    eig = np.linalg.eigvalsh(a)
    lam_min = eig[:, 0]

    lam = co.growth_lambda
    entries = {}
    for name, vals in (("growth_f", ratio_f), ("growth_g", ratio_g),
                       ("bound_sigma", bound_s), ("bound_h", bound_h)):
        k = int(np.argmax(vals))
        est = float(vals[k])
        margin = lam * (1.0 + _REL_SLACK) - est
        entries[name] = AssumptionEntry(name, est, margin,
                                        np.concatenate([x[k], y[k], z[k].ravel()]),
                                        samples, margin >= 0.0)
    k = int(np.argmin(lam_min))
    floor = float(lam_min[k])
    entries["ellipticity"] = AssumptionEntry("ellipticity", floor, floor,
                                             np.concatenate([x[k], y[k]]),
                                             samples, floor > 0.0)
    return AssumptionReport(entries)


# ---------------------------------------------------------------------------
# Built-in registry
# ---------------------------------------------------------------------------

def _linear_coefficients(a, b, c, sigma0, n, d):
    eye = np.eye(n, d)

    def f(t, x, y):
        return -a * y

    def g(t, x, y, z):
        return b * x

    def sigma(t, x, y):
        return np.broadcast_to(sigma0 * eye, np.shape(x) + (d,)).copy()

    def h(x):
        return c * x

    c1 = max(abs(a), abs(b), abs(c), 1e-12)
    c2 = max(min(min(a, b) - 1.0, c), 1e-9)
    lam = max(abs(a), abs(b), abs(c), abs(sigma0), 1e-12)
    return CoefficientSet(f, g, sigma, h, c1, c2, lam)


def _tanh_coefficients(a, b, zeta, sigma0, n, d):
    eye = np.eye(n, d)

    def f(t, x, y):
        return -a * np.tanh(y)

    def g(t, x, y, z):
        return b * np.tanh(x) + zeta * z[..., 0]

    def sigma(t, x, y):
        return np.broadcast_to(sigma0 * eye, np.shape(x) + (d,)).copy()

    def h(x):
        return x

    c1 = max(abs(a), abs(b), abs(zeta), 1.0)
    lam = max(abs(a), abs(b), abs(zeta), abs(sigma0), 1.0)
    return CoefficientSet(f, g, sigma, h, c1, 0.01, lam)


def _flat_terminal_coefficients(a, c, sigma0, n, d):
    eye = np.eye(n, d)

    def f(t, x, y):
        return -a * y

    def g(t, x, y, z):
        return 0.0 * x

    def sigma(t, x, y):
        return np.broadcast_to(sigma0 * eye, np.shape(x) + (d,)).copy()

    def h(x):
        return np.full_like(x, float(c))

    return CoefficientSet(f, g, sigma, h, max(abs(a), 1e-6), 1e-6,
                          max(abs(a), abs(c), abs(sigma0), 1e-6))


REGISTRY = ("linear", "tanh", "flat-terminal")


def build_problem(name: str, *, a=2.0, b=2.0, c=1.0, sigma0=1.0, zeta=0.5,
                  t0=0.0, horizon=0.5, x0=1.0, n=1, d=1,
                  box=(-6.0, 6.0), sample_radius=2.0,
                  epsilons=(1.0, 0.3, 0.1, 0.03)) -> ProblemSpec:
    """Instantiate a registry problem.

    ``linear``        f = -a y, g = b x, sigma = sigma0 I, h(x) = c x.
                      At a = b = 2, c = 1 the field is the identity at every
                      noise level and the forward state is a mean-reverting
                      Gaussian, so everything has a closed form.
    ``tanh``          f = -a tanh(y), g = b tanh(x) + zeta z, sigma = sigma0 I,
                      h(x) = x.  Smooth, bounded drift; the field genuinely
                      depends on the noise level through z and the diffusion
                      term.
    ``flat-terminal`` f = -a y, g = 0, h = c constant: the backward state is
                      constant, handy for conditional-variation sanity checks.
    """
    if name == "linear":
        co = _linear_coefficients(a, b, c, sigma0, n, d)
        params = dict(a=a, b=b, c=c, sigma0=sigma0)
    elif name == "tanh":
        co = _tanh_coefficients(a, b, zeta, sigma0, n, d)
        params = dict(a=a, b=b, zeta=zeta, sigma0=sigma0)
    elif name == "flat-terminal":
        co = _flat_terminal_coefficients(a, c, sigma0, n, d)
        params = dict(a=a, c=c, sigma0=sigma0)
    else:
        raise ValueError(f"unknown registry problem {name!r}; known: {REGISTRY}")
    x0v = np.full(n, float(x0)) if np.ndim(x0) == 0 else np.asarray(x0, dtype=float)
    return ProblemSpec(
        coefficients=co, n=n, d=d, t0=float(t0), horizon=float(horizon),
        x0=x0v, epsilon_grid=tuple(epsilons),
        box_lo=np.full(n, float(box[0])), box_hi=np.full(n, float(box[1])),
        sample_box=SampleBox.cube(n, d, sample_radius),
        name=name, params=params,
    )
