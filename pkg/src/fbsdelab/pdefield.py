"""Decoupling field solver on a truncated space-time box.

The field u(t, x) ties the backward state to the forward state, Y = u(s, X),
and solves the backward quasilinear system

    du/dt + g(t, x, u, sqrt(eps) Du sigma) + sum_i f_i(t, x, u) du/dx_i
          + (eps/2) sum_ij a_ij(t, x, u) d2u/dx_i dx_j = 0,     u(T, .) = h,

with a = sigma sigma^T.  Time marches backward from the terminal slice with a
semi-implicit step: the second-order term is implicit (banded solve in 1D,
sparse in 2D; mixed derivatives stay explicit), advection and source are
explicit with upwinded first differences, and all coefficients are frozen at
a Picard iterate of the unknown slice that is refreshed until successive
iterates agree.  Lateral Dirichlet data comes from the deterministic limit
field; as the noise level drops the equation degenerates to a transport
equation, which is why the advective time-step bound is the one enforced.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from . import limits
from .errors import ConfigError, EvaluationError, IterationError, ShapeError, ShootingError
from .problems import ProblemSpec

DEFAULT_PICARD_TOL = 1e-10
DEFAULT_PICARD_MAX = 50
DEFAULT_MARGIN = 0.25


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform tensor grid on [t0, T] x box, with a declared safety margin.

    The margin is the fraction of each axis width, measured from each lateral
    face, that evaluation should stay away from so truncation boundary error
    cannot pollute results.
    """

    t_nodes: np.ndarray          # (Nt,)
    axes: tuple                  # per-axis node arrays, each (Nx_i,)
    margin_fraction: float = DEFAULT_MARGIN

    def __post_init__(self):
        t = np.asarray(self.t_nodes, dtype=float)
        if t.ndim != 1 or t.shape[0] < 2 or np.any(np.diff(t) <= 0):
            raise ShapeError("t_nodes must be strictly increasing, length >= 2")
        if not np.allclose(np.diff(t), t[1] - t[0], rtol=1e-12, atol=1e-14):
            raise ShapeError("t_nodes must be uniform")
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        if not 1 <= len(axes) <= 2:
            raise ShapeError("only 1 or 2 spatial axes supported")
        for a in axes:
            if a.ndim != 1 or a.shape[0] < 3 or np.any(np.diff(a) <= 0):
                raise ShapeError("each axis needs >= 3 strictly increasing nodes")
            if not np.allclose(np.diff(a), a[1] - a[0], rtol=1e-12, atol=1e-14):
                raise ShapeError("spatial axes must be uniform")
        if not 0.0 < self.margin_fraction < 0.5:
            raise ShapeError("margin fraction must lie in (0, 0.5)")
        object.__setattr__(self, "t_nodes", t)
        object.__setattr__(self, "axes", axes)

    @property
    def n(self) -> int:
        return len(self.axes)

    @property
    def dt(self) -> float:
        return float(self.t_nodes[1] - self.t_nodes[0])

    @property
    def dx(self) -> tuple:
        return tuple(float(a[1] - a[0]) for a in self.axes)

    @property
    def shape(self) -> tuple:
        return (self.t_nodes.shape[0],) + tuple(a.shape[0] for a in self.axes)

    @property
    def safe_lo(self) -> np.ndarray:
        return np.array([a[0] + self.margin_fraction * (a[-1] - a[0]) for a in self.axes])

    @property
    def safe_hi(self) -> np.ndarray:
        return np.array([a[-1] - self.margin_fraction * (a[-1] - a[0]) for a in self.axes])

    def mesh(self) -> np.ndarray:
        """Spatial nodes as an array of shape (*space_shape, n)."""
        grids = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(grids, axis=-1)

    def time_index(self, t: float) -> int:
        """Nearest time node; raises outside [t0, T]."""
        t0, t1 = float(self.t_nodes[0]), float(self.t_nodes[-1])
        if not (t0 - 1e-12 <= t <= t1 + 1e-12):
            raise ValueError(f"time {t} outside [{t0}, {t1}]")
        return int(round((t - t0) / self.dt))


def make_grid(problem: ProblemSpec, n_t: int, n_x, margin: float = DEFAULT_MARGIN) -> SpaceTimeGrid:
    n_x = (n_x,) * problem.n if np.ndim(n_x) == 0 else tuple(n_x)
    axes = tuple(np.linspace(problem.box_lo[i], problem.box_hi[i], n_x[i])
                 for i in range(problem.n))
    return SpaceTimeGrid(np.linspace(problem.t0, problem.horizon, n_t), axes, margin)


@dataclass(frozen=True)
class BoundaryTable:
    """Dirichlet data on the lateral boundary: values[j, k] at time node j and
    boundary node k, with flat_index giving each boundary node's position in
    the flattened spatial grid."""

    flat_index: np.ndarray      # (n_bnodes,)
    values: np.ndarray          # (Nt, n_bnodes, n)
    source: str                 # "limit" or "characteristic"


def boundary_node_indices(grid: SpaceTimeGrid) -> np.ndarray:
    if grid.n == 1:
        nx = grid.axes[0].shape[0]
        return np.array([0, nx - 1])
    nx, ny = (a.shape[0] for a in grid.axes)
    mask = np.zeros((nx, ny), dtype=bool)
    mask[0, :] = mask[-1, :] = True
    mask[:, 0] = mask[:, -1] = True
    return np.nonzero(mask.ravel())[0]


def limit_boundary(problem: ProblemSpec, grid: SpaceTimeGrid,
                   tol: float = limits.DEFAULT_TOL) -> BoundaryTable:
    """Boundary data from the limit field at every (time node, boundary node).

    One batched shooting run covers the whole table.  If shooting fails the
    data falls back to carrying the terminal map along the characteristics
    of the forward drift, which is exact for vanishing driver.
    """
    flat = boundary_node_indices(grid)
    mesh = grid.mesh().reshape(-1, grid.n)
    xb = mesh[flat]
    n_t = grid.t_nodes.shape[0]
    start = np.repeat(np.arange(n_t), flat.shape[0])
    xq = np.tile(xb, (n_t, 1))
    try:
        vals = limits.limit_u_values(problem, grid.t_nodes, start, xq, tol=tol)
        source = "limit"
    except ShootingError:
        vals = limits.terminal_characteristic_values(problem, grid.t_nodes, start, xq)
        source = "characteristic"
    return BoundaryTable(flat, vals.reshape(n_t, flat.shape[0], problem.n), source)


def _gradient(values: np.ndarray, grid: SpaceTimeGrid) -> np.ndarray:
    """Spatial gradient of one slice, shape (*space, n, n): [l, i] is
    du^l/dx_i.  Central differences inside, second-order one-sided on the
    lateral faces."""
    space_shape = values.shape[:-1]
    n = values.shape[-1]
    out = np.empty(space_shape + (n, grid.n))
    for i in range(grid.n):
        dx = grid.dx[i]
        d = np.empty_like(values)
        sl = [slice(None)] * values.ndim
        sl_m = [slice(None)] * values.ndim
        sl_p = [slice(None)] * values.ndim
        sl[i], sl_m[i], sl_p[i] = slice(1, -1), slice(0, -2), slice(2, None)
        d[tuple(sl)] = (values[tuple(sl_p)] - values[tuple(sl_m)]) / (2 * dx)
        first = [slice(None)] * values.ndim
        first[i] = 0
        second = list(first)
        second[i] = 1
        third = list(first)
        third[i] = 2
        d[tuple(first)] = (-3 * values[tuple(first)] + 4 * values[tuple(second)]
                           - values[tuple(third)]) / (2 * dx)
        last = [slice(None)] * values.ndim
        last[i] = -1
        second = list(last)
        second[i] = -2
        third = list(last)
        third[i] = -3
        d[tuple(last)] = (3 * values[tuple(last)] - 4 * values[tuple(second)]
                          + values[tuple(third)]) / (2 * dx)
        out[..., :, i] = d
    return out


@dataclass(frozen=True)
class DecouplingField:
    """Solved field u and its spatial gradient on a space-time grid."""

    grid: SpaceTimeGrid
    epsilon: float
    u_values: np.ndarray        # (Nt, *space, n)
    grad_values: np.ndarray     # (Nt, *space, n, n)
    boundary_source: str = "limit"

    @property
    def n(self) -> int:
        return self.u_values.shape[-1]

    def _check_inside(self, x):
        for i, a in enumerate(self.grid.axes):
            if np.any(x[:, i] < a[0] - 1e-12) or np.any(x[:, i] > a[-1] + 1e-12):
                raise ValueError("evaluation point outside the truncated box")

    def _interp(self, table_j: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Multilinear interpolation of one time slice at points x (B, n)."""
        grid = self.grid
        if grid.n == 1:
            a = grid.axes[0]
            idx = np.clip(np.searchsorted(a, x[:, 0]), 1, a.shape[0] - 1)
            w = (x[:, 0] - a[idx - 1]) / (a[idx] - a[idx - 1])
            lo = table_j[idx - 1]
            hi = table_j[idx]
            return lo + (hi - lo) * w.reshape((-1,) + (1,) * (lo.ndim - 1))
        ax, ay = grid.axes
        ix = np.clip(np.searchsorted(ax, x[:, 0]), 1, ax.shape[0] - 1)
        iy = np.clip(np.searchsorted(ay, x[:, 1]), 1, ay.shape[0] - 1)
        wx = ((x[:, 0] - ax[ix - 1]) / (ax[ix] - ax[ix - 1]))
        wy = ((x[:, 1] - ay[iy - 1]) / (ay[iy] - ay[iy - 1]))
        wx = wx.reshape((-1,) + (1,) * (table_j.ndim - 2))
        wy = wy.reshape((-1,) + (1,) * (table_j.ndim - 2))
        v00 = table_j[ix - 1, iy - 1]
        v10 = table_j[ix, iy - 1]
        v01 = table_j[ix - 1, iy]
        v11 = table_j[ix, iy]
        return ((1 - wx) * (1 - wy) * v00 + wx * (1 - wy) * v10
                + (1 - wx) * wy * v01 + wx * wy * v11)

    def evaluate_at_index(self, j: int, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        self._check_inside(x)
        return self._interp(self.u_values[j], x)

    def gradient_at_index(self, j: int, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        self._check_inside(x)
        return self._interp(self.grad_values[j], x)

    def evaluate(self, t: float, x: np.ndarray) -> np.ndarray:
        """Field value at (t, x): nearest node in time, multilinear in space."""
        return self.evaluate_at_index(self.grid.time_index(t), x)

    def gradient(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.gradient_at_index(self.grid.time_index(t), x)


@dataclass(frozen=True)
class FieldBounds:
    sup_u: float
    sup_grad: float
    terminal_mismatch: float


def field_bounds(field: DecouplingField, problem: ProblemSpec) -> FieldBounds:
    """Uniform norms of the field and its gradient, plus the recomputed
    terminal mismatch against the terminal map (zero by construction)."""
    sup_u = float(np.max(np.linalg.norm(field.u_values, axis=-1)))
    gshape = field.grad_values.shape
    flat = field.grad_values.reshape(gshape[:-2] + (-1,))
    sup_grad = float(np.max(np.linalg.norm(flat, axis=-1)))
    mesh = field.grid.mesh().reshape(-1, field.grid.n)
    hv = problem.coefficients.h(mesh)
    mismatch = float(np.max(np.abs(field.u_values[-1].reshape(-1, field.n) - hv)))
    return FieldBounds(sup_u, sup_grad, mismatch)


def field_gap(field_a: DecouplingField, field_b: DecouplingField) -> float:
    """Sup-norm gap between two fields on the identical grid."""
    ga, gb = field_a.grid, field_b.grid
    if ga.shape != gb.shape or not np.allclose(ga.t_nodes, gb.t_nodes):
        raise ShapeError("fields live on different grids")
    for a, b in zip(ga.axes, gb.axes):
        if not np.allclose(a, b):
            raise ShapeError("fields live on different grids")
    return float(np.max(np.abs(field_a.u_values - field_b.u_values)))


def _advective_cfl(problem: ProblemSpec, grid: SpaceTimeGrid, boundary: BoundaryTable):
    """Estimate max |f_i| over the box and check dt <= dx_i / max|f_i|.

    The drift is probed with the terminal map as stand-in for the unknown
    field, together with the boundary data; generous but not watertight,
    hence it runs before any stepping so violations fail fast.
    """
    mesh = grid.mesh().reshape(-1, problem.n)
    co = problem.coefficients
    probe_u = [co.h(mesh)]
    bvals = boundary.values.reshape(-1, problem.n)
    probe_x = [mesh, mesh[boundary.flat_index][None, :, :].repeat(
        boundary.values.shape[0], axis=0).reshape(-1, problem.n)]
    probe_u.append(bvals)
    fmax = np.zeros(problem.n)
    for t in (grid.t_nodes[0], 0.5 * (grid.t_nodes[0] + grid.t_nodes[-1]), grid.t_nodes[-1]):
        for xs, us in zip(probe_x, probe_u):
            fv = np.abs(co.f(t, xs, us))
            fmax = np.maximum(fmax, fv.max(axis=0))
    for i in range(problem.n):
        if fmax[i] > 0 and grid.dt > grid.dx[i] / fmax[i] * (1 + 1e-9):
            raise ConfigError(
                f"advective time-step bound violated on axis {i}: "
                f"dt={grid.dt:g} > dx/max|f| = {grid.dx[i] / fmax[i]:g}; "
                "refine the time grid or shrink the box")


def _upwind_advection(v, f_vals, grid: SpaceTimeGrid):
    """sum_i f_i du^l/dx_i with first-order upwind differences, at all nodes
    (one-sided toward the interior on the faces)."""
    out = np.zeros_like(v)
    for i in range(grid.n):
        dx = grid.dx[i]
        nd = v.ndim
        sl_c = [slice(None)] * nd
        sl_p = [slice(None)] * nd
        sl_m = [slice(None)] * nd
        sl_c[i], sl_p[i], sl_m[i] = slice(0, -1), slice(1, None), slice(0, -1)
        fwd = np.empty_like(v)
        fwd[tuple(sl_m)] = (v[tuple(sl_p)] - v[tuple(sl_c)]) / dx
        last = [slice(None)] * nd
        last[i] = -1
        prev = [slice(None)] * nd
        prev[i] = -2
        fwd[tuple(last)] = (v[tuple(last)] - v[tuple(prev)]) / dx
        bwd = np.empty_like(v)
        sl_c2 = [slice(None)] * nd
        sl_c2[i] = slice(1, None)
        bwd[tuple(sl_c2)] = fwd[tuple(sl_m)]
        first = [slice(None)] * nd
        first[i] = 0
        second = [slice(None)] * nd
        second[i] = 1
        bwd[tuple(first)] = (v[tuple(second)] - v[tuple(first)]) / dx
        fi = f_vals[..., i:i + 1]
        out += fi * np.where(fi >= 0, fwd, bwd)
    return out


def _frozen_slice_terms(problem, grid, epsilon, t, v):
    """Coefficient fields frozen at iterate v: drift, diffusion matrix,
    driver (with its sqrt(eps) Du sigma argument), and upwind advection."""
    co = problem.coefficients
    mesh = grid.mesh()
    fv = co.f(t, mesh, v)
    sv = co.sigma(t, mesh, v)
    av = np.einsum("...id,...jd->...ij", sv, sv)
    gradv = _gradient(v, grid)
    zv = np.sqrt(epsilon) * np.einsum("...li,...im->...lm", gradv, sv)
    gv = co.g(t, mesh, v, zv)
    for vals, name in ((fv, "f"), (sv, "sigma"), (gv, "g")):
        if not np.all(np.isfinite(vals)):
            raise EvaluationError(f"{name} returned a non-finite value during the field solve")
    adv = _upwind_advection(v, fv, grid)
    return fv, av, gv, adv


def _implicit_step_1d(grid, epsilon, av, rhs, b_lo, b_hi):
    """Solve (I - dt (eps/2) a11 Dxx) u = rhs with Dirichlet ends."""
    dx = grid.dx[0]
    dt = grid.dt
    c = dt * 0.5 * epsilon * av[1:-1, 0, 0] / dx ** 2     # (m,)
    m = c.shape[0]
    ab = np.zeros((3, m))
    ab[1] = 1.0 + 2.0 * c
    ab[0, 1:] = -c[:-1]
    ab[2, :-1] = -c[1:]
    b = rhs[1:-1].copy()
    b[0] += c[0] * b_lo
    b[-1] += c[-1] * b_hi
    interior = scipy.linalg.solve_banded((1, 1), ab, b)
    out = np.empty_like(rhs)
    out[0] = b_lo
    out[-1] = b_hi
    out[1:-1] = interior
    return out


def _implicit_step_2d(grid, epsilon, av, rhs, edge_values, edge_flat):
    """Solve (I - dt (eps/2)(a00 Dxx + a11 Dyy)) u = rhs with Dirichlet edges."""
    dx, dy = grid.dx
    dt = grid.dt
    nx, ny = (a.shape[0] for a in grid.axes)
    n_comp = rhs.shape[-1]
    cx = dt * 0.5 * epsilon * av[1:-1, 1:-1, 0, 0] / dx ** 2
    cy = dt * 0.5 * epsilon * av[1:-1, 1:-1, 1, 1] / dy ** 2
    mx, my = nx - 2, ny - 2
    size = mx * my
    idx = np.arange(size).reshape(mx, my)
    diag = 1.0 + 2.0 * cx + 2.0 * cy
    rows = [idx.ravel()]
    cols = [idx.ravel()]
    data = [diag.ravel()]
    rows.append(idx[1:, :].ravel()); cols.append(idx[:-1, :].ravel())
    data.append(-cx[1:, :].ravel())
    rows.append(idx[:-1, :].ravel()); cols.append(idx[1:, :].ravel())
    data.append(-cx[:-1, :].ravel())
    rows.append(idx[:, 1:].ravel()); cols.append(idx[:, :-1].ravel())
    data.append(-cy[:, 1:].ravel())
    rows.append(idx[:, :-1].ravel()); cols.append(idx[:, 1:].ravel())
    data.append(-cy[:, :-1].ravel())
    mat = scipy.sparse.csc_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(size, size))
    lu = scipy.sparse.linalg.splu(mat)

    full = np.empty((nx, ny, n_comp))
    full.reshape(-1, n_comp)[edge_flat] = edge_values
    b = rhs[1:-1, 1:-1].copy()
    b[0, :] += cx[0, :, None] * full[0, 1:-1]
    b[-1, :] += cx[-1, :, None] * full[-1, 1:-1]
    b[:, 0] += cy[:, 0, None] * full[1:-1, 0]
    b[:, -1] += cy[:, -1, None] * full[1:-1, -1]
    for l in range(n_comp):
        full[1:-1, 1:-1, l] = lu.solve(b[..., l].ravel()).reshape(mx, my)
    return full


def _cross_term_2d(grid, epsilon, av, v):
    """Explicit mixed-derivative part dt * eps * a01 * dxy(v) on the interior."""
    dx, dy = grid.dx
    dxy = np.zeros_like(v)
    dxy[1:-1, 1:-1] = (v[2:, 2:] - v[2:, :-2] - v[:-2, 2:] + v[:-2, :-2]) / (4 * dx * dy)
    return grid.dt * epsilon * av[..., 0, 1:2] * dxy


def solve_parabolic(problem: ProblemSpec, grid: SpaceTimeGrid, epsilon: float, *,
                    picard_tol: float = DEFAULT_PICARD_TOL,
                    picard_max: int = DEFAULT_PICARD_MAX,
                    boundary: Optional[BoundaryTable] = None) -> DecouplingField:
    """March the terminal slice backward through every time level.

    Each level is a frozen-coefficient linear problem: coefficients (and the
    driver's sqrt(eps) Du sigma argument) are evaluated at the current Picard
    iterate of the unknown slice, the second-order term is implicit, the
    rest explicit.  Iterates are refreshed until the sup change drops below
    picard_tol; running past picard_max raises with the last residual.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigError(f"epsilon must lie in [0, 1], got {epsilon}")
    if boundary is None:
        boundary = limit_boundary(problem, grid)
    _advective_cfl(problem, grid, boundary)

    co = problem.coefficients
    shape = grid.shape
    n = problem.n
    mesh = grid.mesh()
    u = np.empty(shape + (n,))
    u[-1] = co.h(mesh)

    edge_flat = boundary.flat_index
    n_t = shape[0]
    for j in range(n_t - 2, -1, -1):
        t = grid.t_nodes[j]
        v = u[j + 1].copy()
        v.reshape(-1, n)[edge_flat] = boundary.values[j]
        delta = np.inf
        for _ in range(picard_max):
            fv, av, gv, adv = _frozen_slice_terms(problem, grid, epsilon, t, v)
            rhs = u[j + 1] + grid.dt * (gv + adv)
            if grid.n == 1:
                u_new = np.empty_like(v)
                for l in range(n):
                    u_new[..., l] = _implicit_step_1d(
                        grid, epsilon, av, rhs[..., l],
                        boundary.values[j, 0, l], boundary.values[j, 1, l])
            else:
                rhs = rhs + _cross_term_2d(grid, epsilon, av, v)
                u_new = _implicit_step_2d(grid, epsilon, av, rhs,
                                          boundary.values[j], edge_flat)
            delta = float(np.max(np.abs(u_new - v)))
            v = u_new
            if delta < picard_tol:
                break
        else:
            raise IterationError(
                f"Picard freezing stalled at time level {j}: last change {delta:.3e} "
                f"after {picard_max} iterations", residual=delta)
        u[j] = v

    grad = np.empty(shape + (n, grid.n))
    for j in range(n_t):
        grad[j] = _gradient(u[j], grid)
    return DecouplingField(grid, float(epsilon), u, grad, boundary.source)


def limit_field(problem: ProblemSpec, grid: SpaceTimeGrid,
                tol: float = limits.DEFAULT_TOL) -> DecouplingField:
    """Limit field sampled on a grid by batched shooting at every node.

    Serves as Dirichlet-data source, as the zero-noise reference in gap
    sweeps, and as an independent oracle for the degenerate field solve.
    """
    mesh = grid.mesh().reshape(-1, problem.n)
    n_t = grid.t_nodes.shape[0]
    n_s = mesh.shape[0]
    start = np.repeat(np.arange(n_t - 1), n_s)
    xq = np.tile(mesh, (n_t - 1, 1))
    vals = limits.limit_u_values(problem, grid.t_nodes, start, xq, tol=tol)
    u = np.empty(grid.shape + (problem.n,))
    u[:-1] = vals.reshape((n_t - 1,) + grid.shape[1:] + (problem.n,))
    u[-1] = problem.coefficients.h(grid.mesh())
    grad = np.empty(grid.shape + (problem.n, grid.n))
    for j in range(n_t):
        grad[j] = _gradient(u[j], grid)
    return DecouplingField(grid, 0.0, u, grad, "limit")


def discrete_residual(field: DecouplingField, problem: ProblemSpec) -> float:
    """Audit the solved field against an independent discretization.

    Central differences in space and a one-sided difference in time are
    substituted into the backward equation; the max absolute residual over
    interior nodes measures the consistency of the scheme and must shrink
    under joint grid refinement.
    """
    grid = field.grid
    co = problem.coefficients
    mesh = grid.mesh()
    eps = field.epsilon
    worst = 0.0
    inner = tuple(slice(1, -1) for _ in range(grid.n))
    for j in range(grid.t_nodes.shape[0] - 1):
        t = grid.t_nodes[j]
        uj = field.u_values[j]
        grad = _gradient(uj, grid)
        sv = co.sigma(t, mesh, uj)
        av = np.einsum("...id,...jd->...ij", sv, sv)
        zv = np.sqrt(eps) * np.einsum("...li,...im->...lm", grad, sv)
        gv = co.g(t, mesh, uj, zv)
        fv = co.f(t, mesh, uj)
        adv = np.einsum("...i,...li->...l", fv, grad)
        diff = np.zeros_like(uj)
        for i in range(grid.n):
            dx = grid.dx[i]
            sl_c = [slice(None)] * uj.ndim
            sl_p = [slice(None)] * uj.ndim
            sl_m = [slice(None)] * uj.ndim
            sl_c[i], sl_p[i], sl_m[i] = slice(1, -1), slice(2, None), slice(0, -2)
            second = np.zeros_like(uj)
            second[tuple(sl_c)] = (uj[tuple(sl_p)] - 2 * uj[tuple(sl_c)]
                                   + uj[tuple(sl_m)]) / dx ** 2
            diff = diff + av[..., i, i:i + 1] * second
        if grid.n == 2:
            dx, dy = grid.dx
            mixed = np.zeros_like(uj)
            mixed[1:-1, 1:-1] = (uj[2:, 2:] - uj[2:, :-2] - uj[:-2, 2:]
                                 + uj[:-2, :-2]) / (4 * dx * dy)
            diff = diff + 2.0 * av[..., 0, 1:2] * mixed
        resid = (field.u_values[j + 1] - uj) / grid.dt + gv + adv + 0.5 * eps * diff
        worst = max(worst, float(np.max(np.abs(resid[inner]))))
    return worst


class FieldBank:
    """Shared cache of solved fields over one grid.

    Boundary data does not depend on the noise level, so the bank computes
    it once and reuses it per epsilon; the deterministic limit trajectory
    from the problem's start is cached too since every sweep compares
    against it.
    """

    def __init__(self, problem: ProblemSpec, grid: SpaceTimeGrid, *,
                 picard_tol: float = DEFAULT_PICARD_TOL,
                 picard_max: int = DEFAULT_PICARD_MAX):
        self.problem = problem
        self.grid = grid
        self.picard_tol = picard_tol
        self.picard_max = picard_max
        self._boundary: Optional[BoundaryTable] = None
        self._fields: dict = {}
        self._paths: dict = {}

    def boundary(self) -> BoundaryTable:
        if self._boundary is None:
            self._boundary = limit_boundary(self.problem, self.grid)
        return self._boundary

    def get(self, epsilon: float) -> DecouplingField:
        """Field at one noise level; the zero level is served by shooting
        (the limit field), not by the degenerate parabolic march."""
        key = float(epsilon)
        if key not in self._fields:
            if key == 0.0:
                self._fields[key] = limit_field(self.problem, self.grid)
            else:
                self._fields[key] = solve_parabolic(
                    self.problem, self.grid, key, picard_tol=self.picard_tol,
                    picard_max=self.picard_max, boundary=self.boundary())
        return self._fields[key]

    def deterministic_path(self, start_index: int = 0, x=None) -> limits.OdeSolution:
        xv = self.problem.x0 if x is None else np.atleast_1d(np.asarray(x, dtype=float))
        key = (start_index, tuple(np.round(xv, 15)))
        if key not in self._paths:
            t_nodes = self.grid.t_nodes[start_index:]
            self._paths[key] = limits.solve_bvp_shooting(
                self.problem, float(t_nodes[0]), xv, t_nodes=t_nodes)
        return self._paths[key]
