"""Plain-text serialization of fields, bundles, and limit solutions.

Formats are flat and columnar: a tagged header line, a few key=value and
axis lines, then one row of 17-significant-digit floats per record.  17
digits round-trip IEEE doubles exactly, so write -> read -> write is
byte-identical, which is what the reproducibility manifests rely on.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ShapeError
from .limits import OdeSolution
from .pdefield import DecouplingField, SpaceTimeGrid
from .simulate import TrajectoryBundle

FIELD_TAG = "fbsdelab-field 1"
BUNDLE_TAG = "fbsdelab-bundle 1"
SOLUTION_TAG = "fbsdelab-odesolution 1"


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def pretty(x: float) -> str:
    """Shortest exact decimal for console text and file names; fmt() stays
    the 17-significant-digit contract for data files."""
    return repr(float(x))


def _row(values) -> str:
    return " ".join(fmt(v) for v in np.ravel(values))


def _header_dict(line: str) -> dict:
    out = {}
    for token in line.split():
        key, _, val = token.partition("=")
        out[key] = val
    return out


def file_digest(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# decoupling fields
# ---------------------------------------------------------------------------

def write_field(field: DecouplingField, path) -> None:
    grid = field.grid
    n_t = grid.t_nodes.shape[0]
    with open(path, "w") as fh:
        fh.write(FIELD_TAG + "\n")
        fh.write(f"n={field.n} nt={n_t} epsilon={fmt(field.epsilon)} "
                 f"margin={fmt(grid.margin_fraction)} source={field.boundary_source}\n")
        fh.write(f"t {fmt(grid.t_nodes[0])} {fmt(grid.t_nodes[-1])}\n")
        for a in grid.axes:
            fh.write(f"axis {fmt(a[0])} {fmt(a[-1])} {a.shape[0]}\n")
        u = field.u_values.reshape(-1, field.n)
        g = field.grad_values.reshape(-1, field.n * grid.n)
        for k in range(u.shape[0]):
            fh.write(_row(u[k]) + " " + _row(g[k]) + "\n")


def read_field(path) -> DecouplingField:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != FIELD_TAG:
        raise ShapeError(f"{path} is not a field file")
    head = _header_dict(lines[1])
    n = int(head["n"])
    n_t = int(head["nt"])
    epsilon = float(head["epsilon"])
    margin = float(head["margin"])
    source = head.get("source", "limit")
    t_parts = lines[2].split()
    t_nodes = np.linspace(float(t_parts[1]), float(t_parts[2]), n_t)
    axes = []
    row0 = 3
    while lines[row0].startswith("axis"):
        _, lo, hi, count = lines[row0].split()
        axes.append(np.linspace(float(lo), float(hi), int(count)))
        row0 += 1
    grid = SpaceTimeGrid(t_nodes, tuple(axes), margin)
    space = tuple(a.shape[0] for a in axes)
    total = n_t * int(np.prod(space))
    data = np.loadtxt(lines[row0:row0 + total], ndmin=2)
    u = data[:, :n].reshape((n_t,) + space + (n,))
    g = data[:, n:].reshape((n_t,) + space + (n, grid.n))
    return DecouplingField(grid, epsilon, u, g, source)


# ---------------------------------------------------------------------------
# trajectory bundles
# ---------------------------------------------------------------------------

def write_bundle(bundle: TrajectoryBundle, path) -> None:
    k, n_nodes, n = bundle.x_paths.shape
    d = bundle.z_paths.shape[-1]
    with open(path, "w") as fh:
        fh.write(BUNDLE_TAG + "\n")
        fh.write(f"n={n} d={d} paths={k} nodes={n_nodes} "
                 f"epsilon={fmt(bundle.epsilon)} seed={bundle.seed_root} "
                 f"start={bundle.start_index}\n")
        fh.write(f"t {fmt(bundle.t_nodes[0])} {fmt(bundle.t_nodes[-1])}\n")
        fh.write("states\n")
        for kk in range(k):
            for j in range(n_nodes):
                fh.write(_row(bundle.x_paths[kk, j]) + " "
                         + _row(bundle.y_paths[kk, j]) + " "
                         + _row(bundle.z_paths[kk, j]) + "\n")
        fh.write("increments\n")
        for kk in range(k):
            for j in range(n_nodes - 1):
                fh.write(_row(bundle.dw[kk, j]) + "\n")


def read_bundle(path) -> TrajectoryBundle:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != BUNDLE_TAG:
        raise ShapeError(f"{path} is not a bundle file")
    head = _header_dict(lines[1])
    n, d = int(head["n"]), int(head["d"])
    k, n_nodes = int(head["paths"]), int(head["nodes"])
    t_parts = lines[2].split()
    t_nodes = np.linspace(float(t_parts[1]), float(t_parts[2]), n_nodes)
    if lines[3] != "states":
        raise ShapeError("malformed bundle file: missing states block")
    base = 4
    states = np.loadtxt(lines[base:base + k * n_nodes], ndmin=2)
    base += k * n_nodes
    if lines[base] != "increments":
        raise ShapeError("malformed bundle file: missing increments block")
    dw = np.loadtxt(lines[base + 1:base + 1 + k * (n_nodes - 1)], ndmin=2)
    x = states[:, :n].reshape(k, n_nodes, n)
    y = states[:, n:2 * n].reshape(k, n_nodes, n)
    z = states[:, 2 * n:].reshape(k, n_nodes, n, d)
    return TrajectoryBundle(t_nodes, int(head["start"]), float(head["epsilon"]),
                            int(head["seed"]), x, y, z,
                            dw.reshape(k, n_nodes - 1, d))


# ---------------------------------------------------------------------------
# limit solutions
# ---------------------------------------------------------------------------

def write_solution(sol: OdeSolution, path) -> None:
    n_nodes, n = sol.x_values.shape
    with open(path, "w") as fh:
        fh.write(SOLUTION_TAG + "\n")
        fh.write(f"n={n} nodes={n_nodes} residual={fmt(sol.residual)} "
                 f"method={sol.method}\n")
        for j in range(n_nodes):
            fh.write(fmt(sol.t_nodes[j]) + " " + _row(sol.x_values[j]) + " "
                     + _row(sol.y_values[j]) + "\n")


def read_solution(path) -> OdeSolution:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != SOLUTION_TAG:
        raise ShapeError(f"{path} is not a solution file")
    head = _header_dict(lines[1])
    n, n_nodes = int(head["n"]), int(head["nodes"])
    data = np.loadtxt(lines[2:2 + n_nodes], ndmin=2)
    return OdeSolution(data[:, 0], data[:, 1:1 + n], data[:, 1 + n:1 + 2 * n],
                       float(head["residual"]), head["method"])
