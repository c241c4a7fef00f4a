"""Round-trip and digest stability of the plain-text formats."""

import numpy as np
import pytest

from fbsdelab import (
    FieldBank,
    ShapeError,
    build_problem,
    make_grid,
    simulate_forward,
)
from fbsdelab import serialize


@pytest.fixture(scope="module")
def pieces():
    prob = build_problem("linear")
    bank = FieldBank(prob, make_grid(prob, 41, 31))
    field = bank.get(0.1)
    bundle = simulate_forward(prob, field, 0.1, 8, seed_root=3)
    sol = bank.deterministic_path()
    return field, bundle, sol


def test_field_round_trip(tmp_path, pieces):
    field, _, _ = pieces
    p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
    serialize.write_field(field, p1)
    back = serialize.read_field(p1)
    assert back.epsilon == field.epsilon
    assert back.boundary_source == field.boundary_source
    assert np.array_equal(back.u_values, field.u_values)
    assert np.array_equal(back.grad_values, field.grad_values)
    assert np.array_equal(back.grid.t_nodes, field.grid.t_nodes)
    serialize.write_field(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert serialize.file_digest(p1) == serialize.file_digest(p2)


def test_bundle_round_trip(tmp_path, pieces):
    _, bundle, _ = pieces
    p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
    serialize.write_bundle(bundle, p1)
    back = serialize.read_bundle(p1)
    assert back.seed_root == bundle.seed_root
    assert back.start_index == bundle.start_index
    for name in ("x_paths", "y_paths", "z_paths", "dw"):
        assert np.array_equal(getattr(back, name), getattr(bundle, name))
    serialize.write_bundle(back, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_solution_round_trip(tmp_path, pieces):
    _, _, sol = pieces
    p1 = tmp_path / "s.txt"
    serialize.write_solution(sol, p1)
    back = serialize.read_solution(p1)
    assert back.method == sol.method
    assert np.array_equal(back.x_values, sol.x_values)
    assert np.array_equal(back.y_values, sol.y_values)
    assert back.residual == sol.residual


def test_wrong_tag_rejected(tmp_path, pieces):
    field, bundle, _ = pieces
    p = tmp_path / "f.txt"
    serialize.write_field(field, p)
    with pytest.raises(ShapeError):
        serialize.read_bundle(p)
    serialize.write_bundle(bundle, p)
    with pytest.raises(ShapeError):
        serialize.read_field(p)


def test_fmt_round_trips_doubles():
    for x in (0.1, 1 / 3, np.pi, 1e-300, -7.25, 0.03):
        assert float(serialize.fmt(x)) == x


def test_pretty_is_shortest_exact_repr():
    assert serialize.pretty(0.03) == "0.03"
    assert serialize.pretty(1.0) == "1.0"
    assert float(serialize.pretty(1 / 3)) == 1 / 3
