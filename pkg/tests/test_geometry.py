import numpy as np
import pytest

from src.tube_mpc.errors import DimensionError, GeometryError
from src.tube_mpc.geometry import (
    Ellipsoid,
    HPolytope,
    VPolytope,
    bounding_box,
    check_spd,
    contains_point,
    hull_contains,
    induced_v_norm,
    matrix_inv_sqrt,
    tighten_halfspace,
    tightening_norms,
    v_norm,
    vertices,
)


def test_simplex_vertices():
    # case 1: standard simplex
    hp = HPolytope.simplex([0.0, 0.0], 1.0, 2)
    np.testing.assert_allclose(vertices(hp).vertices, [[0, 0], [1, 0], [0, 1]])

    # case 2: shifted simplex with edge 0.2
    hp = HPolytope.simplex([0.0, 0.1], 0.1, 2)
    np.testing.assert_allclose(
        vertices(hp).vertices, [[0.0, -0.1], [0.2, -0.1], [0.0, 0.1]], atol=1e-12
    )

    # case 3: empty simplex
    with pytest.raises(GeometryError):
        vertices(HPolytope.simplex([0.0, 0.0], -1.0, 2))


def test_box_vertices():
    V = vertices(HPolytope.box([1.0, 2.0], 2)).vertices
    assert len(V) == 4
    assert {tuple(v) for v in V} == {(-1, -2), (-1, 2), (1, -2), (1, 2)}
    np.testing.assert_allclose(bounding_box(HPolytope.box(1.5, 3)), [[-1.5] * 3, [1.5] * 3])


def test_vertices_rejects_other_templates():
    hp = HPolytope(np.array([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0], [1.0, -1.0]]), np.ones(4))
    with pytest.raises(GeometryError):
        vertices(hp)


def test_polytope_dimensions():
    with pytest.raises(DimensionError):
        HPolytope(np.eye(2), np.ones(3))
    with pytest.raises(DimensionError):
        VPolytope(np.zeros((0, 2)))
    full = HPolytope.full_space(3)
    assert full.is_full_space()
    assert full.dim == 3
    assert contains_point(full, [1e9, -1e9, 0.0])


def test_weighted_norms():
    V = np.diag([4.0, 1.0])
    assert v_norm([1.0, 1.0], V) == pytest.approx(np.sqrt(5.0))
    np.testing.assert_allclose(tightening_norms(np.array([[1.0, 0.0], [0.0, 2.0]]), V), [0.5, 2.0])
    np.testing.assert_allclose(
        tightening_norms(np.array([[1.0, 0.0], [0.0, 2.0]]), V_inv_sqrt=matrix_inv_sqrt(V)), [0.5, 2.0]
    )
    with pytest.raises(GeometryError):
        tightening_norms(np.eye(2))
    assert induced_v_norm(np.eye(2), V) == pytest.approx(1.0)
    # swapping coordinates under diag(4, 1) stretches by 2
    assert induced_v_norm(np.array([[0.0, 1.0], [1.0, 0.0]]), V) == pytest.approx(2.0)


def test_tighten_halfspace():
    V = np.diag([4.0, 1.0])
    slack = tighten_halfspace(np.array([1.0, 0.0]), 1.0, np.array([0.2, 0.0]), V, 1.0)
    assert slack == pytest.approx(1.0 - 0.2 - 0.5)
    with pytest.raises(GeometryError):
        tighten_halfspace(np.array([1.0, 0.0]), 1.0, np.zeros(2), V, -1.0)


def test_ellipsoid_support_attained(rng):
    V = np.array([[2.0, 0.3], [0.3, 1.0]])
    H = rng.standard_normal((5, 2))
    norms = tightening_norms(H, V)
    E = Ellipsoid(V, 1.0)
    for _ in range(200):
        e = rng.standard_normal(2)
        e /= v_norm(e, V)
        assert E.contains(e, tol=1e-9)
        assert np.all(H @ e <= norms + 1e-12)


def test_check_spd():
    check_spd(np.eye(2))
    with pytest.raises(GeometryError):
        check_spd(np.diag([1.0, -1.0]))
    with pytest.raises(GeometryError):
        check_spd(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(GeometryError):
        Ellipsoid(np.eye(2), -1.0)


def test_hull_contains():
    square = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert hull_contains(square, [0.5, 0.5])
    assert hull_contains(square, [1.0, 1.0])
    assert not hull_contains(square, [1.1, 0.5])
