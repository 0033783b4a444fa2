import numpy as np
import pytest

from conormal.errors import DimensionMismatch, NewtonFailed, RankDeficient
from conormal.expr import ScalarExpr, VectorExpr
from conormal.geometry import (ConstraintSubmanifold, EuclideanPatch,
                               GraphSubmanifold, TwistFunction,
                               conormal_point, newton_project, null_space)

from helpers import fd_gradient


def _circle(box=((-1.5, 1.5), (-1.5, 1.5))):
    patch = EuclideanPatch(("x", "y"), box)
    vec = VectorExpr.parse(["x^2 + y^2 - 1"], patch.variables)
    return ConstraintSubmanifold(patch, vec, simply_connected=False)


def test_patch_basics():
    p = EuclideanPatch(("a", "b"))
    assert p.dim == 2
    assert p.box == ((-1.0, 1.0), (-1.0, 1.0))
    q = EuclideanPatch(("c",), ((0.0, 2.0),))
    prod = p.product(q)
    assert prod.variables == ("a", "b", "c")
    assert prod.box[2] == (0.0, 2.0)
    with pytest.raises(DimensionMismatch):
        p.product(EuclideanPatch(("b",)))
    with pytest.raises(DimensionMismatch):
        EuclideanPatch(("a",), ((1.0, 1.0),))


def test_sample_box_stays_inside():
    p = EuclideanPatch(("u", "v"), ((-2.0, -1.0), (3.0, 5.0)))
    rng = np.random.default_rng(3)
    pts = p.sample_box(rng, 200)
    assert pts.shape == (200, 2)
    assert np.all(pts[:, 0] >= -2.0) and np.all(pts[:, 0] <= -1.0)
    assert np.all(pts[:, 1] >= 3.0) and np.all(pts[:, 1] <= 5.0)


def test_null_space_orthonormal():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(2, 5))
    ns = null_space(a)
    assert ns.shape == (5, 3)
    assert np.max(np.abs(a @ ns)) < 1e-12
    assert np.max(np.abs(ns.T @ ns - np.eye(3))) < 1e-12


def test_newton_project_circle():
    sub = _circle()
    x = newton_project(sub.residual, sub.jacobian, np.array([1.3, 0.2]))
    assert abs(x[0] ** 2 + x[1] ** 2 - 1.0) < 1e-12
    with pytest.raises(NewtonFailed):
        # gradient vanishes at the origin; Newton cannot leave it
        newton_project(sub.residual, sub.jacobian, np.array([0.0, 0.0]),
                       max_iter=10)


def test_constraint_submanifold_frames():
    sub = _circle()
    rng = np.random.default_rng(4)
    pts = sub.sample_points(rng, 25)
    for z in pts:
        assert sub.contains(z)
        tan = sub.tangent_space(z)
        assert tan.shape == (2, 1)
        # orthonormal and annihilated by the constraint differential
        assert abs(np.linalg.norm(tan[:, 0]) - 1.0) < 1e-12
        assert np.max(np.abs(sub.jacobian(z) @ tan)) < 1e-10
        nor = sub.normal_frame(z)
        assert nor.shape == (2, 1)
        assert abs(float(tan[:, 0] @ nor[:, 0])) < 1e-10


def test_rank_deficient_constraint():
    patch = EuclideanPatch(("x", "y"))
    sub = ConstraintSubmanifold(
        patch, VectorExpr.parse(["x^2 + y^2"], patch.variables))
    with pytest.raises(RankDeficient):
        sub.tangent_space(np.array([0.0, 0.0]))


def test_codim_zero_submanifold():
    patch = EuclideanPatch(("x", "y"))
    sub = ConstraintSubmanifold(patch, None)
    assert sub.codim == 0 and sub.dim == 2
    z = np.array([0.3, -0.4])
    assert sub.contains(z)
    assert sub.tangent_space(z).shape == (2, 2)
    assert sub.jacobian(z).shape == (0, 2)
    assert np.array_equal(sub.project(z), z)


def test_graph_submanifold_constraint_form():
    dom = EuclideanPatch(("x1", "x2"))
    cod = EuclideanPatch(("y1",), ((-3.0, 3.0),))
    g = GraphSubmanifold(dom, cod, VectorExpr.parse(["x1*x2"], dom.variables))
    sub = g.as_constraints()
    assert sub.codim == 1
    rng = np.random.default_rng(9)
    for x in dom.sample_box(rng, 20):
        z = g.point(x)
        assert np.max(np.abs(sub.residual(z))) < 1e-14
        z_off = z + np.array([0.0, 0.0, 0.5])
        assert not sub.contains(z_off)
    with pytest.raises(DimensionMismatch):
        GraphSubmanifold(dom, EuclideanPatch(("y1", "y2")),
                         VectorExpr.parse(["x1"], dom.variables))


def test_twist_differential_matches_fd():
    sub = _circle()
    f = ScalarExpr.parse("x^2 + sin(y)", sub.ambient.variables)
    twist = TwistFunction(sub, f)
    rng = np.random.default_rng(13)
    for z in sub.sample_points(rng, 10):
        d = twist.differential(z)
        d_fd = fd_gradient(lambda q: float(f(list(q))), z)
        assert np.max(np.abs(d - d_fd)) < 1e-9


def test_conormal_point_covector():
    sub = _circle()
    f = ScalarExpr.parse("x^2 + sin(y)", sub.ambient.variables)
    twist = TwistFunction(sub, f)
    z = sub.project(np.array([0.9, 0.5]))
    s = np.array([0.7])
    pt = conormal_point(sub, twist, z, s)
    expected = sub.jacobian(z).T @ s + twist.differential(z)
    assert np.max(np.abs(pt.xi - expected)) == 0.0
    # untwisted covectors annihilate the tangent space
    bare = conormal_point(sub, None, z, s)
    tan = sub.tangent_space(z)
    assert np.max(np.abs(bare.xi @ tan)) < 1e-10
    with pytest.raises(DimensionMismatch):
        conormal_point(sub, None, z, np.array([0.1, 0.2]))
