import numpy as np
import pytest

from conormal.errors import DomainError, ParseError, UnknownIdentifier
from conormal.expr import ScalarExpr, VectorExpr

from helpers import fd_gradient, fd_hessian, fd_jacobian, random_expression


def test_precedence_and_literals():
    e = ScalarExpr.parse("2 + 3*4", ())
    assert float(e([])) == 14.0
    e = ScalarExpr.parse("(2 + 3)*4", ())
    assert float(e([])) == 20.0
    e = ScalarExpr.parse("7 - 4 - 2", ())
    assert float(e([])) == 1.0
    e = ScalarExpr.parse("12/4/3", ())
    assert float(e([])) == 1.0


def test_power_right_associative():
    e = ScalarExpr.parse("2^3^2", ())
    assert float(e([])) == 512.0
    e = ScalarExpr.parse("-2^2", ())
    # unary minus binds looser than the power
    assert float(e([])) == -4.0


def test_unary_minus_and_functions():
    e = ScalarExpr.parse("-x + sin(x)*cos(x)", ("x",))
    x = 0.7
    assert float(e([x])) == pytest.approx(-x + np.sin(x) * np.cos(x), abs=1e-15)
    e = ScalarExpr.parse("exp(log(x))", ("x",))
    assert float(e([1.37])) == pytest.approx(1.37, abs=1e-14)
    e = ScalarExpr.parse("tanh(x)^2 + sqrt(x)", ("x",))
    assert float(e([0.25])) == pytest.approx(np.tanh(0.25) ** 2 + 0.5, abs=1e-14)


def test_parse_errors():
    with pytest.raises(ParseError):
        ScalarExpr.parse("2 +", ("x",))
    with pytest.raises(ParseError):
        ScalarExpr.parse("(x", ("x",))
    with pytest.raises(ParseError):
        ScalarExpr.parse("x & y", ("x", "y"))
    with pytest.raises(UnknownIdentifier):
        ScalarExpr.parse("x + nope", ("x",))
    with pytest.raises(UnknownIdentifier):
        ScalarExpr.parse("sinh(x)", ("x",))


def test_domain_errors():
    e = ScalarExpr.parse("log(x)", ("x",))
    with pytest.raises(DomainError):
        e([-1.0])
    e = ScalarExpr.parse("sqrt(x)", ("x",))
    with pytest.raises(DomainError):
        e.gradient([0.0])
    e = ScalarExpr.parse("1/x", ("x",))
    with pytest.raises(DomainError):
        e([0.0])


def test_broadcast_evaluation_matches_scalar_loop():
    e = ScalarExpr.parse("sin(x*y) + x^2 - y/2", ("x", "y"))
    rng = np.random.default_rng(7)
    xs = rng.uniform(-1, 1, size=17)
    ys = rng.uniform(-1, 1, size=17)
    vec = np.asarray(e([xs, ys]), dtype=float)
    for i in range(17):
        assert vec[i] == pytest.approx(float(e([xs[i], ys[i]])), abs=0.0)


def test_gradient_hessian_closed_form():
    e = ScalarExpr.parse("sin(x*y) + x^2", ("x", "y"))
    x, y = 0.4, -0.8
    g = e.gradient([x, y])
    assert g[0] == pytest.approx(y * np.cos(x * y) + 2 * x, abs=1e-14)
    assert g[1] == pytest.approx(x * np.cos(x * y), abs=1e-14)
    h = e.hessian([x, y])
    assert h[0, 0] == pytest.approx(-y * y * np.sin(x * y) + 2.0, abs=1e-13)
    assert h[0, 1] == pytest.approx(np.cos(x * y) - x * y * np.sin(x * y), abs=1e-13)
    assert h[1, 1] == pytest.approx(-x * x * np.sin(x * y), abs=1e-13)


def test_with_vars_and_substitute():
    e = ScalarExpr.parse("x + 2*y", ("x", "y"))
    wide = e.with_vars(("x", "y", "z"))
    assert float(wide([1.0, 2.0, 99.0])) == 5.0
    sub = e.substitute({"y": ScalarExpr.parse("x^2", ("x",))}, ("x",))
    assert float(sub([3.0])) == pytest.approx(3.0 + 18.0, abs=1e-14)


def test_to_text_round_trip():
    rng = np.random.default_rng(21)
    variables = ("x", "y")
    for _ in range(40):
        text = random_expression(rng, variables)
        e = ScalarExpr.parse(text, variables)
        e2 = ScalarExpr.parse(e.to_text(), variables)
        pts = rng.uniform(-1, 1, size=(5, 2))
        for p in pts:
            assert float(e2(list(p))) == pytest.approx(float(e(list(p))),
                                                       rel=1e-12, abs=1e-12)


def test_vector_expr_jacobian():
    v = VectorExpr.parse(["x + 0.3*sin(y)", "y + 0.3*x"], ("x", "y"))
    rng = np.random.default_rng(5)
    for _ in range(10):
        p = rng.uniform(-1, 1, size=2)
        jac = v.jacobian(p)
        jac_fd = fd_jacobian(lambda q: np.asarray(v(list(q)), dtype=float), p)
        assert np.max(np.abs(jac - jac_fd)) < 1e-9


def test_ad_against_central_differences_200():
    # 200 random expressions in 1..3 variables; relative agreement of
    # gradient and Hessian with second-order finite differences
    rng = np.random.default_rng(20260817)
    checked = 0
    while checked < 200:
        nvars = int(rng.integers(1, 4))
        variables = tuple("xyz"[:nvars])
        text = random_expression(rng, variables)
        e = ScalarExpr.parse(text, variables)
        point = rng.uniform(-0.9, 0.9, size=nvars)

        def fn(q):
            return float(e(list(q)))

        grad = e.gradient(point)
        hess = e.hessian(point)
        scale_g = max(1.0, float(np.max(np.abs(grad))))
        scale_h = max(1.0, float(np.max(np.abs(hess))))
        assert np.max(np.abs(grad - fd_gradient(fn, point))) / scale_g < 1e-6, text
        assert np.max(np.abs(hess - fd_hessian(fn, point))) / scale_h < 1e-6, text
        # symmetry must be bitwise, not approximate
        assert np.array_equal(hess, hess.T), text
        checked += 1
    assert checked == 200
