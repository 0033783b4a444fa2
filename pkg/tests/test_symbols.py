import numpy as np
import pytest
from scipy.integrate import quad

from conormal.errors import (DimensionMismatch, FiberSolveFailed, FitFailed,
                             NotTransverse)
from conormal.geometry import EuclideanPatch
from conormal.hormander import build_description
from conormal.quantize import Grid, make_amplitude, oscillatory_kernel
from conormal.relations import (compose_endpoint, compose_graphs,
                                endpoint_source_relation,
                                endpoint_target_relation, from_graph,
                                identity_relation)
from conormal.symbols import (HalfDensity, composed_point, compose_symbols,
                              graph_half_density, induced_reference,
                              lambda_tangent_frame, stationary_phase_leading,
                              symbol_of, symbol_table)

X0 = EuclideanPatch(("x0",), ((-1.0, 1.0),))
X1 = EuclideanPatch(("x1",), ((-1.0, 1.0),))
X2 = EuclideanPatch(("x2",), ((-2.2, 2.2),))
X3 = EuclideanPatch(("x3",), ((-1.2, 1.2),))


def _chain_symbols():
    r1 = from_graph(X1, X2, ["2*x1"], twist_on_source="x1^2")
    r2 = from_graph(X2, X3, ["0.5*x2"], twist_on_source="sin(x2)")
    a1 = make_amplitude("1 + 0.25*s", ["x1", "x2"], ["s"], [[-2.0, 0.5]],
                        x_support={"x1": (-0.9, 0.9)})
    a2 = make_amplitude("1", ["x2", "x3"], ["t"], [[-1.0, 1.0]],
                        x_support={"x2": (-2.0, 2.0)})
    d1 = build_description(r1.base, r1.twist, fiber_names=("s",))
    d2 = build_description(r2.base, r2.twist, fiber_names=("t",))
    return r1, r2, a1, a2, symbol_of(a1, d1), symbol_of(a2, d2)


def _amp_value(amp, xv, sv):
    x_env = {n: v for n, v in zip(amp.x_vars, xv)}
    s_env = {n: v for n, v in zip(amp.s_vars, sv)}
    return complex(amp.evaluate(x_env, s_env, 0.0))


def test_half_density_frame_covariance():
    frame = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, -1.0], [0.0, 0.5]])
    rho = HalfDensity(lambda p: frame, lambda p: 3.0)
    change = np.array([[2.0, 1.0], [0.0, -1.5]])
    val = rho.value_on(None, frame @ change)
    assert val == pytest.approx(3.0 * np.sqrt(3.0), rel=1e-12)
    off = frame @ change
    off[0, 0] += 0.1  # leaves the column span
    with pytest.raises(DimensionMismatch):
        rho.value_on(None, off)
    with pytest.raises(DimensionMismatch):
        rho.value_on(None, np.eye(3))


def test_induced_reference_is_one_on_flat_descriptions():
    from conormal.expr import VectorExpr
    from conormal.geometry import ConstraintSubmanifold
    patch = EuclideanPatch(("x1", "x2"))
    sub = ConstraintSubmanifold(patch,
                                VectorExpr.parse(["x2"], patch.variables))
    desc = build_description(sub)
    rng = np.random.default_rng(2)
    for x in (-0.5, 0.0, 0.7):
        for s in (-1.0, 0.3):
            ref = induced_reference(desc, np.array([x, 0.0]),
                                    np.array([s]), rng)
            assert ref == pytest.approx(1.0, abs=1e-12)


def test_symbol_coefficient_is_the_amplitude():
    r1, _, a1, _, sig1, _ = _chain_symbols()
    rng = np.random.default_rng(4)
    from conormal.relations import sample_relation_points
    for z, s, _ in sample_relation_points(r1, rng, 10, 1.0):
        want = _amp_value(a1, z, s)
        assert sig1.coefficient((z, s)) == pytest.approx(want, abs=1e-14)
        assert sig1.maslov((z, s)) == 1.0


def test_identity_composition_preserves_the_symbol():
    # unit law: quantized identity times A recovers the symbol of A;
    # the identity amplitude's fiber cutoff is flattened so its bump
    # factor is 1 to machine precision at every visited fiber value
    ident = identity_relation(X0, X1)
    r1 = from_graph(X1, X2, ["2*x1"], twist_on_source="x1^2")
    cand = compose_graphs(ident, r1)
    amp_id = make_amplitude("1", ["x0", "x1"], ["s0"], [[-1e7, 1e7]])
    a1 = make_amplitude("1 + 0.25*s", ["x1", "x2"], ["s"], [[-2.0, 0.5]],
                        x_support={"x1": (-0.9, 0.9)})
    d_id = build_description(ident.base, ident.twist, fiber_names=("s0",))
    d1 = build_description(r1.base, r1.twist, fiber_names=("s",))
    dc = build_description(cand.base, cand.twist, fiber_names=("sc",))
    sig_id = symbol_of(amp_id, d_id)
    sig1 = symbol_of(a1, d1)
    comp = compose_symbols(sig_id, sig1, ident, r1, cand, dc,
                           np.random.default_rng(9))
    worst = 0.0
    for x, s in [(0.3, 0.4), (-0.2, -0.6), (0.5, 0.1)]:
        got = comp.coefficient((np.array([x, 2 * x]), np.array([s])))
        want = sig1.coefficient((np.array([x, 2 * x]), np.array([s])))
        worst = max(worst, abs(got - want) / abs(want))
    assert worst < 1e-12


def test_composed_symbol_matches_reduced_product():
    # stationarity in the middle variable pins s = 0.5 t - cos(2 x1) on
    # the diagonal x3 = x1; the mixed Hessian determinant of the
    # eliminated pair is 1, so the composed coefficient is exactly the
    # product of the amplitudes on the stationary set
    r1, r2, a1, a2, sig1, sig2 = _chain_symbols()
    gc = compose_graphs(r1, r2)
    dgc = build_description(gc.base, gc.twist, fiber_names=("tc",))
    chain = compose_symbols(sig1, sig2, r1, r2, gc, dgc,
                            np.random.default_rng(7))
    worst = 0.0
    for x, t in [(0.3125, 0.2), (0.3125, -0.1), (-0.1875, 0.5), (0.1, 0.3)]:
        got = chain.coefficient((np.array([x, x]), np.array([t])))
        sstar = 0.5 * t - np.cos(2.0 * x)
        want = (_amp_value(a1, [x, 2 * x], [sstar])
                * _amp_value(a2, [2 * x, x], [t]))
        worst = max(worst, abs(got - want) / abs(want))
        assert chain.maslov((np.array([x, x]), np.array([t]))) == 1.0
    assert worst < 1e-12


def test_composed_symbol_is_choice_invariant():
    r1, r2, _, _, sig1, sig2 = _chain_symbols()
    gc = compose_graphs(r1, r2)
    dgc = build_description(gc.base, gc.twist, fiber_names=("tc",))
    p = (np.array([0.25, 0.25]), np.array([0.3]))
    values = []
    for seed in range(12):
        chain = compose_symbols(sig1, sig2, r1, r2, gc, dgc,
                                np.random.default_rng(seed))
        values.append(chain.coefficient(p))
    values = np.array(values)
    spread = np.max(np.abs(values - values[0])) / abs(values[0])
    assert spread < 1e-9


def test_graph_half_density_choice_covariance():
    r1 = from_graph(X1, X2, ["2*x1"], twist_on_source="x1^2")
    rho = graph_half_density(r1)
    p = (np.array([0.3, 0.6]), np.array([0.4]))
    own_frame = rho.frame_fn(p)
    # value against its own frame is the coefficient itself
    assert rho.value_on(p, own_frame) == pytest.approx(rho.coeff_fn(p),
                                                       rel=1e-12)
    change = np.array([[1.2, 0.3], [0.0, -0.8]])
    scaled = rho.value_on(p, own_frame @ change)
    assert scaled == pytest.approx(rho.coeff_fn(p) * np.sqrt(0.96), rel=1e-12)


def test_composed_point_guards():
    r1, r2, *_ = _chain_symbols()
    rng = np.random.default_rng(6)
    bad_cand = from_graph(X1, X3, ["-x1"],
                          twist_on_source="x1^2 + sin(2*x1)")
    with pytest.raises(FiberSolveFailed):
        composed_point(r1, r2, bad_cand, np.array([0.3, -0.3]),
                       np.array([0.1]), rng)

    p1 = endpoint_source_relation(X1, X2, [0.4], "x1^2 - 0.5*x1")
    p2 = endpoint_target_relation(X2, X3, [0.4], "cos(x3)")
    comp = compose_endpoint(p1, p2, rng)
    with pytest.raises(NotTransverse):
        composed_point(p1, p2, comp, np.array([0.3, 0.5]), np.zeros(0), rng)


def test_symbol_of_rejects_mismatched_amplitudes():
    r1, _, _, a2, _, _ = _chain_symbols()
    d1 = build_description(r1.base, r1.twist, fiber_names=("s",))
    with pytest.raises(DimensionMismatch):
        symbol_of(a2, d1)


# ---------------------------------------------------------------------------
# reading leading amplitudes back off discretized kernels


def _diagonal_fiber_integral(x1: float) -> float:
    def profile(s):
        t = (2.0 * s + 1.5) / 2.5
        bump_s = (1 - t * t) ** 4 if abs(t) < 1 else 0.0
        tx = x1 / 0.9
        bump_x = (1 - tx * tx) ** 4 if abs(tx) < 1 else 0.0
        return (1 + 0.25 * s) * bump_s * bump_x

    return abs(quad(profile, -2.0, 0.5, epsabs=1e-12, limit=200)[0])


def test_stationary_phase_reads_the_fiber_integral():
    # on the graph diagonal the phase is stationary and the kernel's
    # leading modulus is hbar^(r-k/2) |int a ds|; the readout divides
    # the normalization back out
    r1 = from_graph(X1, X2, ["2*x1"], twist_on_source="x1^2")
    a1 = make_amplitude("1 + 0.25*s", ["x1", "x2"], ["s"], [[-2.0, 0.5]],
                        x_support={"x1": (-0.9, 0.9)})
    g1, g2 = Grid(X1, (128,)), Grid(X2, (256,))
    fio = oscillatory_kernel(r1, a1, 0, 0.1, g1, g2)
    worst = 0.0
    for j in (64, 80, 100):
        xs = g1.axis_nodes(0)[j]
        got = stationary_phase_leading(fio, xs, 2.0 * xs)
        want = _diagonal_fiber_integral(xs)
        worst = max(worst, abs(got - want) / want)
    assert worst < 2e-3


def test_stationary_phase_needs_enough_nodes():
    r1 = from_graph(X1, X2, ["2*x1"], twist_on_source="x1^2")
    a1 = make_amplitude("1", ["x1", "x2"], ["s"], [[-1.0, 1.0]])
    g1, g2 = Grid(X1, (16,)), Grid(X2, (16,))
    fio = oscillatory_kernel(r1, a1, 0, 0.05, g1, g2)
    with pytest.raises(FitFailed):
        stationary_phase_leading(fio, 0.2, 0.4)


def test_symbol_table_layout():
    r1, _, a1, _, sig1, _ = _chain_symbols()
    pts = [(np.array([0.3, 0.6]), np.array([0.2]))]
    rows = symbol_table(sig1, pts)
    assert len(rows) == 1
    row = rows[0]
    assert len(row) == 7  # z1, z2, s, coeff re/im, maslov re/im
    assert row[:3] == (0.3, 0.6, 0.2)
    want = _amp_value(a1, [0.3, 0.6], [0.2])
    assert row[3] == pytest.approx(want.real, abs=1e-14)
    assert row[4] == pytest.approx(0.0, abs=1e-14)
    assert row[5] == 1.0 and row[6] == 0.0
