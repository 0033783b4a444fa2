"""End-to-end acceptance checks, one per shipped guarantee.

Each test prints a single [criterion NN] PASS/FAIL line with the
measured numbers, then asserts.  Tolerances here are the contract;
loosening them is a behavior change, not a test fix.
"""

import time
from fractions import Fraction
from pathlib import Path

import importlib.resources as ir
import numpy as np
import pytest
from helpers import fourier_bump_transform, random_expression

from conormal.errors import CancellationFailed
from conormal.expr import ScalarExpr, VectorExpr
from conormal.geometry import (ConstraintSubmanifold, EuclideanPatch,
                               TwistFunction, conormal_point)
from conormal.hormander import (build_description, fiber_hessian_signature,
                                lambda_embedding, maslov_section,
                                sample_critical)
from conormal.quantize import (Grid, SeparableAmplitude, bump_profile,
                               compose_numeric, composed_kernel_direct,
                               make_amplitude, oscillatory_kernel)
from conormal.relations import (compose_exact_graphs, compose_graphs,
                                conormal_section, from_constraints,
                                from_graph, reconstruct_twist)
from conormal.scenario import load_scenario, run_scenario
from conormal.symbols import (compose_symbols, stationary_phase_leading,
                              symbol_of)

BUNDLED = ir.files("conormal") / "scenarios"
ALL_SCENARIOS = ("example_2_3.json", "library.json", "compositions.json",
                 "quantize_chain.json", "symbol_chain.json")

X1 = EuclideanPatch(("x1",), ((-1.0, 1.0),))
X2 = EuclideanPatch(("x2",), ((-2.2, 2.2),))
X3 = EuclideanPatch(("x3",), ((-1.2, 1.2),))


def _report(num: int, name: str, ok: bool, detail: str):
    line = f"[criterion {num:02d}] {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line, flush=True)
    assert ok, line


def _quiet(*args, **kwargs):
    pass


def _run_bundled(name: str, out_dir, **kwargs):
    path = str(BUNDLED / name)
    return run_scenario(load_scenario(path), path, out_dir,
                        echo=_quiet, **kwargs)


def _chain_pieces():
    r1 = from_graph(X1, X2, ["2*x1"], twist_on_source="x1^2")
    r2 = from_graph(X2, X3, ["0.5*x2"], twist_on_source="sin(x2)")
    a1 = make_amplitude("1 + 0.25*s", ["x1", "x2"], ["s"], [[-2.0, 0.5]],
                        x_support={"x1": (-0.9, 0.9)})
    a2 = make_amplitude("1", ["x2", "x3"], ["t"], [[-1.0, 1.0]],
                        x_support={"x2": (-2.0, 2.0)})
    return r1, r2, a1, a2


def test_criterion_01_relation_library(tmp_path):
    started = time.perf_counter()
    code, report = _run_bundled("library.json", tmp_path)
    elapsed = time.perf_counter() - started
    checks = [t for t in report["tasks"] if t["kind"] == "lagrangian-check"]
    enough = len(checks) >= 5 and all(t["inputs"]["samples"] >= 100
                                      for t in checks)
    ok = code == 0 and enough and elapsed < 30.0
    _report(1, "relation library is Lagrangian",
            ok, f"{len(checks)} relations x 100 samples, "
                f"residual tol 1e-8, {elapsed:.2f} s")


def test_criterion_02_composition_verification(tmp_path):
    code, report = _run_bundled("compositions.json", tmp_path)
    tasks = {t["name"]: t for t in report["tasks"]}
    pos_names = ("graph_chain_ok", "exact_chain_ok", "endpoint_chain_ok")
    neg_names = ("graph_chain_negative", "exact_chain_negative",
                 "endpoint_chain_negative")
    worst_pos = max(max(tasks[n]["extras"]["composition"][k]
                        for k in ("reverse_max_residual",
                                  "forward_max_residual"))
                    for n in pos_names)
    min_neg = min(tasks[n]["extras"]["composition"]["forward_max_residual"]
                  for n in neg_names)
    failed = all(tasks[n]["extras"]["composition"]["verdict"] == "failed"
                 for n in neg_names)
    ok = code == 0 and worst_pos < 1e-9 and min_neg > 1e-3 and failed
    _report(2, "graph/endpoint/exact compositions verify",
            ok, f"positive residuals <= {worst_pos:.2e}, "
                f"perturbed candidates fail at >= {min_neg:.2e}")


def test_criterion_03_exact_cancellation():
    e1 = from_constraints(X1, X2, None, "x1 + x2")
    e2 = from_constraints(X2, X3, None, "-x2 + x3")
    rng = np.random.default_rng(20260817)
    comp = compose_exact_graphs(e1, e2, rng)
    worst = 0.0
    for _ in range(200):
        x1 = rng.uniform(-1, 1)
        x2 = rng.uniform(-2.2, 2.2)
        x3 = rng.uniform(-1.2, 1.2)
        total = (x1 + x2) + (-x2 + x3)
        got = float(comp.twist.extension(np.array([x1, x3])))
        worst = max(worst, abs(total - got))
    raised = False
    try:
        bad = from_constraints(X1, X2, None, "x1*x2")
        compose_exact_graphs(bad, e2, rng)
    except CancellationFailed:
        raised = True
    ok = worst < 1e-12 and raised
    _report(3, "exact-twist cancellation",
            ok, f"middle independence {worst:.2e}, "
                f"non-cancelling pair {'raised' if raised else 'DID NOT raise'}")


def test_criterion_04_twist_reconstruction():
    patch = EuclideanPatch(("x1", "x2"))
    sub = ConstraintSubmanifold(patch,
                                VectorExpr.parse(["x2"], patch.variables))
    twist = TwistFunction(sub, ScalarExpr.parse("x1^2 + 0.7*x2",
                                                patch.variables))
    section, _ = conormal_section(sub, twist)
    rng = np.random.default_rng(404)
    z0 = np.array([-0.8, 0.0])
    targets = np.zeros((100, 2))
    targets[:, 0] = rng.uniform(-1.0, 1.0, size=100)
    values = reconstruct_twist(sub, section,
                               [np.array([z0, zt]) for zt in targets])
    worst = max(abs(val - (zt[0] ** 2 - z0[0] ** 2))
                for zt, val in zip(targets, values))
    worst_path = 0.0
    for _ in range(10):
        zt = np.array([rng.uniform(-1, 1), 0.0])
        mid = np.array([rng.uniform(-1, 1), 0.0])
        straight = reconstruct_twist(sub, section, [np.array([z0, zt])])[0]
        dogleg = reconstruct_twist(sub, section, [np.array([z0, mid, zt])])[0]
        worst_path = max(worst_path, abs(straight - dogleg))
    ok = worst < 1e-6 and worst_path < 1e-8
    _report(4, "twist reconstructed from the section",
            ok, f"100-path error {worst:.2e}, "
                f"path independence {worst_path:.2e}")


def test_criterion_05_description_embedding():
    plane = EuclideanPatch(("x1", "x2"))
    sub1 = ConstraintSubmanifold(plane,
                                 VectorExpr.parse(["x2"], plane.variables))
    f1 = TwistFunction(sub1, ScalarExpr.parse("x1^2 + 0.7*x2",
                                              plane.variables))
    disk = EuclideanPatch(("x1", "x2"), ((-1.5, 1.5), (-1.5, 1.5)))
    sub2 = ConstraintSubmanifold(
        disk, VectorExpr.parse(["x1^2 + x2^2 - 1"], disk.variables))
    f2 = TwistFunction(sub2, ScalarExpr.parse("sin(x1)*x2", disk.variables))
    rng = np.random.default_rng(505)
    worst = 0.0
    sig_ok = True
    for sub, f in ((sub1, f1), (sub2, f2)):
        desc = build_description(sub, f)
        for x in sub.sample_points(rng, 100):
            s = rng.uniform(-2.0, 2.0, size=sub.codim)
            emb = lambda_embedding(desc, x, s)
            direct = conormal_point(sub, f, x, s)
            worst = max(worst, float(np.max(np.abs(emb.xi - direct.xi))),
                        float(np.max(np.abs(emb.x - direct.x))))
            sig_ok = sig_ok and fiber_hessian_signature(desc, x, s) == 0 \
                and maslov_section(desc, x, s) == 1.0
    ok = worst < 1e-12 and sig_ok
    _report(5, "generating functions embed the bundles",
            ok, f"2 descriptions x 100 samples, max gap {worst:.2e}, "
                f"signature 0 / maslov 1 {'exact' if sig_ok else 'VIOLATED'}")


def test_criterion_06_fourier_oracle():
    started = time.perf_counter()
    src = EuclideanPatch(("x1",), ((-1.0, 1.0),))
    tgt = EuclideanPatch(("y1",), ((-1.0, 1.0),))
    rel = from_constraints(src, tgt, ["y1"])
    amp = make_amplitude("1", ["x1", "y1"], ["s"], [[-1.0, 1.0]],
                         x_support={"x1": (-0.9, 0.9)})
    gs, gt = Grid(src, (256,)), Grid(tgt, (256,))
    worsts = []
    for hbar in (1.0, 0.1):
        fio = oscillatory_kernel(rel, amp, 0, hbar, gs, gt)
        col = bump_profile(gs.axis_nodes(0) / 0.9)
        phi = np.array([fourier_bump_transform(y / hbar)
                        for y in gt.axis_nodes(0)])
        oracle = (phi[:, None] * col[None, :]) / np.sqrt(hbar)
        mask = np.abs(fio.kernel) > 1e-8 * np.abs(fio.kernel).max()
        gaps = np.abs(fio.kernel[mask] - oracle[mask]) / np.abs(oracle[mask])
        worsts.append(float(np.max(gaps)))
    elapsed = time.perf_counter() - started
    ok = max(worsts) < 1e-6 and elapsed < 60.0
    _report(6, "quantization matches the Fourier oracle",
            ok, f"256 nodes, rel errors {worsts[0]:.2e} (hbar=1) / "
                f"{worsts[1]:.2e} (hbar=0.1), {elapsed:.1f} s")


def test_criterion_07_operator_composition():
    r1, r2, a1, a2 = _chain_pieces()
    hbar = 0.1
    g1, g2, g3 = Grid(X1, (128,)), Grid(X2, (128,)), Grid(X3, (128,))
    k1 = oscillatory_kernel(r1, a1, 0, hbar, g1, g2, 8)
    k2 = oscillatory_kernel(r2, a2, 0, hbar, g2, g3, 8)
    numeric = compose_numeric(k2, k1, excess=0)
    direct = composed_kernel_direct(r1, r2, SeparableAmplitude(a1, a2),
                                    Fraction(1, 2), hbar, g1, g3, 8,
                                    panel_budget=16384)
    gap = float(np.linalg.norm(direct.kernel - numeric.kernel)
                / np.linalg.norm(numeric.kernel))
    orders = (numeric.order_m == k1.order_m + k2.order_m
              and direct.order_m == numeric.order_m)
    ok = gap < 1e-3 and orders
    _report(7, "discrete composition is Fubini-consistent",
            ok, f"128-node grids, hbar=0.1, rel L2 gap {gap:.2e}, "
                f"m1+m2 = {numeric.order_m} with e = 0")


def test_criterion_08_stationary_phase_symbols():
    r1, r2, a1, a2 = _chain_pieces()
    gc = compose_graphs(r1, r2)
    d1 = build_description(r1.base, r1.twist, fiber_names=("s",))
    d2 = build_description(r2.base, r2.twist, fiber_names=("t",))
    dc = build_description(gc.base, gc.twist, fiber_names=("tc",))
    chain = compose_symbols(symbol_of(a1, d1), symbol_of(a2, d2),
                            r1, r2, gc, dc, np.random.default_rng(11))
    xstar = 0.3125  # exactly the j = 31 node of the 48-point source grid
    zc = np.array([xstar, xstar])
    nodes, weights = np.polynomial.legendre.leggauss(40)
    total = sum(w * chain.coefficient((zc, np.array([t])))
                for t, w in zip(nodes, weights))
    rhs = abs(total)
    unit = total / rhs

    g1, g2, g3 = Grid(X1, (48,)), Grid(X2, (224,)), Grid(X3, (192,))
    errors = []
    for hbar in (0.1, 0.05, 0.025):
        k1 = oscillatory_kernel(r1, a1, 0, hbar, g1, g2, panel_budget=16384)
        k2 = oscillatory_kernel(r2, a2, 0, hbar, g2, g3, panel_budget=16384)
        lead = stationary_phase_leading(compose_numeric(k2, k1), xstar, xstar)
        errors.append(abs(lead - rhs) / rhs)
    decreasing = all(b < a for a, b in zip(errors, errors[1:]))
    ok = decreasing and errors[-1] < 0.05
    _report(8, "kernels converge to the composed symbol",
            ok, "errors " + " > ".join(f"{e:.3%}" for e in errors)
                + f" at hbar 0.1/0.05/0.025; unit-modulus factor "
                  f"{unit.real:+.6f}{unit.imag:+.6f}i")


def test_criterion_09_automatic_differentiation():
    rng = np.random.default_rng(20260817)
    worst = 0.0
    symmetric = True
    for _ in range(200):
        n_vars = int(rng.integers(1, 4))
        variables = tuple(f"v{i}" for i in range(n_vars))
        expr = ScalarExpr.parse(random_expression(rng, variables), variables)
        x = rng.uniform(-0.8, 0.8, size=n_vars)
        grad = expr.gradient(x)
        hess = expr.hessian(x)
        symmetric = symmetric and np.array_equal(hess, hess.T)

        def fn(y):
            return float(expr(y))

        h = 1e-5
        fd_grad = np.array([(fn(x + h * e) - fn(x - h * e)) / (2 * h)
                            for e in np.eye(n_vars)])
        scale = max(1.0, float(np.max(np.abs(grad))))
        worst = max(worst, float(np.max(np.abs(grad - fd_grad))) / scale)
    ok = worst < 1e-6 and symmetric
    _report(9, "derivatives agree with central differences",
            ok, f"200 expressions, worst relative gap {worst:.2e}, "
                f"Hessian symmetry {'bitwise' if symmetric else 'BROKEN'}")


def test_criterion_10_deterministic_reports(tmp_path):
    compared = 0
    identical = True
    for name in ALL_SCENARIOS:
        out_a = tmp_path / "a" / name
        out_b = tmp_path / "b" / name
        code_a, _ = _run_bundled(name, out_a)
        code_b, _ = _run_bundled(name, out_b)
        identical = identical and code_a == code_b == 0
        files_a = sorted(p.name for p in Path(out_a).iterdir())
        files_b = sorted(p.name for p in Path(out_b).iterdir())
        identical = identical and files_a == files_b
        for fname in files_a:
            compared += 1
            if (Path(out_a) / fname).read_bytes() \
                    != (Path(out_b) / fname).read_bytes():
                identical = False
    ok = identical and compared >= len(ALL_SCENARIOS)
    _report(10, "bundled scenario set is byte-deterministic",
            ok, f"{len(ALL_SCENARIOS)} scenarios re-run, "
                f"{compared} output files byte-identical")
