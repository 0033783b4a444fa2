"""Scenario ingestion and task orchestration.

A scenario is a JSON document declaring named spaces, submanifolds,
twists, relations and amplitudes, followed by an ordered task list that
drives the library: Lagrangian checks, closed-form and numerical
composition, bundle dumps, kernel quantization and application,
operator composition, kernel comparison, and symbol extraction and
composition.  The full field-by-field schema lives in
``scenarios/SCHEMA.md`` next to the bundled examples.

Reports are deterministic: all randomness is drawn from the scenario
seed through per-task streams of a counter-based generator, report
serialization sorts keys, and wall-clock timings go to the console
only, never into the report bytes.
"""

import csv
import json
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConormalError, SchemaError, TaskError
from .expr import ScalarExpr, VectorExpr
from .geometry import ConstraintSubmanifold, EuclideanPatch
from .hormander import (build_description, describe_point, sample_critical,
                        transversality_check)
from .quantize import (DiscretizedFIO, Grid, SeparableAmplitude, apply,
                       compose_numeric, composed_kernel_direct, grid_function,
                       kernel_to_binary, kernel_to_csv, make_amplitude,
                       oscillatory_kernel)
from .relations import (compose_endpoint, compose_exact_graphs,
                        compose_graphs, lagrangian_residual,
                        membership_residual, sample_relation_points,
                        verify_composition)
from .symbols import (compose_symbols, stationary_phase_leading, symbol_of,
                      symbol_table)

DEFAULT_TOLERANCES = {
    "membership": 1e-9,
    "lagrangian": 1e-8,
    "inclusion": 1e-9,
    "compose_match": 1e-12,
    "middle_independence": 1e-12,
    "vertical": 1e-8,
    "twist_fit": 1e-6,
    "rel_l2": 1e-3,
    "symbol_match": 0.05,
}

TASK_KINDS = ("lagrangian-check", "compose", "verify-compose",
              "hormander-dump", "quantize", "apply", "compose-operators",
              "compare-kernels", "symbol", "symbol-compose")


def _jsonable(value):
    """Recursively convert to plain JSON-serializable data."""
    if value is None or isinstance(value, (bool, int, str)):
        return value
    if isinstance(value, float):
        return float(value)
    if isinstance(value, Fraction):
        return f"{value.numerator}/{value.denominator}"
    if isinstance(value, complex):
        return {"im": float(value.imag), "re": float(value.real)}
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.complexfloating):
        return {"im": float(value.imag), "re": float(value.real)}
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    return str(value)


@dataclass
class CheckRecord:
    """One numeric check: value, the tolerance it was held to, and the
    module operation that produced it."""

    name: str
    value: float
    tolerance: object
    passed: bool
    provenance: str

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed),
                "provenance": self.provenance,
                "tolerance": _jsonable(self.tolerance),
                "value": _jsonable(self.value)}


@dataclass
class TaskReport:
    name: str
    kind: str
    inputs: dict
    checks: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name, value, tolerance, passed, provenance):
        self.checks.append(CheckRecord(name, value, tolerance, bool(passed),
                                       provenance))

    def bound_check(self, name, value, tolerance, provenance):
        self.check(name, value, tolerance, value <= tolerance, provenance)

    def to_dict(self) -> dict:
        return {"checks": [c.to_dict() for c in self.checks],
                "extras": _jsonable(self.extras),
                "inputs": _jsonable(self.inputs),
                "kind": self.kind, "name": self.name,
                "verdict": "pass" if self.passed else "fail"}


# ---------------------------------------------------------------------------
# schema helpers


def _field(obj: dict, key: str, path: str, required: bool = True,
           default=None):
    if key in obj:
        return obj[key]
    if required:
        raise SchemaError(f"{path}: missing required field '{key}'")
    return default


def _expect_dict(obj, path: str) -> dict:
    if not isinstance(obj, dict):
        raise SchemaError(f"{path}: expected an object")
    return obj


def _parse_scalar(text, variables, path: str) -> ScalarExpr:
    try:
        return ScalarExpr.parse(text, variables)
    except ConormalError as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def _parse_vector(texts, variables, path: str) -> VectorExpr:
    try:
        return VectorExpr.parse(list(texts), variables)
    except ConormalError as exc:
        raise SchemaError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# scenario state


class ScenarioRun:
    """A loaded scenario plus the mutable state of one execution."""

    def __init__(self, doc: dict, source_name: str, out_dir,
                 seed_override=None, param_overrides=None,
                 tolerance_overrides=None):
        doc = _expect_dict(doc, "scenario")
        self.source_name = source_name
        self.out_dir = Path(out_dir)
        self.seed = int(seed_override if seed_override is not None
                        else _field(doc, "seed", "scenario", False, 0))
        self.tolerances = dict(DEFAULT_TOLERANCES)
        self.tolerances.update(_expect_dict(doc.get("tolerances", {}),
                                            "scenario.tolerances"))
        if tolerance_overrides:
            self.tolerances.update(tolerance_overrides)
        self.params = _expect_dict(doc.get("parameters", {}),
                                   "scenario.parameters")
        if param_overrides:
            self.params = {**self.params, **param_overrides}
        self.tasks = doc.get("tasks", [])
        if not isinstance(self.tasks, list):
            raise SchemaError("scenario.tasks: expected a list")

        self.spaces = {}
        for name, decl in _expect_dict(doc.get("spaces", {}),
                                       "scenario.spaces").items():
            self.spaces[name] = self._build_space(name, decl)
        self.submanifolds = {}
        for name, decl in _expect_dict(doc.get("submanifolds", {}),
                                       "scenario.submanifolds").items():
            self.submanifolds[name] = self._check_submanifold(name, decl)
        self.twists = {}
        for name, decl in _expect_dict(doc.get("twists", {}),
                                       "scenario.twists").items():
            self.twists[name] = self._check_twist(name, decl)
        self.relations = {}
        for name, decl in _expect_dict(doc.get("relations", {}),
                                       "scenario.relations").items():
            self.relations[name] = self._build_relation(name, decl)
        self.amplitudes = {}
        for name, decl in _expect_dict(doc.get("amplitudes", {}),
                                       "scenario.amplitudes").items():
            self.amplitudes[name] = self._build_amplitude(name, decl)

        self.products = {}
        self._streams = np.random.SeedSequence(self.seed).spawn(
            max(len(self.tasks), 1))

    # -- declaration builders ------------------------------------------------

    def _build_space(self, name, decl) -> EuclideanPatch:
        path = f"scenario.spaces.{name}"
        decl = _expect_dict(decl, path)
        variables = _field(decl, "variables", path)
        box = decl.get("box")
        try:
            if box is None:
                return EuclideanPatch(tuple(variables))
            return EuclideanPatch(tuple(variables),
                                  tuple((float(lo), float(hi))
                                        for lo, hi in box))
        except ConormalError as exc:
            raise SchemaError(f"{path}: {exc}") from exc

    def space(self, name, path) -> EuclideanPatch:
        if name not in self.spaces:
            raise SchemaError(f"{path}: unknown space '{name}'")
        return self.spaces[name]

    def _check_submanifold(self, name, decl) -> dict:
        path = f"scenario.submanifolds.{name}"
        decl = _expect_dict(decl, path)
        kind = _field(decl, "type", path)
        if kind not in ("constraints", "graph", "product_point"):
            raise SchemaError(f"{path}.type: unknown type '{kind}'")
        spaces = _field(decl, "spaces", path)
        if not (isinstance(spaces, list) and len(spaces) == 2):
            raise SchemaError(f"{path}.spaces: expected [source, target]")
        src = self.space(spaces[0], f"{path}.spaces")
        tgt = self.space(spaces[1], f"{path}.spaces")
        product_vars = src.variables + tgt.variables
        if kind == "constraints":
            exprs = decl.get("expressions", [])
            if exprs:
                _parse_vector(exprs, product_vars, f"{path}.expressions")
        elif kind == "graph":
            exprs = _field(decl, "expressions", path)
            vec = _parse_vector(exprs, src.variables, f"{path}.expressions")
            if vec.dim != tgt.dim:
                raise SchemaError(
                    f"{path}.expressions: map has {vec.dim} components, "
                    f"target has dimension {tgt.dim}")
        else:
            point = _field(decl, "point", path)
            side = _field(decl, "side", path)
            if side not in ("source", "target"):
                raise SchemaError(f"{path}.side: expected source|target")
            pinned = src if side == "source" else tgt
            if len(point) != pinned.dim:
                raise SchemaError(f"{path}.point: wrong dimension")
        return {**decl, "_source": src, "_target": tgt}

    def _check_twist(self, name, decl) -> dict:
        path = f"scenario.twists.{name}"
        decl = _expect_dict(decl, path)
        sub_name = _field(decl, "submanifold", path)
        if sub_name not in self.submanifolds:
            raise SchemaError(f"{path}.submanifold: unknown submanifold "
                              f"'{sub_name}'")
        sub = self.submanifolds[sub_name]
        text = _field(decl, "expression", path)
        if sub["type"] == "graph" or (sub["type"] == "product_point"
                                      and sub["side"] == "target"):
            variables = sub["_source"].variables
        elif sub["type"] == "product_point":
            variables = sub["_target"].variables
        else:
            variables = sub["_source"].variables + sub["_target"].variables
        _parse_scalar(text, variables, f"{path}.expression")
        return {**decl, "_variables": variables}

    def _build_relation(self, name, decl):
        path = f"scenario.relations.{name}"
        decl = _expect_dict(decl, path)
        sub_name = _field(decl, "submanifold", path)
        if sub_name not in self.submanifolds:
            raise SchemaError(f"{path}.submanifold: unknown submanifold "
                              f"'{sub_name}'")
        sub = self.submanifolds[sub_name]
        twist_name = decl.get("twist")
        twist_text = None
        if twist_name is not None:
            if twist_name not in self.twists:
                raise SchemaError(f"{path}.twist: unknown twist "
                                  f"'{twist_name}'")
            twist = self.twists[twist_name]
            if twist["submanifold"] != sub_name:
                raise SchemaError(
                    f"{path}.twist: twist '{twist_name}' is bound to "
                    f"submanifold '{twist['submanifold']}', not '{sub_name}'")
            twist_text = twist["expression"]
        src, tgt = sub["_source"], sub["_target"]
        try:
            if sub["type"] == "graph":
                return from_graph_decl(src, tgt, sub, twist_text)
            if sub["type"] == "constraints":
                from .relations import from_constraints
                return from_constraints(
                    src, tgt, sub.get("expressions") or None, twist_text,
                    simply_connected=bool(sub.get("simply_connected", True)))
            from .relations import (endpoint_source_relation,
                                    endpoint_target_relation)
            if sub["side"] == "target":
                return endpoint_source_relation(src, tgt, sub["point"],
                                                twist_text)
            return endpoint_target_relation(src, tgt, sub["point"],
                                            twist_text)
        except ConormalError as exc:
            raise SchemaError(f"{path}: {exc}") from exc

    def _build_amplitude(self, name, decl):
        path = f"scenario.amplitudes.{name}"
        decl = _expect_dict(decl, path)
        try:
            return make_amplitude(
                _field(decl, "expression", path),
                tuple(_field(decl, "x_vars", path)),
                tuple(_field(decl, "s_vars", path)),
                [tuple(pair) for pair in _field(decl, "s_support", path)],
                x_support={k: tuple(v) for k, v in
                           decl.get("x_support", {}).items()} or None,
                cutoff_power=int(decl.get("cutoff_power", 4)))
        except ConormalError as exc:
            raise SchemaError(f"{path}: {exc}") from exc

    # -- task-time lookups ---------------------------------------------------

    def resolve(self, value, path):
        """Substitute "$name" / "$name[i]" strings from the parameters."""
        if isinstance(value, str) and value.startswith("$"):
            key = value[1:]
            index = None
            if key.endswith("]") and "[" in key:
                key, idx = key[:-1].split("[", 1)
                try:
                    index = int(idx)
                except ValueError:
                    raise SchemaError(f"{path}: bad parameter index in "
                                      f"'{value}'")
            if key not in self.params:
                raise SchemaError(f"{path}: unknown parameter '{key}'")
            out = self.params[key]
            if index is not None:
                try:
                    out = out[index]
                except (TypeError, IndexError):
                    raise SchemaError(f"{path}: parameter '{key}' has no "
                                      f"index {index}")
            return out
        return value

    def relation(self, name, path):
        if name in self.relations:
            return self.relations[name]
        product = self.products.get(name)
        if product is not None and hasattr(product, "base"):
            return product
        raise SchemaError(f"{path}: unknown relation '{name}'")

    def amplitude(self, name, path):
        if name not in self.amplitudes:
            raise SchemaError(f"{path}: unknown amplitude '{name}'")
        return self.amplitudes[name]

    def kernel(self, name, path) -> DiscretizedFIO:
        product = self.products.get(name)
        if not isinstance(product, DiscretizedFIO):
            raise SchemaError(f"{path}: '{name}' is not a stored kernel")
        return product

    def grid(self, decl, path) -> Grid:
        decl = _expect_dict(decl, path)
        patch = self.space(_field(decl, "space", path), path)
        nodes = self.resolve(_field(decl, "nodes", path), f"{path}.nodes")
        if isinstance(nodes, (int, float)):
            counts = (int(nodes),) * patch.dim
        else:
            counts = tuple(int(n) for n in nodes)
        try:
            return Grid(patch, counts)
        except ConormalError as exc:
            raise SchemaError(f"{path}: {exc}") from exc

    def tolerance(self, task: dict, key: str) -> float:
        overrides = task.get("tolerances", {})
        if key in overrides:
            return float(overrides[key])
        if key not in self.tolerances:
            raise SchemaError(f"unknown tolerance '{key}'")
        return float(self.tolerances[key])

    def stream(self, index: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(self._streams[index]))


def from_graph_decl(src, tgt, sub, twist_text):
    from .relations import from_graph
    return from_graph(src, tgt, list(sub["expressions"]),
                      twist_on_source=twist_text)


# ---------------------------------------------------------------------------
# task runners


def _echo(task: dict) -> dict:
    return {k: v for k, v in task.items()}


def _task_lagrangian_check(run: ScenarioRun, task: dict, rng, path: str):
    rel = run.relation(_field(task, "relation", path), path)
    n = int(run.resolve(task.get("samples", 100), path))
    fiber_scale = float(task.get("fiber_scale", 1.0))
    report = TaskReport(task["name"], task["kind"], _echo(task))
    worst_member = 0.0
    worst_lagr = 0.0
    dim_failures = 0
    for z, s, pt in sample_relation_points(rel, rng, n, fiber_scale):
        worst_member = max(worst_member, membership_residual(rel, pt))
        check = lagrangian_residual(rel, z, s)
        worst_lagr = max(worst_lagr, check.residual)
        if not check.dim_ok:
            dim_failures += 1
    report.bound_check("membership_max", worst_member,
                       run.tolerance(task, "membership"),
                       "relations.membership_residual")
    report.bound_check("lagrangian_max", worst_lagr,
                       run.tolerance(task, "lagrangian"),
                       "relations.lagrangian_residual")
    report.check("frame_dim_failures", dim_failures, 0, dim_failures == 0,
                 "relations.lagrangian_residual")
    report.extras["samples"] = n
    return report


def _expr_gap(expr_a, expr_b, patch: EuclideanPatch, rng, n: int = 40):
    worst = 0.0
    for z in patch.sample_box(rng, n):
        worst = max(worst, abs(float(expr_a(z)) - float(expr_b(z))))
    return worst


def _task_compose(run: ScenarioRun, task: dict, rng, path: str):
    report = TaskReport(task["name"], task["kind"], _echo(task))
    rel1 = run.relation(_field(task, "first", path), path)
    rel2 = run.relation(_field(task, "second", path), path)
    method = task.get("method", "graphs")
    expect_error = task.get("expect_error")
    try:
        if method == "graphs":
            composed = compose_graphs(rel1, rel2)
        elif method == "exact":
            composed = compose_exact_graphs(rel1, rel2, rng)
        elif method == "endpoint":
            composed = compose_endpoint(rel1, rel2, rng)
        else:
            raise SchemaError(f"{path}.method: unknown method '{method}'")
    except ConormalError as exc:
        if expect_error is not None:
            matched = type(exc).__name__ == expect_error
            report.check("expected_error", type(exc).__name__, expect_error,
                         matched, f"relations.compose_{method}")
            report.extras["error_message"] = str(exc)
            return report
        raise
    if expect_error is not None:
        report.check("expected_error", "no error raised", expect_error,
                     False, f"relations.compose_{method}")
        return report

    run.products[task["name"]] = composed
    if composed.graph_map is not None:
        report.extras["composed_map"] = [c.to_text() for c in
                                         composed.graph_map.components]
    if composed.twist is not None:
        report.extras["composed_twist"] = composed.twist.extension.to_text()

    tol = run.tolerance(task, "compose_match")
    if "expect_map" in task:
        expected = _parse_vector(task["expect_map"],
                                 composed.source.variables,
                                 f"{path}.expect_map")
        worst = 0.0
        for comp_a, comp_b in zip(expected.components,
                                  composed.graph_map.components):
            worst = max(worst, _expr_gap(comp_a, comp_b, composed.source,
                                         rng))
        report.bound_check("map_match", worst, tol,
                           f"relations.compose_{method}")
    if "expect_twist" in task:
        product = composed.source.product(composed.target)
        expected = _parse_scalar(task["expect_twist"], product.variables,
                                 f"{path}.expect_twist")
        worst = _expr_gap(expected, composed.twist.extension, product, rng)
        report.bound_check("twist_match", worst, tol,
                           f"relations.compose_{method}")
    if method == "exact":
        # the descended twist must reproduce f1 + f2 for every middle
        # point, not just the one used in the construction
        worst = 0.0
        n1, n2 = rel1.n_source, rel1.n_target
        for _ in range(40):
            z1 = rel1.base.ambient.sample_box(rng, 1)[0]
            x3 = rel2.target.sample_box(rng, 1)[0]
            z2 = np.concatenate([z1[n1:], x3])
            zc = np.concatenate([z1[:n1], x3])
            total = float(rel1.twist.extension(z1)) \
                + float(rel2.twist.extension(z2))
            worst = max(worst, abs(total
                                   - float(composed.twist.extension(zc))))
        report.bound_check("middle_independence", worst,
                           run.tolerance(task, "middle_independence"),
                           "relations.compose_exact_graphs")
    return report


def _task_verify_compose(run: ScenarioRun, task: dict, rng, path: str):
    report = TaskReport(task["name"], task["kind"], _echo(task))
    rel1 = run.relation(_field(task, "first", path), path)
    rel2 = run.relation(_field(task, "second", path), path)
    candidate = run.relation(_field(task, "candidate", path), path)
    expect = task.get("expect_verdict", ["transverse", "clean"])
    if isinstance(expect, str):
        expect = [expect]
    kwargs = {}
    if "samples" in task:
        kwargs["n_samples"] = int(run.resolve(task["samples"], path))
    if "fiber_scale" in task:
        kwargs["fiber_scale"] = float(task["fiber_scale"])
    if task.get("reconstruct_twist"):
        kwargs["reconstruct_candidate_twist"] = True
        if "twist_basis" in task:
            product = candidate.source.product(candidate.target)
            kwargs["twist_basis"] = [
                _parse_scalar(t, product.variables, f"{path}.twist_basis")
                for t in task["twist_basis"]]
    tol = run.tolerance(task, "inclusion")
    result = verify_composition(rel1, rel2, candidate, rng, tol=tol, **kwargs)
    report.extras["composition"] = result.to_dict()
    report.check("verdict", result.verdict, "|".join(expect),
                 result.verdict in expect, "relations.verify_composition")
    if set(expect) & {"transverse", "clean"}:
        report.bound_check("reverse_max_residual",
                           result.reverse_max_residual, tol,
                           "relations.verify_composition")
        report.bound_check("forward_max_residual",
                           result.forward_max_residual, tol,
                           "relations.verify_composition")
        report.check("reverse_misses", result.reverse_misses, 0,
                     result.reverse_misses == 0,
                     "relations.verify_composition")
        if task.get("reconstruct_twist"):
            report.bound_check("twist_fit_residual", result.fit_residual,
                               run.tolerance(task, "twist_fit"),
                               "relations.verify_composition")
    return report


def _task_hormander_dump(run: ScenarioRun, task: dict, rng, path: str):
    report = TaskReport(task["name"], task["kind"], _echo(task))
    rel = run.relation(_field(task, "relation", path), path)
    fiber_names = task.get("fiber_names")
    desc = build_description(rel.base, rel.twist,
                             fiber_names=tuple(fiber_names)
                             if fiber_names else None)
    n = int(run.resolve(task.get("samples", 50), path))
    s_scale = float(task.get("fiber_scale", 1.0))
    points = sample_critical(desc, rng, n, s_scale=s_scale)
    records = [describe_point(desc, x, s) for x, s in points]
    trans = transversality_check(desc, [desc.point(x, s) for x, s in points])
    worst_vert = max((rec.vert_residual for rec in records), default=0.0)
    maslov_dev = max((abs(rec.maslov_value - 1.0) for rec in records),
                     default=0.0)
    report.bound_check("vertical_max", worst_vert,
                       run.tolerance(task, "vertical"),
                       "hormander.vert_residual")
    report.check("transversality", list(trans.ranks), desc.fiber_dim,
                 trans.ok, "hormander.transversality_check")
    if task.get("expect_maslov_one", True):
        report.check("maslov_deviation", maslov_dev, 0.0, maslov_dev == 0.0,
                     "hormander.maslov_section")
    report.extras["fiber_dim"] = desc.fiber_dim
    report.extras["phase"] = desc.phi.to_text()
    if "csv" in task:
        out = run.out_dir / task["csv"]
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as handle:
            writer = csv.writer(handle)
            base_vars = list(desc.base_patch.variables)
            fib_vars = list(desc.fiber_variables)
            writer.writerow(base_vars + fib_vars + ["vert_residual"]
                            + [f"lambda_{v}" for v in base_vars]
                            + [f"lambda_xi_{v}" for v in base_vars]
                            + ["signature", "maslov_re", "maslov_im"])
            for rec in records:
                writer.writerow([repr(float(v)) for v in rec.x]
                                + [repr(float(v)) for v in rec.s]
                                + [repr(float(rec.vert_residual))]
                                + [repr(float(v)) for v in rec.lambda_image.x]
                                + [repr(float(v)) for v in rec.lambda_image.xi]
                                + [rec.fiber_signature,
                                   repr(float(rec.maslov_value.real)),
                                   repr(float(rec.maslov_value.imag))])
        report.extras["csv"] = task["csv"]
    return report


def _fraction_param(value, path) -> Fraction:
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return Fraction(int(value[0]), int(value[1]))
    if isinstance(value, (int, float)):
        return Fraction(value).limit_denominator(1 << 16)
    raise SchemaError(f"{path}: expected a number or [num, den]")


def _task_quantize(run: ScenarioRun, task: dict, rng, path: str):
    report = TaskReport(task["name"], task["kind"], _echo(task))
    hbar = float(run.resolve(_field(task, "hbar", path), f"{path}.hbar"))
    r = _fraction_param(task.get("r", 0), f"{path}.r")
    quad_order = int(run.resolve(task.get("quad_order", 8),
                                 f"{path}.quad_order"))
    budget = int(task.get("panel_budget", 4096))
    source_grid = run.grid(_field(task, "source_grid", path),
                           f"{path}.source_grid")
    target_grid = run.grid(_field(task, "target_grid", path),
                           f"{path}.target_grid")
    if "chain" in task:
        first, second = task["chain"]
        rel1 = run.relation(first, path)
        rel2 = run.relation(second, path)
        amp_names = _field(task, "amplitudes", path)
        amplitude = SeparableAmplitude(
            run.amplitude(amp_names[0], path),
            run.amplitude(amp_names[1], path))
        fio = composed_kernel_direct(rel1, rel2, amplitude, r, hbar,
                                     source_grid, target_grid,
                                     quad_order=quad_order,
                                     panel_budget=budget)
        provenance = "quantize.composed_kernel_direct"
    else:
        rel = run.relation(_field(task, "relation", path), path)
        amplitude = run.amplitude(_field(task, "amplitude", path), path)
        fio = oscillatory_kernel(rel, amplitude, r, hbar, source_grid,
                                 target_grid, quad_order=quad_order,
                                 panel_budget=budget)
        provenance = "quantize.oscillatory_kernel"
    run.products[task["name"]] = fio
    finite = bool(np.all(np.isfinite(fio.kernel.view(float))))
    report.check("kernel_finite", finite, True, finite, provenance)
    report.extras.update({
        "hbar": fio.hbar, "k": fio.k, "m": fio.order_m,
        "max_abs": float(np.max(np.abs(fio.kernel))),
        "prefactor_exponent": fio.prefactor_exponent, "r": fio.r,
        "shape": list(fio.kernel.shape)})
    if "binary" in task:
        out = run.out_dir / task["binary"]
        out.parent.mkdir(parents=True, exist_ok=True)
        kernel_to_binary(fio, out)
        report.extras["binary"] = task["binary"]
    if "csv" in task:
        out = run.out_dir / task["csv"]
        out.parent.mkdir(parents=True, exist_ok=True)
        kernel_to_csv(fio, out)
        report.extras["csv"] = task["csv"]
    return report


def _task_apply(run: ScenarioRun, task: dict, rng, path: str):
    report = TaskReport(task["name"], task["kind"], _echo(task))
    fio = run.kernel(_field(task, "kernel", path), path)
    text = _field(task, "function", path)
    expr = _parse_scalar(text, fio.source_grid.patch.variables,
                         f"{path}.function")
    values = grid_function(fio.source_grid, expr)
    image = apply(fio, values)
    finite = bool(np.all(np.isfinite(image.view(float))))
    report.check("image_finite", finite, True, finite, "quantize.apply")
    norm = float(np.sqrt(np.sum(np.abs(image) ** 2)
                         * fio.target_grid.cell_volume))
    report.extras["image_l2"] = norm
    run.products[task["name"]] = (fio.target_grid, image)
    if "csv" in task:
        out = run.out_dir / task["csv"]
        out.parent.mkdir(parents=True, exist_ok=True)
        nodes = fio.target_grid.node_array()
        with open(out, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(list(fio.target_grid.patch.variables)
                            + ["re", "im"])
            flat = image.reshape(-1)
            for row, value in zip(nodes, flat):
                writer.writerow([repr(float(v)) for v in row]
                                + [repr(float(value.real)),
                                   repr(float(value.imag))])
        report.extras["csv"] = task["csv"]
    return report


def _task_compose_operators(run: ScenarioRun, task: dict, rng, path: str):
    report = TaskReport(task["name"], task["kind"], _echo(task))
    first = run.kernel(_field(task, "first", path), path)
    second = run.kernel(_field(task, "second", path), path)
    excess = int(task.get("excess", 0))
    fio = compose_numeric(second, first, excess=excess)
    run.products[task["name"]] = fio
    expected_m = first.order_m + second.order_m - Fraction(excess, 2)
    report.check("order_additivity", float(fio.order_m - expected_m), 0.0,
                 fio.order_m == expected_m, "quantize.compose_numeric")
    report.extras.update({
        "hbar": fio.hbar, "k": fio.k, "m": fio.order_m,
        "prefactor_exponent": fio.prefactor_exponent, "r": fio.r,
        "shape": list(fio.kernel.shape)})
    return report


def _task_compare_kernels(run: ScenarioRun, task: dict, rng, path: str):
    report = TaskReport(task["name"], task["kind"], _echo(task))
    left = run.kernel(_field(task, "left", path), path)
    right = run.kernel(_field(task, "right", path), path)
    if left.kernel.shape != right.kernel.shape:
        raise TaskError(f"{path}: kernel shapes differ "
                        f"{left.kernel.shape} vs {right.kernel.shape}")
    scale = float(np.linalg.norm(right.kernel))
    diff = float(np.linalg.norm(left.kernel - right.kernel))
    rel = diff / scale if scale > 0 else diff
    report.bound_check("rel_l2", rel, run.tolerance(task, "rel_l2"),
                       "quantize.compose_numeric vs composed_kernel_direct")
    report.extras["left_max"] = float(np.max(np.abs(left.kernel)))
    report.extras["right_max"] = float(np.max(np.abs(right.kernel)))
    return report


def _symbol_inputs(run: ScenarioRun, task: dict, key_rel, key_amp, path):
    rel = run.relation(_field(task, key_rel, path), path)
    amp = run.amplitude(_field(task, key_amp, path), path)
    desc = build_description(rel.base, rel.twist,
                             fiber_names=tuple(amp.s_vars))
    return rel, amp, desc


def _write_symbol_csv(run, task, report, section, points, variables):
    out = run.out_dir / task["csv"]
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = symbol_table(section, points)
    with open(out, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(list(variables)
                        + ["coeff_re", "coeff_im", "maslov_re", "maslov_im"])
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])
    report.extras["csv"] = task["csv"]


def _task_symbol(run: ScenarioRun, task: dict, rng, path: str):
    report = TaskReport(task["name"], task["kind"], _echo(task))
    rel, amp, desc = _symbol_inputs(run, task, "relation", "amplitude", path)
    section = symbol_of(amp, desc, rng)
    n = int(run.resolve(task.get("samples", 20), path))
    s_scale = float(task.get("fiber_scale", 0.9))
    points = sample_critical(desc, rng, n, s_scale=s_scale)
    coeffs = np.array([section.coefficient(p) for p in points])
    maslov_dev = max(abs(section.maslov(p) - 1.0) for p in points)
    finite = bool(np.all(np.isfinite(coeffs.view(float))))
    report.check("coefficient_finite", finite, True, finite,
                 "symbols.symbol_of")
    report.check("maslov_unit", maslov_dev, 0.0, maslov_dev == 0.0,
                 "symbols.symbol_of")
    report.extras["max_abs_coefficient"] = float(np.max(np.abs(coeffs)))
    if "csv" in task:
        variables = (list(desc.base_patch.variables)
                     + list(desc.fiber_variables))
        _write_symbol_csv(run, task, report, section, points, variables)
    run.products[task["name"]] = section
    return report


def _task_symbol_compose(run: ScenarioRun, task: dict, rng, path: str):
    report = TaskReport(task["name"], task["kind"], _echo(task))
    rel1, amp1, desc1 = _symbol_inputs(run, task, "first", "first_amplitude",
                                       path)
    rel2, amp2, desc2 = _symbol_inputs(run, task, "second",
                                       "second_amplitude", path)
    candidate = run.relation(_field(task, "candidate", path), path)
    cand_desc = build_description(candidate.base, candidate.twist)
    sig1 = symbol_of(amp1, desc1, rng)
    sig2 = symbol_of(amp2, desc2, rng)
    section = compose_symbols(sig1, sig2, rel1, rel2, candidate, cand_desc,
                              rng)
    run.products[task["name"]] = section

    points = []
    for entry in task.get("points", []):
        points.append((np.asarray(entry["z"], dtype=float),
                       np.asarray(entry.get("s", []), dtype=float)))
    if points:
        coeffs = np.array([section.coefficient(p) for p in points])
        finite = bool(np.all(np.isfinite(coeffs.view(float))))
        report.check("coefficient_finite", finite, True, finite,
                     "symbols.compose_symbols")
        report.extras["coefficients"] = coeffs
        if "csv" in task:
            variables = (list(candidate.source.variables)
                         + list(candidate.target.variables)
                         + [f"s{i+1}" for i in
                            range(candidate.fiber_dim)])
            _write_symbol_csv(run, task, report, section, points, variables)

    compare = task.get("compare_kernels")
    if compare:
        cpath = f"{path}.compare_kernels"
        x_src = float(_field(compare, "source_point", cpath))
        x_tgt = float(_field(compare, "target_point", cpath))
        lo, hi = _field(compare, "fiber_support", cpath)
        order = int(compare.get("quad_order", 40))
        nodes, weights = np.polynomial.legendre.leggauss(order)
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        zc = np.array([x_src, x_tgt])
        total = 0.0 + 0.0j
        for node, weight in zip(nodes, weights):
            value = section.coefficient((zc, np.array([mid + half * node])))
            total += weight * complex(value)
        total *= half
        rhs = abs(total)
        phase = total / rhs if rhs > 0 else complex(1.0)
        report.extras["symbol_integral"] = rhs
        # any leftover unit-modulus factor is reported, never absorbed
        report.extras["unit_modulus_factor"] = phase
        errors = []
        for kname in _field(compare, "kernels", cpath):
            fio = run.kernel(kname, cpath)
            lead = stationary_phase_leading(fio, x_src, x_tgt)
            errors.append(abs(lead - rhs) / rhs if rhs > 0 else abs(lead))
        report.extras["kernel_errors"] = errors
        tol = run.tolerance(task, "symbol_match")
        report.bound_check("final_kernel_error", errors[-1], tol,
                           "symbols.stationary_phase_leading")
        monotone = all(a > b for a, b in zip(errors, errors[1:]))
        report.check("errors_decrease", errors, "strictly decreasing",
                     monotone or len(errors) < 2,
                     "symbols.stationary_phase_leading")
    return report


_RUNNERS = {
    "lagrangian-check": _task_lagrangian_check,
    "compose": _task_compose,
    "verify-compose": _task_verify_compose,
    "hormander-dump": _task_hormander_dump,
    "quantize": _task_quantize,
    "apply": _task_apply,
    "compose-operators": _task_compose_operators,
    "compare-kernels": _task_compare_kernels,
    "symbol": _task_symbol,
    "symbol-compose": _task_symbol_compose,
}


# ---------------------------------------------------------------------------
# execution


def load_scenario(path) -> dict:
    path = Path(path)
    try:
        with open(path) as handle:
            return json.load(handle)
    except FileNotFoundError:
        raise SchemaError(f"scenario file not found: {path}")
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})")


def run_scenario(doc, source_name: str, out_dir, *, seed=None, params=None,
                 tolerances=None, fmt: str = "json", echo=print):
    """Execute every task in order and write the aggregate report.

    Returns (exit_code, report_dict).  Exit code 0 means every check of
    every task passed; 1 means at least one check failed.  Schema
    problems raise SchemaError before any task runs; module errors
    during a task surface as TaskError.
    """
    run = ScenarioRun(doc, source_name, out_dir, seed_override=seed,
                      param_overrides=params, tolerance_overrides=tolerances)
    run.out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    seen_names = set()
    for index, task in enumerate(run.tasks):
        path = f"scenario.tasks[{index}]"
        task = _expect_dict(task, path)
        kind = _field(task, "kind", path)
        name = _field(task, "name", path)
        if kind not in _RUNNERS:
            raise SchemaError(f"{path}.kind: unknown task kind '{kind}'")
        if name in seen_names:
            raise SchemaError(f"{path}.name: duplicate task name '{name}'")
        seen_names.add(name)
        rng = run.stream(index)
        started = time.perf_counter()
        try:
            report = _RUNNERS[kind](run, task, rng, path)
        except SchemaError:
            raise
        except ConormalError as exc:
            raise TaskError(f"task '{name}' ({kind}): {exc}") from exc
        elapsed = time.perf_counter() - started
        echo(f"[{name}] {kind}: "
             f"{'pass' if report.passed else 'FAIL'} ({elapsed:.2f} s)")
        reports.append(report)

    document = {
        "scenario": Path(source_name).name,
        "seed": run.seed,
        "tasks": [r.to_dict() for r in reports],
        "tolerances": _jsonable(run.tolerances),
    }
    stem = Path(source_name).stem or "scenario"
    if fmt == "json":
        out = run.out_dir / f"{stem}.report.json"
        text = json.dumps(document, sort_keys=True, indent=2) + "\n"
        out.write_text(text)
    elif fmt == "csv":
        out = run.out_dir / f"{stem}.report.csv"
        with open(out, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["task", "kind", "check", "value", "tolerance",
                             "passed", "provenance"])
            for report in reports:
                for check in report.checks:
                    writer.writerow([report.name, report.kind, check.name,
                                     json.dumps(_jsonable(check.value),
                                                sort_keys=True),
                                     json.dumps(_jsonable(check.tolerance),
                                                sort_keys=True),
                                     check.passed, check.provenance])
    else:
        raise SchemaError(f"unknown report format '{fmt}'")
    all_pass = all(r.passed for r in reports)
    return (0 if all_pass else 1), document
