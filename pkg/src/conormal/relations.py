"""Twisted conormal bundles as canonical relations, and their compositions.

A relation here is the sign-flipped twisted conormal bundle of a base
submanifold Z of a product patch X x Y: the set of (x, xi, y, eta) such
that (x, y) lies on Z and the covector (-xi - d_X f, eta - d_Y f)
annihilates the tangent space of Z.  The fiber over a base point is
parametrized by the coefficients s against the constraint differentials,
so every relation point is reachable as ``relation_point(rel, z, s)``.

Three closed-form composition patterns are provided (graphs, relations
through a marked point, exact graphs with middle-differential
cancellation), plus a fully numerical ``verify_composition`` that checks
a candidate composed relation against the defining property: it solves
for intermediate points, measures the tangent-space matching condition,
the fiber dimension, the submersion rank onto the candidate base, and
both inclusions, and returns a structured report instead of a bare
verdict.

Twist recovery: the tautological one-form of the cotangent bundle pulls
back along a twisted conormal bundle to a form that is basic over the
base and integrates to the twist.  ``reconstruct_twist`` does the line
integration along polylines; ``fit_twist`` projects reconstructed values
onto a span of candidate expressions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import quad

from .errors import (CancellationFailed, DimensionMismatch, FiberSolveFailed,
                     NewtonFailed, NotHorizontal, RankDeficient)
from .expr import ScalarExpr, VectorExpr
from .geometry import (ConstraintSubmanifold, EuclideanPatch, GraphSubmanifold,
                       MEMBERSHIP_TOL, TwistFunction, conormal_point,
                       matrix_rank_tol, newton_project, null_space)

INCLUSION_TOL = 1e-9
CANCELLATION_TOL = 1e-9
HORIZONTALITY_TOL = 1e-8
STAR_SOLVE_TOL = 1e-11
STAR_STARTS = 16


@dataclass(frozen=True)
class CanonicalRelation:
    """Sign-flipped twisted conormal bundle of Z inside T*X x T*Y."""

    source: EuclideanPatch
    target: EuclideanPatch
    base: ConstraintSubmanifold
    twist: Optional[TwistFunction] = None
    graph_map: Optional[VectorExpr] = None
    twist_on_source: Optional[ScalarExpr] = None

    def __post_init__(self):
        product_vars = self.source.variables + self.target.variables
        if self.base.ambient.variables != product_vars:
            raise DimensionMismatch(
                "base submanifold must live on the source x target product patch")
        if self.twist is not None and self.twist.base is not self.base:
            # allow equal-but-distinct objects; only the ambient must match
            if self.twist.base.ambient.variables != product_vars:
                raise DimensionMismatch("twist bound to a different ambient patch")

    @property
    def n_source(self) -> int:
        return self.source.dim

    @property
    def n_target(self) -> int:
        return self.target.dim

    @property
    def ambient_dim(self) -> int:
        return self.source.dim + self.target.dim

    @property
    def fiber_dim(self) -> int:
        return self.base.codim

    @property
    def dim(self) -> int:
        """Dimension of the relation as a Lagrangian submanifold."""
        return self.ambient_dim

    @property
    def phase_on_base(self) -> ScalarExpr:
        """Value of the generating phase on its critical set: the twist."""
        if self.twist is None:
            return ScalarExpr.constant(0.0, self.base.ambient.variables)
        return self.twist.extension

    def product_patch(self) -> EuclideanPatch:
        return self.base.ambient

    def split(self, z):
        z = np.asarray(z, dtype=float)
        return z[: self.n_source], z[self.n_source:]


def from_constraints(source: EuclideanPatch, target: EuclideanPatch,
                     constraints, twist_text=None,
                     simply_connected: bool = True) -> CanonicalRelation:
    """Relation from constraint texts (or a VectorExpr) on the product patch."""
    product = source.product(target)
    if isinstance(constraints, VectorExpr):
        vec = constraints
    elif constraints:
        vec = VectorExpr.parse(list(constraints), product.variables)
    else:
        vec = None
    base = ConstraintSubmanifold(product, vec, simply_connected=simply_connected)
    twist = None
    if twist_text is not None:
        ext = (twist_text if isinstance(twist_text, ScalarExpr)
               else ScalarExpr.parse(twist_text, product.variables))
        twist = TwistFunction(base, ext.with_vars(product.variables))
    return CanonicalRelation(source, target, base, twist)


def from_graph(source: EuclideanPatch, target: EuclideanPatch,
               mapping, twist_on_source=None) -> CanonicalRelation:
    """Relation generated by the graph of g: source -> target.

    ``twist_on_source`` is a function of the source coordinates alone; it
    is extended to the product patch independently of the target block,
    which is the canonical extension for a graph.
    """
    if isinstance(mapping, (list, tuple)):
        mapping = VectorExpr.parse(list(mapping), source.variables)
    graph = GraphSubmanifold(source, target, mapping)
    base = graph.as_constraints()
    product_vars = base.ambient.variables
    twist = None
    f_src = None
    if twist_on_source is not None:
        f_src = (twist_on_source if isinstance(twist_on_source, ScalarExpr)
                 else ScalarExpr.parse(twist_on_source, source.variables))
        twist = TwistFunction(base, f_src.with_vars(product_vars))
    return CanonicalRelation(source, target, base, twist,
                             graph_map=mapping, twist_on_source=f_src)


def identity_relation(source: EuclideanPatch, target: EuclideanPatch) -> CanonicalRelation:
    """The identity map presented as a graph relation (names must differ)."""
    if source.dim != target.dim:
        raise DimensionMismatch("identity requires equal dimensions")
    mapping = VectorExpr.parse(list(source.variables), source.variables)
    return from_graph(source, target, mapping)


def endpoint_source_relation(source: EuclideanPatch, middle: EuclideanPatch,
                             star, twist_on_source=None) -> CanonicalRelation:
    """Relation with base X x {star}: everything lands on the marked point."""
    star = np.asarray(star, dtype=float)
    if star.shape[0] != middle.dim:
        raise DimensionMismatch("marked point has wrong dimension")
    product = source.product(middle)
    texts = [f"{name} - ({float(value)!r})"
             for name, value in zip(middle.variables, star)]
    vec = VectorExpr.parse(texts, product.variables)
    base = ConstraintSubmanifold(product, vec)
    twist = None
    if twist_on_source is not None:
        f = (twist_on_source if isinstance(twist_on_source, ScalarExpr)
             else ScalarExpr.parse(twist_on_source, source.variables))
        twist = TwistFunction(base, f.with_vars(product.variables))
    return CanonicalRelation(source, middle, base, twist)


def endpoint_target_relation(middle: EuclideanPatch, target: EuclideanPatch,
                             star, twist_on_target=None) -> CanonicalRelation:
    """Relation with base {star} x X3: everything emanates from the point."""
    star = np.asarray(star, dtype=float)
    if star.shape[0] != middle.dim:
        raise DimensionMismatch("marked point has wrong dimension")
    product = middle.product(target)
    texts = [f"{name} - ({float(value)!r})"
             for name, value in zip(middle.variables, star)]
    vec = VectorExpr.parse(texts, product.variables)
    base = ConstraintSubmanifold(product, vec)
    twist = None
    if twist_on_target is not None:
        f = (twist_on_target if isinstance(twist_on_target, ScalarExpr)
             else ScalarExpr.parse(twist_on_target, target.variables))
        twist = TwistFunction(base, f.with_vars(product.variables))
    return CanonicalRelation(middle, target, base, twist)


# ---------------------------------------------------------------------------
# points and membership


@dataclass(frozen=True)
class RelationPoint:
    x: np.ndarray
    xi: np.ndarray
    y: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        for name in ("x", "xi", "y", "eta"):
            object.__setattr__(self, name,
                               np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.x, self.xi, self.y, self.eta])

    @property
    def base_point(self) -> np.ndarray:
        return np.concatenate([self.x, self.y])


def relation_point(rel: CanonicalRelation, z, s) -> RelationPoint:
    """The relation point over base point z with fiber coordinates s.

    The source covector block of the underlying conormal covector is
    negated; that sign is what turns the Lagrangian into a relation that
    composes like a mapping.
    """
    cp = conormal_point(rel.base, rel.twist, z, s)
    n1 = rel.n_source
    return RelationPoint(cp.x[:n1], -cp.xi[:n1], cp.x[n1:], cp.xi[n1:])


def membership_residual(rel: CanonicalRelation, point: RelationPoint) -> float:
    """Max of the base residual and the conormal annihilation residual.

    The annihilation residual contracts (-xi - d_X f, eta - d_Y f) with
    an orthonormal tangent basis of the base, so it is a covector-scale
    quantity and zero exactly on the relation.
    """
    z = point.base_point
    base_res = rel.base.residual(z)
    r0 = float(np.max(np.abs(base_res))) if base_res.size else 0.0
    w = np.concatenate([-point.xi, point.eta])
    if rel.twist is not None:
        w = w - rel.twist.differential(z)
    try:
        tangent = rel.base.tangent_space(z)
    except RankDeficient:
        return math.inf
    if tangent.shape[1] == 0:
        ann = float(np.max(np.abs(w)))
    else:
        ann = float(np.max(np.abs(w @ tangent)))
    return max(r0, ann)


def member(rel: CanonicalRelation, point: RelationPoint,
           tol: float = MEMBERSHIP_TOL) -> bool:
    return membership_residual(rel, point) <= tol


def sample_relation_points(rel: CanonicalRelation, rng: np.random.Generator,
                           n: int, fiber_scale: float = 1.0):
    """Draw n relation points: base points by constrained Newton, fiber
    coordinates uniform in [-fiber_scale, fiber_scale]."""
    zs = rel.base.sample_points(rng, n)
    out = []
    for z in zs:
        s = fiber_scale * (2.0 * rng.random(rel.fiber_dim) - 1.0)
        out.append((z, s, relation_point(rel, z, s)))
    return out


# ---------------------------------------------------------------------------
# tangent frames and the Lagrangian check


def _curvature_operator(rel: CanonicalRelation, z, s) -> np.ndarray:
    """A = sum_i s_i Hess u_i + Hess f at z: the covector differential
    along base directions."""
    m = rel.ambient_dim
    a = np.zeros((m, m))
    if rel.fiber_dim:
        for i, comp in enumerate(rel.base.constraints.components):
            a += s[i] * comp.hessian(z)
    if rel.twist is not None:
        a += rel.twist.extension.hessian(z)
    return a


def lambda_frame(rel: CanonicalRelation, z, s,
                 covector_scale: Optional[ScalarExpr] = None) -> np.ndarray:
    """Tangent frame of the (un-flipped) twisted conormal bundle at (z, s).

    Columns are exact images of the parametrization differential: base
    directions map to (t, A t) and fiber directions to (0, du_i).  With
    ``covector_scale`` c the source-side covector block is multiplied by
    c(z) before differentiating, which models a parametrization that is
    not of conormal type; this is the hook used by negative controls.
    """
    z = np.asarray(z, dtype=float)
    s = np.atleast_1d(np.asarray(s, dtype=float))
    m = rel.ambient_dim
    n1 = rel.n_source
    tangent = rel.base.tangent_space(z)
    jac = rel.base.jacobian(z)
    a = _curvature_operator(rel, z, s)
    dz = tangent
    dzeta = a @ tangent
    fiber = jac.T.copy()
    if covector_scale is not None:
        c = float(covector_scale(z))
        grad_c = covector_scale.gradient(z)
        xi_base = jac.T @ s if rel.fiber_dim else np.zeros(m)
        if rel.twist is not None:
            xi_base = xi_base + rel.twist.differential(z)
        dzeta = dzeta.copy()
        dzeta[:n1, :] = c * dzeta[:n1, :] + np.outer(xi_base[:n1], grad_c @ tangent)
        fiber[:n1, :] = c * fiber[:n1, :]
    top = np.hstack([dz, np.zeros((m, rel.fiber_dim))])
    bottom = np.hstack([dzeta, fiber])
    return np.vstack([top, bottom])


def relation_frame(rel: CanonicalRelation, z, s) -> np.ndarray:
    """Tangent frame of the relation, rows ordered (x, xi, y, eta)."""
    fl = lambda_frame(rel, z, s)
    n1, n2 = rel.n_source, rel.n_target
    m = n1 + n2
    return np.vstack([fl[:n1], -fl[m:m + n1], fl[n1:m], fl[m + n1:]])


@dataclass(frozen=True)
class LagrangianCheck:
    residual: float
    frame_rank: int
    dim: int

    @property
    def dim_ok(self) -> bool:
        return self.frame_rank == self.dim


def lagrangian_residual(rel: CanonicalRelation, z, s,
                        covector_scale: Optional[ScalarExpr] = None) -> LagrangianCheck:
    """Max symplectic pairing over the exact tangent frame at (z, s).

    Zero (to rounding) iff the parametrized surface is Lagrangian there.
    Also reports the frame rank, which must equal dim X + dim Y.
    """
    frame = lambda_frame(rel, z, s, covector_scale)
    m = rel.ambient_dim
    base = frame[:m, :]
    cov = frame[m:, :]
    # omega(v_i, v_j) = cov_i . base_j - cov_j . base_i, all pairs at once
    gram = cov.T @ base
    residual = float(np.max(np.abs(gram - gram.T))) if gram.size else 0.0
    rank = matrix_rank_tol(frame)
    return LagrangianCheck(residual, rank, rel.dim)


# ---------------------------------------------------------------------------
# closed-form compositions


def _require_chainable(rel1: CanonicalRelation, rel2: CanonicalRelation):
    if rel1.target.variables != rel2.source.variables:
        raise DimensionMismatch(
            "middle patches disagree: "
            f"{rel1.target.variables} vs {rel2.source.variables}")


def compose_graphs(rel1: CanonicalRelation, rel2: CanonicalRelation) -> CanonicalRelation:
    """Composite of two graph relations.

    The composed graph is g2 o g1 and the composed twist is
    f1 + f2 o g1: the second twist lives on the middle patch, so it must
    be pulled back to the initial one through the first map.  (Pulling
    back through the second map is not even type-correct.)  This formula
    is exercised against the membership oracle in the test suite.
    """
    _require_chainable(rel1, rel2)
    if rel1.graph_map is None or rel2.graph_map is None:
        raise DimensionMismatch("compose_graphs requires graph-generated relations")
    x_vars = rel1.source.variables
    subst = {name: comp for name, comp
             in zip(rel2.source.variables, rel1.graph_map.components)}
    composed_map = rel2.graph_map.substitute(subst, x_vars)
    f_parts = []
    if rel1.twist_on_source is not None:
        f_parts.append(rel1.twist_on_source)
    if rel2.twist_on_source is not None:
        f_parts.append(rel2.twist_on_source.substitute(subst, x_vars))
    twist = None
    if f_parts:
        twist = f_parts[0]
        for part in f_parts[1:]:
            twist = twist + part
    return from_graph(rel1.source, rel2.target, composed_map, twist)


def _extract_marked_point(rel: CanonicalRelation, side: str,
                          rng: np.random.Generator, tol: float = 1e-8) -> np.ndarray:
    """Recover the marked middle point of an endpoint-type relation.

    ``side`` is 'target' when the relation pins its target block
    (base = X x {p}) and 'source' when it pins its source block.
    Checked numerically: the constraints must not vary along the free
    block and must pin the marked block completely.
    """
    n1, n2 = rel.n_source, rel.n_target
    pinned = n2 if side == "target" else n1
    if rel.fiber_dim != pinned:
        raise DimensionMismatch(
            f"endpoint relation must have exactly {pinned} constraints")
    zs = rel.base.sample_points(rng, 3)
    marks = []
    for z in zs:
        jac = rel.base.jacobian(z)
        free = jac[:, :n1] if side == "target" else jac[:, n1:]
        if float(np.max(np.abs(free))) > tol:
            raise DimensionMismatch(
                "constraints vary along the free block; not an endpoint relation")
        marks.append(z[n1:] if side == "target" else z[:n1])
    marks = np.array(marks)
    if float(np.max(np.abs(marks - marks[0]))) > tol:
        raise DimensionMismatch("marked point is not unique")
    return marks[0]


def compose_endpoint(rel1: CanonicalRelation, rel2: CanonicalRelation,
                     rng: np.random.Generator,
                     tol: float = 1e-8) -> CanonicalRelation:
    """Composite of X1 x {p} and {p} x X3 through the common marked point.

    The result has the full product X1 x X3 as base and the sum of the
    restricted twists as twist: the twists are evaluated on their bases
    by substituting the marked point, so the choice of extensions cannot
    leak into the composite.
    """
    _require_chainable(rel1, rel2)
    star1 = _extract_marked_point(rel1, "target", rng, tol)
    star2 = _extract_marked_point(rel2, "source", rng, tol)
    if float(np.max(np.abs(star1 - star2))) > tol:
        raise FiberSolveFailed(
            "marked points differ; the endpoint composition is empty")
    star = 0.5 * (star1 + star2)
    product_vars = rel1.source.variables + rel2.target.variables
    parts = []
    if rel1.twist is not None:
        mapping = {name: float(value)
                   for name, value in zip(rel1.target.variables, star)}
        parts.append(rel1.twist.extension.substitute(mapping, rel1.source.variables))
    if rel2.twist is not None:
        mapping = {name: float(value)
                   for name, value in zip(rel2.source.variables, star)}
        parts.append(rel2.twist.extension.substitute(mapping, rel2.target.variables))
    twist_text = None
    if parts:
        lifted = [p.with_vars(product_vars) for p in parts]
        total = lifted[0]
        for part in lifted[1:]:
            total = total + part
        twist_text = total
    return from_constraints(rel1.source, rel2.target, None, twist_text)


def compose_exact_graphs(rel1: CanonicalRelation, rel2: CanonicalRelation,
                         rng: np.random.Generator, n_check: int = 60,
                         tol: float = CANCELLATION_TOL) -> CanonicalRelation:
    """Composite of two exact-graph relations (no base constraints).

    Requires the middle differentials to cancel: d2 f1(x1, x2) +
    d2 f2(x2, x3) = 0 at every sampled triple, otherwise
    CancellationFailed carries the worst violation.  Under cancellation
    f1 + f2 is constant in the middle slot and descends to the twist of
    the composite on the full product X1 x X3.
    """
    _require_chainable(rel1, rel2)
    if rel1.fiber_dim != 0 or rel2.fiber_dim != 0:
        raise DimensionMismatch("exact-graph composition needs constraint-free bases")
    if rel1.twist is None or rel2.twist is None:
        raise DimensionMismatch("exact-graph composition needs twists on both factors")
    n1, n2, n3 = rel1.n_source, rel1.n_target, rel2.n_target
    worst = 0.0
    for _ in range(n_check):
        z1 = rel1.base.ambient.sample_box(rng, 1)[0]
        x3 = np.array([rng.uniform(lo, hi) for lo, hi in rel2.target.box])
        z2 = np.concatenate([z1[n1:], x3])
        d2_first = rel1.twist.differential(z1)[n1:]
        d2_second = rel2.twist.differential(z2)[:n2]
        worst = max(worst, float(np.max(np.abs(d2_first + d2_second))))
    if worst > tol:
        raise CancellationFailed(
            f"middle differentials do not cancel: max violation {worst:.3e}")
    center = np.array([0.5 * (lo + hi) for lo, hi in rel1.target.box])
    mapping1 = {name: float(value)
                for name, value in zip(rel1.target.variables, center)}
    mapping2 = {name: float(value)
                for name, value in zip(rel2.source.variables, center)}
    f1_at = rel1.twist.extension.substitute(mapping1, rel1.source.variables)
    f2_at = rel2.twist.extension.substitute(mapping2, rel2.target.variables)
    product_vars = rel1.source.variables + rel2.target.variables
    twist = f1_at.with_vars(product_vars) + f2_at.with_vars(product_vars)
    return from_constraints(rel1.source, rel2.target, None, twist)


# ---------------------------------------------------------------------------
# numerical composition: intermediate-point solves


def _gauss_newton_ls(res_fn, jac_fn, w0, tol: float = STAR_SOLVE_TOL,
                     max_iter: int = 60):
    """Damped Gauss-Newton on an (over)determined square-free system.

    Returns (w, residual, converged); never raises, callers decide what
    a miss means.
    """
    w = np.asarray(w0, dtype=float).copy()
    r = res_fn(w)
    rn = float(np.max(np.abs(r))) if r.size else 0.0
    for _ in range(max_iter):
        if rn <= tol:
            return w, rn, True
        jac = jac_fn(w)
        step, *_ = np.linalg.lstsq(jac, -r, rcond=None)
        t = 1.0
        improved = False
        while t > 2.0 ** -13:
            wn = w + t * step
            r2 = res_fn(wn)
            rn2 = float(np.max(np.abs(r2)))
            if rn2 < rn:
                w, r, rn = wn, r2, rn2
                improved = True
                break
            t *= 0.5
        if not improved:
            return w, rn, rn <= tol
    return w, rn, rn <= tol


def _conormal_cov(rel: CanonicalRelation, z, s):
    """Un-flipped conormal covector at (z, s) and the base jacobian."""
    jac = rel.base.jacobian(z)
    cov = jac.T @ s if rel.fiber_dim else np.zeros(rel.ambient_dim)
    if rel.twist is not None:
        cov = cov + rel.twist.differential(z)
    return cov, jac


@dataclass(frozen=True)
class StarSolution:
    """A solved intermediate point realizing a composition."""

    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    s: np.ndarray
    t: np.ndarray
    xi1: np.ndarray
    eta2: np.ndarray
    eta3: np.ndarray
    residual: float


def solve_star(rel1: CanonicalRelation, rel2: CanonicalRelation,
               x1, xi1, x3, xi3, rng: np.random.Generator,
               n_starts: int = STAR_STARTS, tol: float = STAR_SOLVE_TOL,
               fiber_scale: float = 2.0):
    """Find (x2, s, t) such that the two relation points chain through x2
    with matching middle covectors and the prescribed outer covectors.

    Multi-start damped Gauss-Newton; returns a StarSolution or None.
    """
    n1, n2, n3 = rel1.n_source, rel1.n_target, rel2.n_target
    k1, k2 = rel1.fiber_dim, rel2.fiber_dim
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    x3 = np.atleast_1d(np.asarray(x3, dtype=float))
    xi1 = np.atleast_1d(np.asarray(xi1, dtype=float))
    xi3 = np.atleast_1d(np.asarray(xi3, dtype=float))

    def unpack(w):
        return w[:n2], w[n2:n2 + k1], w[n2 + k1:]

    def residual(w):
        x2, s, t = unpack(w)
        z1 = np.concatenate([x1, x2])
        z2 = np.concatenate([x2, x3])
        cov1, _ = _conormal_cov(rel1, z1, s)
        cov2, _ = _conormal_cov(rel2, z2, t)
        return np.concatenate([
            rel1.base.residual(z1),
            rel2.base.residual(z2),
            -cov1[:n1] - xi1,
            cov1[n1:] + cov2[:n2],
            cov2[n2:] - xi3,
        ])

    def jacobian(w):
        x2, s, t = unpack(w)
        z1 = np.concatenate([x1, x2])
        z2 = np.concatenate([x2, x3])
        jac1 = rel1.base.jacobian(z1)
        jac2 = rel2.base.jacobian(z2)
        a1 = _curvature_operator(rel1, z1, s)
        a2 = _curvature_operator(rel2, z2, t)
        nw = n2 + k1 + k2
        rows = k1 + k2 + n1 + n2 + n3
        out = np.zeros((rows, nw))
        r0 = 0
        out[r0:r0 + k1, :n2] = jac1[:, n1:]
        r0 += k1
        out[r0:r0 + k2, :n2] = jac2[:, :n2]
        r0 += k2
        out[r0:r0 + n1, :n2] = -a1[:n1, n1:]
        out[r0:r0 + n1, n2:n2 + k1] = -jac1[:, :n1].T if k1 else 0.0
        r0 += n1
        out[r0:r0 + n2, :n2] = a1[n1:, n1:] + a2[:n2, :n2]
        if k1:
            out[r0:r0 + n2, n2:n2 + k1] = jac1[:, n1:].T
        if k2:
            out[r0:r0 + n2, n2 + k1:] = jac2[:, :n2].T
        r0 += n2
        out[r0:r0 + n3, :n2] = a2[n2:, :n2]
        if k2:
            out[r0:r0 + n3, n2 + k1:] = jac2[:, n2:].T
        return out

    cov_scale = max(1.0, float(np.max(np.abs(xi1))) if xi1.size else 0.0,
                    float(np.max(np.abs(xi3))) if xi3.size else 0.0)
    best = None
    for start in range(n_starts):
        if start == 0:
            x2_0 = np.array([0.5 * (lo + hi) for lo, hi in rel1.target.box])
            s0 = np.zeros(k1)
            t0 = np.zeros(k2)
        else:
            x2_0 = rel1.target.sample_box(rng, 1)[0]
            s0 = cov_scale * fiber_scale * (2.0 * rng.random(k1) - 1.0)
            t0 = cov_scale * fiber_scale * (2.0 * rng.random(k2) - 1.0)
        w0 = np.concatenate([x2_0, s0, t0])
        w, rn, ok = _gauss_newton_ls(residual, jacobian, w0, tol)
        if best is None or rn < best[1]:
            best = (w, rn)
        if ok:
            break
    w, rn = best
    if rn > tol:
        return None
    x2, s, t = unpack(w)
    z1 = np.concatenate([x1, x2])
    z2 = np.concatenate([x2, x3])
    cov1, _ = _conormal_cov(rel1, z1, s)
    cov2, _ = _conormal_cov(rel2, z2, t)
    return StarSolution(x1, x2, x3, s, t,
                        -cov1[:n1], cov1[n1:], cov2[n2:], rn)


def solve_forward(rel2: CanonicalRelation, x2, eta2, rng: np.random.Generator,
                  n_starts: int = STAR_STARTS, tol: float = STAR_SOLVE_TOL,
                  fiber_scale: float = 2.0):
    """Continue an incoming point (x2, eta2) through rel2.

    Solves for (x3, t) with (x2, x3) on the base and the relation's
    source covector equal to eta2.  Returns (x3, t, eta3, residual) or
    None when no start converges.
    """
    n2, n3 = rel2.n_source, rel2.n_target
    k2 = rel2.fiber_dim
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    eta2 = np.atleast_1d(np.asarray(eta2, dtype=float))

    def unpack(w):
        return w[:n3], w[n3:]

    def residual(w):
        x3, t = unpack(w)
        z2 = np.concatenate([x2, x3])
        cov2, _ = _conormal_cov(rel2, z2, t)
        return np.concatenate([
            rel2.base.residual(z2),
            eta2 + cov2[:n2],
        ])

    def jacobian(w):
        x3, t = unpack(w)
        z2 = np.concatenate([x2, x3])
        jac2 = rel2.base.jacobian(z2)
        a2 = _curvature_operator(rel2, z2, t)
        out = np.zeros((k2 + n2, n3 + k2))
        out[:k2, :n3] = jac2[:, n2:]
        out[k2:, :n3] = a2[:n2, n2:]
        if k2:
            out[k2:, n3:] = jac2[:, :n2].T
        return out

    cov_scale = max(1.0, float(np.max(np.abs(eta2))) if eta2.size else 0.0)
    best = None
    for start in range(n_starts):
        if start == 0:
            x3_0 = np.array([0.5 * (lo + hi) for lo, hi in rel2.target.box])
            t0 = np.zeros(k2)
        else:
            x3_0 = rel2.target.sample_box(rng, 1)[0]
            t0 = cov_scale * fiber_scale * (2.0 * rng.random(k2) - 1.0)
        w0 = np.concatenate([x3_0, t0])
        w, rn, ok = _gauss_newton_ls(residual, jacobian, w0, tol)
        if best is None or rn < best[1]:
            best = (w, rn)
        if ok:
            break
    w, rn = best
    if rn > tol:
        return None
    x3, t = unpack(w)
    z2 = np.concatenate([x2, x3])
    cov2, _ = _conormal_cov(rel2, z2, t)
    return x3, t, cov2[n2:], rn


# ---------------------------------------------------------------------------
# composition verification


@dataclass
class CompositionReport:
    """Structured outcome of a numerical composition check."""

    verdict: str
    fiber_dim_e: int
    star_points: list = field(default_factory=list)
    tangent_condition_rank: list = field(default_factory=list)
    submersion_rank: list = field(default_factory=list)
    reverse_max_residual: float = 0.0
    forward_max_residual: float = 0.0
    cancellation_max: float = 0.0
    reverse_misses: int = 0
    forward_attempts: int = 0
    forward_successes: int = 0
    candidate_source: str = "expression"
    fit_residual: Optional[float] = None
    reasons: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "fiber_dim_e": self.fiber_dim_e,
            "star_points": self.star_points,
            "tangent_condition_rank": self.tangent_condition_rank,
            "submersion_rank": self.submersion_rank,
            "reverse_max_residual": self.reverse_max_residual,
            "forward_max_residual": self.forward_max_residual,
            "cancellation_max": self.cancellation_max,
            "reverse_misses": self.reverse_misses,
            "forward_attempts": self.forward_attempts,
            "forward_successes": self.forward_successes,
            "candidate_source": self.candidate_source,
            "fit_residual": self.fit_residual,
            "reasons": self.reasons,
        }


def _tangent_analysis(rel1: CanonicalRelation, rel2: CanonicalRelation,
                      candidate: CanonicalRelation, sol: StarSolution):
    """Fiber-product tangent dimension, excess, and base submersion rank."""
    n1, n2, n3 = rel1.n_source, rel1.n_target, rel2.n_target
    z1 = np.concatenate([sol.x1, sol.x2])
    z2 = np.concatenate([sol.x2, sol.x3])
    b1 = relation_frame(rel1, z1, sol.s)
    b2 = relation_frame(rel2, z2, sol.t)
    mid1 = b1[2 * n1:, :]
    mid2 = b2[:2 * n2, :]
    match = np.hstack([mid1, -mid2])
    null = null_space(match)
    match_rank = matrix_rank_tol(match)
    d_star = null.shape[1]
    e_obs = d_star - (n1 + n3)
    d1 = b1.shape[1]
    a_part = null[:d1, :]
    b_part = null[d1:, :]
    base_rows = np.vstack([b1[:n1, :] @ a_part,
                           b2[2 * n2: 2 * n2 + n3, :] @ b_part])
    sub_rank = matrix_rank_tol(base_rows)
    return e_obs, match_rank, sub_rank


def _cancellation_scan(rel1: CanonicalRelation, rel2: CanonicalRelation,
                       rng: np.random.Generator, n: int) -> float:
    """Worst middle-differential cancellation defect over box triples."""
    n1, n2 = rel1.n_source, rel1.n_target
    worst = 0.0
    for _ in range(n):
        z1 = rel1.base.ambient.sample_box(rng, 1)[0]
        x3 = np.array([rng.uniform(lo, hi) for lo, hi in rel2.target.box])
        z2 = np.concatenate([z1[n1:], x3])
        d1 = rel1.twist.differential(z1)[n1:] if rel1.twist is not None \
            else np.zeros(n2)
        d2 = rel2.twist.differential(z2)[:n2] if rel2.twist is not None \
            else np.zeros(n2)
        worst = max(worst, float(np.max(np.abs(d1 + d2))) if n2 else 0.0)
    return worst


def verify_composition(rel1: CanonicalRelation, rel2: CanonicalRelation,
                       candidate: CanonicalRelation, rng: np.random.Generator,
                       *, n_samples: int = 24, fiber_scale: float = 1.0,
                       tol: float = INCLUSION_TOL, star_tol: float = STAR_SOLVE_TOL,
                       n_starts: int = STAR_STARTS,
                       reconstruct_candidate_twist: bool = False,
                       twist_basis=None,
                       n_cancellation: int = 40) -> CompositionReport:
    """Check a candidate composed relation against the defining property.

    Both inclusions are sampled: candidate points must be realizable by
    an intermediate-point solve (reverse), and chained points must pass
    the candidate membership oracle (forward).  At every solved
    intermediate point the tangent matching system is analyzed for the
    excess dimension e and the submersion rank onto the candidate base.

    With ``reconstruct_candidate_twist`` the candidate twist is ignored
    and re-derived by integrating the tautological form along polylines
    in the candidate base, then fitted in the span of ``twist_basis``.
    """
    _require_chainable(rel1, rel2)
    if candidate.source.variables != rel1.source.variables \
            or candidate.target.variables != rel2.target.variables:
        raise DimensionMismatch("candidate endpoints do not match the chain")
    n1, n3 = rel1.n_source, rel2.n_target
    report = CompositionReport(verdict="clean", fiber_dim_e=-1)

    report.cancellation_max = _cancellation_scan(rel1, rel2, rng, n_cancellation)

    candidate_eff = candidate
    if reconstruct_candidate_twist:
        if twist_basis is None:
            raise DimensionMismatch("twist reconstruction needs a basis")
        fitted, _, fit_res = _reconstruct_candidate_twist(
            rel1, rel2, candidate, rng, twist_basis, n_starts, star_tol)
        twist = TwistFunction(candidate.base,
                              fitted.with_vars(candidate.base.ambient.variables))
        candidate_eff = CanonicalRelation(
            candidate.source, candidate.target, candidate.base, twist,
            graph_map=candidate.graph_map,
            twist_on_source=candidate.twist_on_source)
        report.candidate_source = "reconstructed"
        report.fit_residual = fit_res

    # reverse inclusion: candidate points must chain
    samples = sample_relation_points(candidate_eff, rng, n_samples, fiber_scale)
    e_values = []
    for z, s, pt in samples:
        sol = solve_star(rel1, rel2, pt.x, pt.xi, pt.y, pt.eta, rng,
                         n_starts=n_starts, tol=star_tol)
        if sol is None:
            report.reverse_misses += 1
            continue
        report.reverse_max_residual = max(report.reverse_max_residual, sol.residual)
        e_obs, match_rank, sub_rank = _tangent_analysis(rel1, rel2,
                                                        candidate_eff, sol)
        e_values.append(e_obs)
        report.tangent_condition_rank.append(match_rank)
        report.submersion_rank.append(sub_rank)
        report.star_points.append({
            "x1": sol.x1.tolist(), "xi1": sol.xi1.tolist(),
            "x2": sol.x2.tolist(), "eta2": sol.eta2.tolist(),
            "x3": sol.x3.tolist(), "eta3": sol.eta3.tolist(),
            "s": sol.s.tolist(), "t": sol.t.tolist(),
            "residual": sol.residual,
        })

    # forward inclusion: chained points must satisfy the candidate oracle
    fwd_samples = sample_relation_points(rel1, rng, n_samples, fiber_scale)
    for z1, s, pt1 in fwd_samples:
        report.forward_attempts += 1
        cont = solve_forward(rel2, pt1.y, pt1.eta, rng,
                             n_starts=n_starts, tol=star_tol)
        if cont is None:
            continue
        x3, t, eta3, _ = cont
        report.forward_successes += 1
        composed = RelationPoint(pt1.x, pt1.xi, x3, eta3)
        res = membership_residual(candidate_eff, composed)
        report.forward_max_residual = max(report.forward_max_residual, res)

    expected_sub = candidate_eff.base.dim
    if report.reverse_misses:
        report.reasons.append(
            f"{report.reverse_misses} candidate points could not be chained")
    if report.reverse_max_residual > tol:
        report.reasons.append(
            f"reverse residual {report.reverse_max_residual:.3e} above {tol:.1e}")
    if report.forward_successes == 0:
        report.reasons.append("no forward continuation succeeded")
    if report.forward_max_residual > tol:
        report.reasons.append(
            f"forward residual {report.forward_max_residual:.3e} above {tol:.1e}")
    if e_values:
        if len(set(e_values)) != 1:
            report.reasons.append(f"excess dimension varies: {sorted(set(e_values))}")
        else:
            report.fiber_dim_e = e_values[0]
        if report.fiber_dim_e < 0:
            report.reasons.append("tangent matching drops below the composed dimension")
        bad_sub = [r for r in report.submersion_rank if r != expected_sub]
        if bad_sub:
            report.reasons.append(
                f"submersion rank {bad_sub[0]} != dim of candidate base {expected_sub}")
    elif n_samples > 0:
        report.reasons.append("no intermediate point was ever solved")

    if report.reasons:
        report.verdict = "failed"
    elif report.fiber_dim_e == 0:
        report.verdict = "transverse"
    else:
        report.verdict = "clean"
    return report


def _reconstruct_candidate_twist(rel1, rel2, candidate, rng, basis,
                                 n_starts, star_tol):
    """Fit the candidate twist from the chained relation itself.

    Walks straight polylines in the candidate base from a basepoint,
    solving the intermediate system with warm starts to obtain a local
    section of the composed bundle, and integrates the tautological form
    along the way.
    """
    n1, n3 = rel1.n_source, rel2.n_target
    n2 = rel1.n_target
    k1, k2 = rel1.fiber_dim, rel2.fiber_dim
    warm = {"w": None}

    def section(z):
        x1, x3 = z[:n1], z[n1:]

        def residual(w):
            x2, s, t = w[:n2], w[n2:n2 + k1], w[n2 + k1:]
            z1 = np.concatenate([x1, x2])
            z2 = np.concatenate([x2, x3])
            cov1, _ = _conormal_cov(rel1, z1, s)
            cov2, _ = _conormal_cov(rel2, z2, t)
            return np.concatenate([
                rel1.base.residual(z1),
                rel2.base.residual(z2),
                cov1[n1:] + cov2[:n2],
            ])

        def jacobian(w):
            x2, s, t = w[:n2], w[n2:n2 + k1], w[n2 + k1:]
            z1 = np.concatenate([x1, x2])
            z2 = np.concatenate([x2, x3])
            jac1 = rel1.base.jacobian(z1)
            jac2 = rel2.base.jacobian(z2)
            a1 = _curvature_operator(rel1, z1, s)
            a2 = _curvature_operator(rel2, z2, t)
            out = np.zeros((k1 + k2 + n2, n2 + k1 + k2))
            out[:k1, :n2] = jac1[:, n1:]
            out[k1:k1 + k2, :n2] = jac2[:, :n2]
            out[k1 + k2:, :n2] = a1[n1:, n1:] + a2[:n2, :n2]
            if k1:
                out[k1 + k2:, n2:n2 + k1] = jac1[:, n1:].T
            if k2:
                out[k1 + k2:, n2 + k1:] = jac2[:, :n2].T
            return out

        if warm["w"] is None:
            w0 = np.concatenate([
                np.array([0.5 * (lo + hi) for lo, hi in rel1.target.box]),
                np.zeros(k1 + k2)])
        else:
            w0 = warm["w"]
        w, rn, ok = _gauss_newton_ls(residual, jacobian, w0, star_tol)
        if not ok:
            raise FiberSolveFailed(
                f"section solve stalled at residual {rn:.3e}")
        warm["w"] = w
        x2, s, t = w[:n2], w[n2:n2 + k1], w[n2 + k1:]
        cov1, _ = _conormal_cov(rel1, np.concatenate([x1, x2]), s)
        cov2, _ = _conormal_cov(rel2, np.concatenate([x2, x3]), t)
        return np.concatenate([cov1[:n1], cov2[n2:]])

    zs = candidate.base.sample_points(rng, max(12, 2 * len(basis) + 4))
    z0 = zs[0]
    targets = zs[1:]
    paths = [np.array([z0, zt]) for zt in targets]
    warm["w"] = None
    values = []
    for path in paths:
        warm["w"] = None
        values.append(reconstruct_twist(candidate.base, section, [path])[0])
    return _fit_values(candidate.base, z0, targets, np.array(values), basis)


def _fit_values(submanifold, z0, targets, values, basis):
    design = np.zeros((len(targets), len(basis)))
    for j, b in enumerate(basis):
        b0 = float(b(z0))
        for i, zt in enumerate(targets):
            design[i, j] = float(b(zt)) - b0
    coeffs, *_ = np.linalg.lstsq(design, values, rcond=None)
    fit_res = float(np.max(np.abs(design @ coeffs - values))) if len(values) else 0.0
    expr = None
    for c, b in zip(coeffs, basis):
        term = float(c) * b
        expr = term if expr is None else expr + term
    return expr, coeffs, fit_res


def fit_twist(submanifold: ConstraintSubmanifold, section, z0, targets,
              basis, **kwargs):
    """Reconstruct twist values from z0 to each target and fit the basis.

    Returns (expr, coeffs, max_fit_residual); the fitted expression
    reproduces f - f(z0) in the span of the basis.
    """
    paths = [np.array([np.asarray(z0, float), np.asarray(zt, float)])
             for zt in targets]
    values = np.array(reconstruct_twist(submanifold, section, paths, **kwargs))
    return _fit_values(submanifold, z0, targets, values, basis)


# ---------------------------------------------------------------------------
# twist reconstruction from the tautological form


def conormal_section(submanifold: ConstraintSubmanifold,
                     twist: Optional[TwistFunction], s_fixed=None):
    """A section of the twisted conormal bundle and its vertical frame.

    Any fixed fiber coordinate gives a valid section for reconstruction:
    the fiber directions annihilate the base tangent spaces, so the line
    integrals cannot see the choice.
    """
    k = submanifold.codim

    def section(z):
        s = np.zeros(k) if s_fixed is None else np.asarray(s_fixed, dtype=float)
        xi = submanifold.jacobian(z).T @ s if k else np.zeros(submanifold.ambient.dim)
        if twist is not None:
            xi = xi + twist.differential(z)
        return xi

    def vertical_frame(z):
        return submanifold.jacobian(z).T

    return section, vertical_frame


def reconstruct_twist(submanifold: ConstraintSubmanifold, section, paths, *,
                      vertical_frame=None,
                      horizontality_tol: float = HORIZONTALITY_TOL,
                      n_checks: int = 8, fd_step: float = 1e-3,
                      quad_tol: float = 1e-11) -> list:
    """Integrate the pulled-back tautological form along polylines.

    Each path is a sequence of vertices near the submanifold; every
    evaluation point is re-projected onto it by Newton, so mildly curved
    bases work without special treatment.  The returned value for a path
    from z0 to z is f(z) - f(z0) when the section parametrizes a twisted
    conormal bundle.

    When ``vertical_frame`` is given it is contracted against base
    tangent directions at sampled points; a contraction above
    ``horizontality_tol`` raises NotHorizontal, because then the form is
    not basic and no twist exists.
    """
    results = []
    for path in paths:
        path = np.asarray(path, dtype=float)
        if path.ndim != 2 or path.shape[1] != submanifold.ambient.dim:
            raise DimensionMismatch("path vertices must match the ambient dim")
        if vertical_frame is not None:
            idx = np.linspace(0, len(path) - 1, min(n_checks, len(path)))
            for i in idx:
                z = submanifold.project(path[int(round(i))])
                vert = np.atleast_2d(vertical_frame(z))
                tangent = submanifold.tangent_space(z)
                if vert.size and tangent.size:
                    contraction = float(np.max(np.abs(vert.T @ tangent)))
                    if contraction > horizontality_tol:
                        raise NotHorizontal(
                            f"vertical contraction {contraction:.3e} exceeds "
                            f"{horizontality_tol:.1e}")
        total = 0.0
        for p, q in zip(path[:-1], path[1:]):
            seg = q - p
            if float(np.max(np.abs(seg))) == 0.0:
                continue

            def z_of(t):
                return submanifold.project(p + t * seg)

            def integrand(t):
                z = z_of(t)
                h = fd_step
                zm2, zm1 = z_of(t - 2 * h), z_of(t - h)
                zp1, zp2 = z_of(t + h), z_of(t + 2 * h)
                vel = (zm2 - 8 * zm1 + 8 * zp1 - zp2) / (12 * h)
                return float(np.dot(section(z), vel))

            value, _ = quad(integrand, 0.0, 1.0,
                            epsabs=quad_tol, epsrel=quad_tol, limit=200)
            total += value
        results.append(total)
    return results
