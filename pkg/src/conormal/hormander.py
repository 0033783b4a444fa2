"""Generating-function descriptions of twisted conormal bundles.

A description is a trivial fiber bundle W = X x R^k with a phase
phi(x, s); its fiber-critical set C_phi = {d_s phi = 0} maps into T*X by
(x, s) |-> (x, d_x phi).  For a constraint submanifold Z = {u = 0} with
twist f the canonical choice is

    phi(x, s) = sum_i s_i u_i(x) + f(x),

whose critical set is Z x R^k and whose image is exactly the twisted
conormal bundle.  Hand-written phases are accepted too; they drive the
negative controls and the quadratic model phases of the symbol tests.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, NotCritical, RankDeficient
from .expr import ScalarExpr
from .geometry import (ConstraintSubmanifold, CotangentPoint, EuclideanPatch,
                       TwistFunction, conormal_point, matrix_rank_tol,
                       newton_project)
from .errors import NewtonFailed

CRITICAL_TOL = 1e-8
SIGNATURE_EIG_TOL = 1e-9


@dataclass(frozen=True)
class HormanderDescription:
    """Phase function phi on base_patch x R^fiber_dim.

    ``phi`` is bound to base variables followed by fiber variables.  When
    the description was built from a (Z, f) pair, ``source`` keeps it; a
    hand-supplied phase has source None and no structural guarantees.
    """

    base_patch: EuclideanPatch
    fiber_dim: int
    phi: ScalarExpr
    fiber_variables: tuple
    source: Optional[tuple] = None

    def __post_init__(self):
        n = self.base_patch.dim
        expected = self.base_patch.variables + self.fiber_variables
        if self.phi.variables != expected:
            raise DimensionMismatch(
                f"phase bound to {self.phi.variables}, expected {expected}")
        if len(self.fiber_variables) != self.fiber_dim:
            raise DimensionMismatch("fiber variable count != fiber_dim")

    @property
    def base_dim(self) -> int:
        return self.base_patch.dim

    @property
    def total_dim(self) -> int:
        return self.base_dim + self.fiber_dim

    def point(self, x, s) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        s = np.atleast_1d(np.asarray(s, dtype=float)) if self.fiber_dim \
            else np.zeros(0)
        if x.shape != (self.base_dim,) or s.shape != (self.fiber_dim,):
            raise DimensionMismatch(
                f"expected ({self.base_dim},) + ({self.fiber_dim},), got "
                f"{x.shape} + {s.shape}")
        return np.concatenate([x, s])


def _default_fiber_names(k: int, taken) -> tuple:
    names = []
    i = 1
    while len(names) < k:
        cand = f"s{i}"
        if cand not in taken:
            names.append(cand)
        i += 1
    return tuple(names)


def build_description(submanifold: ConstraintSubmanifold,
                      twist: Optional[TwistFunction] = None,
                      fiber_names=None) -> HormanderDescription:
    """Canonical description phi = sum s_i u_i + f for a twisted bundle.

    The constraints must be independent; the rank is spot-checked at a
    projected box-center point when projection succeeds.
    """
    if twist is not None and twist.base is not submanifold \
            and twist.base != submanifold:
        raise DimensionMismatch("twist is bound to a different base")
    patch = submanifold.ambient
    k = submanifold.codim
    if fiber_names is None:
        fiber_names = _default_fiber_names(k, set(patch.variables))
    fiber_names = tuple(fiber_names)
    if len(fiber_names) != k:
        raise DimensionMismatch(f"need {k} fiber names, got {len(fiber_names)}")
    if set(fiber_names) & set(patch.variables):
        raise DimensionMismatch("fiber names collide with base variables")

    if k:
        center = np.array([0.5 * (lo + hi) for lo, hi in patch.box])
        try:
            on_z = submanifold.project(center)
        except NewtonFailed:
            on_z = None
        if on_z is not None:
            rank = matrix_rank_tol(submanifold.jacobian(on_z))
            if rank < k:
                raise RankDeficient(
                    f"constraint jacobian rank {rank} < {k} on the base")

    allvars = patch.variables + fiber_names
    phi = None
    if k:
        for name, comp in zip(fiber_names, submanifold.constraints.components):
            term = ScalarExpr.parse(name, allvars) * comp.with_vars(allvars)
            phi = term if phi is None else phi + term
    if twist is not None:
        ext = twist.extension.with_vars(allvars)
        phi = ext if phi is None else phi + ext
    if phi is None:
        phi = ScalarExpr.constant(0.0, allvars)
    return HormanderDescription(patch, k, phi, fiber_names,
                                source=(submanifold, twist))


def from_phase(base_patch: EuclideanPatch, phi, fiber_names) -> HormanderDescription:
    """Wrap a hand-supplied phase; no structure is assumed or checked."""
    fiber_names = tuple(fiber_names)
    allvars = base_patch.variables + fiber_names
    if not isinstance(phi, ScalarExpr):
        phi = ScalarExpr.parse(phi, allvars)
    elif phi.variables != allvars:
        phi = phi.with_vars(allvars)
    return HormanderDescription(base_patch, len(fiber_names), phi,
                                fiber_names, source=None)


def vert_residual(desc: HormanderDescription, x, s) -> float:
    """Max |d phi / d s_i|; zero exactly on the fiber-critical set."""
    if desc.fiber_dim == 0:
        return 0.0
    w = desc.point(x, s)
    grad = desc.phi.gradient(w)
    return float(np.max(np.abs(grad[desc.base_dim:])))


def base_differential(desc: HormanderDescription, x, s) -> np.ndarray:
    """d phi / d x at (x, s), without any criticality requirement."""
    w = desc.point(x, s)
    return desc.phi.gradient(w)[:desc.base_dim]


def lambda_embedding(desc: HormanderDescription, x, s,
                     tol: float = CRITICAL_TOL) -> CotangentPoint:
    """Image (x, d_x phi) of a fiber-critical point in the cotangent space.

    For built descriptions this agrees with the direct conormal-point
    formula; off-critical inputs raise NotCritical.
    """
    res = vert_residual(desc, x, s)
    if res > tol:
        raise NotCritical(
            f"vertical residual {res:.3e} exceeds {tol:.1e}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return CotangentPoint(x, base_differential(desc, x, s))


@dataclass(frozen=True)
class TransversalityReport:
    ranks: tuple
    fiber_dim: int

    @property
    def ok(self) -> bool:
        return all(r == self.fiber_dim for r in self.ranks)


def transversality_check(desc: HormanderDescription, samples) -> TransversalityReport:
    """Rank of d(d_s phi) in all (x, s) variables at each sample.

    Full rank k means the defining equations of the critical set are
    functionally independent there and C_phi is a manifold of dimension
    n near the sample.
    """
    ranks = []
    for w in samples:
        w = np.asarray(w, dtype=float)
        if desc.fiber_dim == 0:
            ranks.append(0)
            continue
        hess = desc.phi.hessian(w)
        rows = hess[desc.base_dim:, :]
        ranks.append(matrix_rank_tol(rows))
    return TransversalityReport(tuple(ranks), desc.fiber_dim)


def fiber_hessian_signature(desc: HormanderDescription, x, s,
                            tol: float = CRITICAL_TOL) -> int:
    """Signature (n+ minus n-) of the s-block of the phase Hessian.

    Eigenvalues are scaled by the block's max norm before the 1e-9 zero
    threshold, so a clean degenerate block contributes the signature of
    its nondegenerate part.  Vanishes identically for built
    descriptions, where phi is affine in s.
    """
    res = vert_residual(desc, x, s)
    if res > tol:
        raise NotCritical(
            f"vertical residual {res:.3e} exceeds {tol:.1e}")
    if desc.fiber_dim == 0:
        return 0
    w = desc.point(x, s)
    block = desc.phi.hessian(w)[desc.base_dim:, desc.base_dim:]
    scale = float(np.max(np.abs(block)))
    if scale == 0.0:
        return 0
    eig = np.linalg.eigvalsh(block) / scale
    return int(np.sum(eig > SIGNATURE_EIG_TOL)
               - np.sum(eig < -SIGNATURE_EIG_TOL))


def maslov_section(desc: HormanderDescription, x, s,
                   tol: float = CRITICAL_TOL) -> complex:
    """exp(i pi sgn / 4) for the fiber Hessian signature at (x, s)."""
    sig = fiber_hessian_signature(desc, x, s, tol)
    return complex(np.exp(1j * np.pi * sig / 4.0))


@dataclass(frozen=True)
class CriticalPointRecord:
    """Row of a description dump: one evaluated bundle point."""

    x: np.ndarray
    s: np.ndarray
    vert_residual: float
    lambda_image: CotangentPoint
    fiber_signature: int
    maslov_value: complex


def describe_point(desc: HormanderDescription, x, s) -> CriticalPointRecord:
    """Evaluate every per-point quantity without the criticality gate.

    The vertical residual is part of the record, so consumers can judge
    how far off the critical set the point sits; the signature of an
    off-critical point is still the signature of the s-block there.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    s = np.atleast_1d(np.asarray(s, dtype=float)) if desc.fiber_dim \
        else np.zeros(0)
    res = vert_residual(desc, x, s)
    image = CotangentPoint(x, base_differential(desc, x, s))
    w = desc.point(x, s)
    if desc.fiber_dim:
        block = desc.phi.hessian(w)[desc.base_dim:, desc.base_dim:]
        scale = float(np.max(np.abs(block)))
        if scale == 0.0:
            sig = 0
        else:
            eig = np.linalg.eigvalsh(block) / scale
            sig = int(np.sum(eig > SIGNATURE_EIG_TOL)
                      - np.sum(eig < -SIGNATURE_EIG_TOL))
    else:
        sig = 0
    return CriticalPointRecord(x, s, res, image, sig,
                               complex(np.exp(1j * np.pi * sig / 4.0)))


def sample_critical(desc: HormanderDescription, rng: np.random.Generator,
                    n: int, s_scale: float = 1.0):
    """Points of the fiber-critical set, as (x, s) pairs.

    Built descriptions sample the base submanifold directly and attach
    free fiber values.  Hand-supplied phases are solved by Newton on
    d_s phi = 0 over the bundle box; seeds that fail to converge are
    discarded and resampled.
    """
    if desc.source is not None:
        submanifold = desc.source[0]
        xs = submanifold.sample_points(rng, n)
        out = []
        for x in xs:
            s = s_scale * (2.0 * rng.random(desc.fiber_dim) - 1.0)
            out.append((x, s))
        return out
    if desc.fiber_dim == 0:
        xs = desc.base_patch.sample_box(rng, n)
        return [(x, np.zeros(0)) for x in xs]

    nb = desc.base_dim

    def residual(w):
        return desc.phi.gradient(w)[nb:]

    def jacobian(w):
        return desc.phi.hessian(w)[nb:, :]

    out = []
    attempts = 0
    while len(out) < n and attempts < 30 * n + 60:
        attempts += 1
        x0 = desc.base_patch.sample_box(rng, 1)[0]
        s0 = s_scale * (2.0 * rng.random(desc.fiber_dim) - 1.0)
        try:
            w = newton_project(residual, jacobian, np.concatenate([x0, s0]))
        except NewtonFailed:
            continue
        out.append((w[:nb], w[nb:]))
    if len(out) < n:
        raise NewtonFailed(
            f"found only {len(out)} of {n} critical points")
    return out
