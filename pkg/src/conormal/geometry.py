"""Patches, constraint submanifolds, twists, and points of the cotangent bundle.

A patch is an open box in R^n with named coordinates.  Submanifolds are
given either by k independent scalar constraints or as the graph of a
map between patches; graphs convert to constraint form on the product
patch.  All tangent and conormal data is computed pointwise from exact
Jacobians, with numerical rank decided by a relative singular value
threshold.

On-manifold sampling runs a damped Newton iteration on the constraint
residual from uniform seeds in the ambient box, taking minimum-norm
(pseudo-inverse) steps.  A seed either converges to residual below
1e-12 within 50 iterations or is discarded; this keeps every accepted
sample certified by its residual rather than by hope.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, NewtonFailed, RankDeficient
from .expr import ScalarExpr, VectorExpr

MEMBERSHIP_TOL = 1e-9
NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 50
RANK_RTOL = 1e-8


def matrix_rank_tol(a: np.ndarray, rtol: float = RANK_RTOL) -> int:
    """Rank with the package-wide relative singular value threshold."""
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def null_space(a: np.ndarray, rtol: float = RANK_RTOL) -> np.ndarray:
    """Orthonormal basis (columns) of the null space of ``a``."""
    if a.shape[0] == 0:
        return np.eye(a.shape[1])
    u, s, vh = np.linalg.svd(a)
    if s.size and s[0] > 0.0:
        rank = int(np.sum(s > rtol * s[0]))
    else:
        rank = 0
    return vh[rank:].T


@dataclass(frozen=True)
class EuclideanPatch:
    """An open coordinate box with named axes."""

    variables: tuple
    box: tuple = None

    def __post_init__(self):
        variables = tuple(self.variables)
        object.__setattr__(self, "variables", variables)
        if self.box is None:
            box = tuple((-1.0, 1.0) for _ in variables)
        else:
            box = tuple((float(lo), float(hi)) for lo, hi in self.box)
        if len(box) != len(variables):
            raise DimensionMismatch("box length differs from variable count")
        for lo, hi in box:
            if not lo < hi:
                raise DimensionMismatch(f"empty box interval ({lo}, {hi})")
        object.__setattr__(self, "box", box)

    @property
    def dim(self) -> int:
        return len(self.variables)

    def product(self, other: "EuclideanPatch") -> "EuclideanPatch":
        overlap = set(self.variables) & set(other.variables)
        if overlap:
            raise DimensionMismatch(
                f"product patches share coordinate names {sorted(overlap)}")
        return EuclideanPatch(self.variables + other.variables,
                              self.box + other.box)

    def sample_box(self, rng: np.random.Generator, n: int) -> np.ndarray:
        lo = np.array([b[0] for b in self.box])
        hi = np.array([b[1] for b in self.box])
        return lo + (hi - lo) * rng.random((n, self.dim))

    def clip(self, x: np.ndarray) -> np.ndarray:
        lo = np.array([b[0] for b in self.box])
        hi = np.array([b[1] for b in self.box])
        return np.clip(x, lo, hi)


def newton_project(residual_fn, jacobian_fn, x0, tol: float = NEWTON_TOL,
                   max_iter: int = NEWTON_MAX_ITER) -> np.ndarray:
    """Damped Newton with pseudo-inverse steps for an underdetermined system.

    Accepts only when the max-norm residual drops below ``tol``.
    """
    x = np.asarray(x0, dtype=float).copy()
    r = np.atleast_1d(residual_fn(x))
    rn = float(np.max(np.abs(r))) if r.size else 0.0
    for _ in range(max_iter):
        if rn <= tol:
            return x
        jac = np.atleast_2d(jacobian_fn(x))
        step, *_ = np.linalg.lstsq(jac, -r, rcond=None)
        t = 1.0
        while t > 1e-4:
            xn = x + t * step
            r2 = np.atleast_1d(residual_fn(xn))
            rn2 = float(np.max(np.abs(r2)))
            if rn2 < rn or rn2 <= tol:
                x, r, rn = xn, r2, rn2
                break
            t *= 0.5
        else:
            raise NewtonFailed(f"line search stalled at residual {rn:.3e}")
    if rn <= tol:
        return x
    raise NewtonFailed(f"no convergence: residual {rn:.3e} after {max_iter} steps")


@dataclass(frozen=True)
class ConstraintSubmanifold:
    """Zero set of k scalar constraints with everywhere-rank-k Jacobian.

    k = 0 is allowed and denotes the whole patch.
    """

    ambient: EuclideanPatch
    constraints: Optional[VectorExpr]
    simply_connected: bool = True

    def __post_init__(self):
        if self.constraints is not None:
            if self.constraints.variables != self.ambient.variables:
                raise DimensionMismatch(
                    "constraints are not bound to the ambient coordinates")

    @property
    def codim(self) -> int:
        return 0 if self.constraints is None else self.constraints.dim

    @property
    def dim(self) -> int:
        return self.ambient.dim - self.codim

    def residual(self, x) -> np.ndarray:
        if self.constraints is None:
            return np.zeros(0)
        return np.asarray(self.constraints(x), dtype=float)

    def jacobian(self, x) -> np.ndarray:
        if self.constraints is None:
            return np.zeros((0, self.ambient.dim))
        return self.constraints.jacobian(x)

    def contains(self, x, tol: float = MEMBERSHIP_TOL) -> bool:
        r = self.residual(x)
        return bool(r.size == 0 or np.max(np.abs(r)) <= tol)

    def tangent_space(self, x) -> np.ndarray:
        """Orthonormal basis (columns) of the tangent space at x.

        Raises RankDeficient if the constraint Jacobian does not have
        full rank k at x, since the zero set is not certified to be a
        manifold there.
        """
        jac = self.jacobian(x)
        if self.codim:
            if matrix_rank_tol(jac) < self.codim:
                raise RankDeficient(
                    f"constraint Jacobian rank below {self.codim} at {np.asarray(x)}")
        return null_space(jac)

    def normal_frame(self, x) -> np.ndarray:
        """Constraint differentials du_1..du_k as columns (m x k)."""
        return self.jacobian(x).T

    def project(self, x0) -> np.ndarray:
        if self.constraints is None:
            return np.asarray(x0, dtype=float).copy()
        return newton_project(self.residual, self.jacobian, x0)

    def sample_points(self, rng: np.random.Generator, n: int,
                      max_attempts: int = None) -> np.ndarray:
        """Draw n points on the submanifold via Newton from box seeds."""
        if max_attempts is None:
            max_attempts = 20 * n + 50
        out = []
        attempts = 0
        while len(out) < n and attempts < max_attempts:
            seeds = self.ambient.sample_box(rng, n - len(out))
            for seed in seeds:
                attempts += 1
                try:
                    out.append(self.project(seed))
                except NewtonFailed:
                    continue
        if len(out) < n:
            raise NewtonFailed(
                f"only {len(out)} of {n} samples converged on the submanifold")
        return np.array(out)


@dataclass(frozen=True)
class GraphSubmanifold:
    """Graph of a smooth map g: domain -> codomain inside the product patch."""

    domain: EuclideanPatch
    codomain: EuclideanPatch
    mapping: VectorExpr

    def __post_init__(self):
        if self.mapping.variables != self.domain.variables:
            raise DimensionMismatch("mapping must be bound to domain coordinates")
        if self.mapping.dim != self.codomain.dim:
            raise DimensionMismatch("mapping dimension differs from codomain")

    def as_constraints(self) -> ConstraintSubmanifold:
        """Constraint form y_j - g_j(x) = 0 on the product patch."""
        product = self.domain.product(self.codomain)
        names = product.variables
        comps = []
        for j, gj in enumerate(self.mapping.components):
            yj = ScalarExpr.parse(self.codomain.variables[j], names)
            comps.append(yj - gj.with_vars(names))
        return ConstraintSubmanifold(product, VectorExpr.from_exprs(comps))

    def value(self, x) -> np.ndarray:
        return self.mapping(x)

    def point(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.concatenate([x, self.mapping(x)])


@dataclass(frozen=True)
class TwistFunction:
    """A smooth function on a submanifold, carried by an ambient extension.

    Only the value and differential along the submanifold are meaningful;
    everything downstream is checked to be independent of the extension.
    """

    base: ConstraintSubmanifold
    extension: ScalarExpr

    def __post_init__(self):
        if self.extension.variables != self.base.ambient.variables:
            raise DimensionMismatch(
                "twist extension is not bound to the ambient coordinates")

    def value(self, x) -> float:
        return float(self.extension(x))

    def differential(self, x) -> np.ndarray:
        return self.extension.gradient(x)


@dataclass(frozen=True)
class CotangentPoint:
    """A point (x, xi) of T*R^m in ambient coordinates."""

    x: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float))
        if self.x.shape != self.xi.shape:
            raise DimensionMismatch("base point and covector have different shapes")

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.x, self.xi])


def conormal_point(submanifold: ConstraintSubmanifold,
                   twist: Optional[TwistFunction],
                   x, s) -> CotangentPoint:
    """Point of the twisted conormal bundle over x with fiber coordinates s.

    The covector is sum_i s_i du_i(x) + df(x); with no twist the df term
    is dropped.  The fiber coordinates are the coefficients against the
    constraint differentials, so len(s) must equal the codimension.
    """
    x = np.asarray(x, dtype=float)
    s = np.atleast_1d(np.asarray(s, dtype=float))
    if s.shape[0] != submanifold.codim:
        raise DimensionMismatch(
            f"expected {submanifold.codim} fiber coordinates, got {s.shape[0]}")
    xi = np.zeros(submanifold.ambient.dim)
    if submanifold.codim:
        xi = submanifold.jacobian(x).T @ s
    if twist is not None:
        xi = xi + twist.differential(x)
    return CotangentPoint(x, xi)
