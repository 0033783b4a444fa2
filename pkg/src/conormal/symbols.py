"""Half-densities on parametrized Lagrangians and leading symbols.

A half-density here is a coefficient attached to a concrete tangent
frame of the Lagrangian at each parametrization point; evaluating it on
another basis multiplies the coefficient by |det A|^(1/2) for the basis
change A.  Symbols are half-densities produced from amplitudes at
hbar = 0, reported as coefficients against the reference half-density
the description itself induces (the pushforward of Lebesgue measure on
the bundle through the fiber-critical reduction).  With that choice the
composition law for symbols is plain multiplication, and the composed
value can be compared against a stationary-phase readout of the
discretized kernels without dangling normalization constants.

Compositions are supported in the transverse, zero-excess case only.
The transfer of a product half-density through a fiber product follows
the enhanced-category recipe: lift a basis of the composed tangent
space, complete it with vectors whose middle differences span the
middle cotangent space, and divide by the Liouville volume of those
differences.
"""

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional

import numpy as np

from .errors import (DegenerateChoice, DimensionMismatch, FiberSolveFailed,
                     FitFailed, NotTransverse)
from .geometry import null_space
from .hormander import HormanderDescription, maslov_section, vert_residual
from .quantize import Amplitude, DiscretizedFIO
from .relations import (CanonicalRelation, RelationPoint, StarSolution,
                        _tangent_analysis, relation_frame, relation_point,
                        solve_star)

LIFT_TOL = 1e-8
DET_FLOOR = 1e-10
CHOICE_TRIES = 24


# ---------------------------------------------------------------------------
# half-densities


@dataclass(frozen=True)
class HalfDensity:
    """Coefficient against a moving tangent frame of a Lagrangian patch.

    ``frame_fn(p)`` returns the frame columns at parametrization point p
    (rows are ambient phase-space coordinates), ``coeff_fn(p)`` the
    coefficient of the half-density against exactly that frame.
    """

    frame_fn: Callable
    coeff_fn: Callable

    def value_on(self, p, basis) -> complex:
        """Value against an arbitrary basis of the same tangent space."""
        frame = np.asarray(self.frame_fn(p), dtype=float)
        basis = np.asarray(basis, dtype=float)
        if basis.shape != frame.shape:
            raise DimensionMismatch(
                f"basis {basis.shape} does not match frame {frame.shape}")
        change, residual, *_ = np.linalg.lstsq(frame, basis, rcond=None)
        gap = float(np.max(np.abs(frame @ change - basis)))
        scale = max(1.0, float(np.max(np.abs(basis))))
        if gap > LIFT_TOL * scale:
            raise DimensionMismatch(
                f"basis leaves the tangent space (defect {gap:.3e})")
        det = np.linalg.det(change)
        return self.coeff_fn(p) * float(np.sqrt(abs(det)))

    def scaled(self, factor) -> "HalfDensity":
        return HalfDensity(self.frame_fn, lambda p: factor * self.coeff_fn(p))


def _relation_rows_to_lambda(frame: np.ndarray, n1: int, n2: int) -> np.ndarray:
    """Rewrite a relation-convention frame (rows x, xi, y, eta) in the
    coordinates of the un-flipped conormal bundle (rows x, y, zeta_x,
    zeta_y).  The map has |det| = 1, so half-density values agree."""
    return np.vstack([frame[:n1], frame[2 * n1:2 * n1 + n2],
                      -frame[n1:2 * n1], frame[2 * n1 + n2:]])


def relation_half_density(rel: CanonicalRelation, coeff_fn=None) -> HalfDensity:
    """Half-density on a relation against its relation_frame convention.

    The default coefficient 1 is the canonical graph half-density when
    the relation is a graph.  Parametrization points are (z, s) pairs.
    """
    if coeff_fn is None:
        def coeff_fn(p):
            return 1.0

    def frame_fn(p):
        z, s = p
        return relation_frame(rel, z, s)

    return HalfDensity(frame_fn, coeff_fn)


# ---------------------------------------------------------------------------
# transverse fiber-product transfer


def graph_half_density(rel: CanonicalRelation) -> HalfDensity:
    """Canonical half-density on a graph-type relation.

    The pullback of the Liouville half-density |dx dxi|^(1/2) of the
    source cotangent space through the source projection, expressed
    against the relation frame.  Identity relations carrying this
    density act as units under composition.
    """
    n1 = rel.n_source

    def frame_fn(p):
        z, s = p
        return relation_frame(rel, z, s)

    def coeff_fn(p):
        frame = frame_fn(p)
        block = frame[:2 * n1, :]
        if block.shape[0] != block.shape[1]:
            raise DimensionMismatch(
                "source projection is not square; relation is not a graph")
        det = np.linalg.det(block)
        if abs(det) < DET_FLOOR:
            raise DegenerateChoice("source projection is singular here")
        return float(np.sqrt(abs(det)))

    return HalfDensity(frame_fn, coeff_fn)


def _fiber_product_factor(f1, f2, mid1_rows, mid2_rows, outer1_rows,
                          outer2_rows, target, rng,
                          tries: int = CHOICE_TRIES) -> float:
    """|det S|^(1/2) / |det Delta|^(1/2) for a zero-excess fiber product.

    f1, f2 are tangent frames of the factors; the mid rows are the
    coordinates being matched (a copy of T(T*X_mid) on each side), the
    outer rows together are the coordinates of the composed space.
    ``target`` is the basis of the composed tangent space the value is
    taken on.  Raises NotTransverse when the matching is not zero-excess
    or the target is not realized; DegenerateChoice when no random
    completion produced usable determinants.
    """
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    d1, d2 = f1.shape[1], f2.shape[1]
    mid1 = f1[mid1_rows, :]
    mid2 = f2[mid2_rows, :]
    n_mid2 = mid1.shape[0]
    match = np.hstack([mid1, -mid2])
    null = null_space(match)
    q = null.shape[1]
    target = np.asarray(target, dtype=float)
    if q != target.shape[1]:
        raise NotTransverse(
            f"fiber product has tangent dimension {q}, composed space "
            f"needs {target.shape[1]} (excess {q - target.shape[1]})")

    outer = np.vstack([
        f1[outer1_rows, :] @ null[:d1, :],
        f2[outer2_rows, :] @ null[d1:, :],
    ])
    coeffs, *_ = np.linalg.lstsq(outer, target, rcond=None)
    gap = float(np.max(np.abs(outer @ coeffs - target)))
    scale = max(1.0, float(np.max(np.abs(target))))
    if gap > LIFT_TOL * scale:
        raise NotTransverse(
            f"composed basis is not realized by the fiber product "
            f"(defect {gap:.3e})")
    lift = null @ coeffs

    for _ in range(tries):
        draws = rng.standard_normal((d1 + d2, n_mid2))
        delta = mid2 @ draws[d1:, :] - mid1 @ draws[:d1, :]
        det_delta = np.linalg.det(delta)
        square = np.hstack([lift, draws])
        det_s = np.linalg.det(square)
        if abs(det_delta) > DET_FLOOR and abs(det_s) > DET_FLOOR:
            return float(np.sqrt(abs(det_s) / abs(det_delta)))
    raise DegenerateChoice(
        f"no completion with usable determinants in {tries} draws")


@dataclass(frozen=True)
class ComposedPoint:
    """A transverse composed point with its resolved intermediate data."""

    rel1: CanonicalRelation
    rel2: CanonicalRelation
    candidate: CanonicalRelation
    z_c: np.ndarray
    s_c: np.ndarray
    star: StarSolution
    point: RelationPoint


def composed_point(rel1: CanonicalRelation, rel2: CanonicalRelation,
                   candidate: CanonicalRelation, z_c, s_c,
                   rng: np.random.Generator) -> ComposedPoint:
    """Resolve a candidate parametrization point through the chain.

    Solves the intermediate system for the candidate relation point and
    checks the transverse zero-excess condition there.
    """
    z_c = np.asarray(z_c, dtype=float)
    s_c = np.atleast_1d(np.asarray(s_c, dtype=float)) if candidate.fiber_dim \
        else np.zeros(0)
    pt = relation_point(candidate, z_c, s_c)
    sol = solve_star(rel1, rel2, pt.x, pt.xi, pt.y, pt.eta, rng)
    if sol is None:
        raise FiberSolveFailed(
            "candidate point could not be chained through the relations")
    e_obs, _, _ = _tangent_analysis(rel1, rel2, candidate, sol)
    if e_obs != 0:
        raise NotTransverse(f"composition has excess {e_obs} at the point")
    return ComposedPoint(rel1, rel2, candidate, z_c, s_c, sol, pt)


def compose_half_densities(rho1: HalfDensity, rho2: HalfDensity,
                           cpt: ComposedPoint,
                           rng: np.random.Generator) -> complex:
    """Value of the composed half-density at a transverse composed point.

    Both inputs must be half-densities in the relation convention (their
    frames ordered like relation_frame rows).  The value is taken
    against the candidate's relation frame at (z_c, s_c), so it is
    directly a coefficient in the candidate's own parametrization.
    """
    rel1, rel2 = cpt.rel1, cpt.rel2
    n1, n2, n3 = rel1.n_source, rel1.n_target, rel2.n_target
    sol = cpt.star
    z1 = np.concatenate([sol.x1, sol.x2])
    z2 = np.concatenate([sol.x2, sol.x3])
    p1 = (z1, sol.s)
    p2 = (z2, sol.t)
    f1 = rho1.frame_fn(p1)
    f2 = rho2.frame_fn(p2)
    target = relation_frame(cpt.candidate, cpt.z_c, cpt.s_c)
    mid1_rows = list(range(2 * n1, 2 * n1 + 2 * n2))
    mid2_rows = list(range(0, 2 * n2))
    outer1_rows = list(range(0, 2 * n1))
    outer2_rows = list(range(2 * n2, 2 * n2 + 2 * n3))
    factor = _fiber_product_factor(f1, f2, mid1_rows, mid2_rows,
                                   outer1_rows, outer2_rows, target, rng)
    return rho1.coeff_fn(p1) * rho2.coeff_fn(p2) * factor


# ---------------------------------------------------------------------------
# induced references and symbols


def lambda_tangent_frame(desc: HormanderDescription, z, s) -> np.ndarray:
    """Tangent frame of the embedded Lagrangian at a critical point.

    Columns are images under the embedding differential of a basis of
    the critical set's tangent space; rows are (x, xi) coordinates of
    T(T*X).  Works for any description, built or hand-supplied.
    """
    w = desc.point(z, s)
    n, k = desc.base_dim, desc.fiber_dim
    hess = desc.phi.hessian(w)
    if k:
        crit_tangent = null_space(hess[n:, :])
    else:
        crit_tangent = np.eye(n)
    if crit_tangent.shape[1] != n:
        raise NotTransverse(
            f"critical set has tangent dimension {crit_tangent.shape[1]}, "
            f"expected {n}")
    top = crit_tangent[:n, :]
    bottom = hess[:n, :] @ crit_tangent
    return np.vstack([top, bottom])


def induced_reference(desc: HormanderDescription, z, s,
                      rng: np.random.Generator,
                      frame: Optional[np.ndarray] = None) -> float:
    """Reference half-density value induced by the description.

    Pushes the Lebesgue half-density of the bundle through the
    fiber-critical reduction: the phase-graph Lagrangian in T*W is
    composed with the fibration's canonical relation T*W -> T*X, both
    carrying coordinate coefficients 1.  The value is taken against
    ``frame`` (default: lambda_tangent_frame at the point).
    """
    w = desc.point(z, s)
    n, k = desc.base_dim, desc.fiber_dim
    m = n + k
    hess = desc.phi.hessian(w)

    # graph of d(phi): rows (w, zeta) of T(T*W), parametrized by w
    f1 = np.vstack([np.eye(m), hess])
    # fibration relation T*W -> T*X: rows (w, zeta_W, x, xi), parameters
    # (x, s, xi); the covector on W is (xi, 0)
    f2 = np.zeros((2 * m + 2 * n, m + n))
    f2[:n, :n] = np.eye(n)
    f2[n:m, n:m] = np.eye(k)
    f2[m:m + n, m:] = np.eye(n)
    f2[2 * m:2 * m + n, :n] = np.eye(n)
    f2[2 * m + n:, m:] = np.eye(n)

    if frame is None:
        frame = lambda_tangent_frame(desc, z, s)
    mid1_rows = list(range(2 * m))
    mid2_rows = list(range(2 * m))
    outer1_rows = []
    outer2_rows = list(range(2 * m, 2 * m + 2 * n))
    return _fiber_product_factor(f1, f2, mid1_rows, mid2_rows,
                                 outer1_rows, outer2_rows, frame, rng)


@dataclass(frozen=True)
class SymbolSection:
    """Leading symbol: a Maslov factor and a half-density on the patch.

    ``coefficient_fn`` reports the density relative to the induced
    reference of the underlying description; for amplitude-built symbols
    it is exactly the amplitude at hbar = 0.
    """

    maslov_fn: Callable
    density: HalfDensity
    coefficient_fn: Callable

    def maslov(self, p) -> complex:
        return self.maslov_fn(p)

    def coefficient(self, p) -> complex:
        return self.coefficient_fn(p)


def symbol_of(amplitude: Amplitude, desc: HormanderDescription,
              rng: Optional[np.random.Generator] = None) -> SymbolSection:
    """Leading symbol of the oscillatory density a e^{i phi/hbar}.

    The absolute half-density is a(z, s, 0) times the induced reference;
    the reported coefficient is therefore a(z, s, 0) itself.  The Maslov
    factor is the fiber-Hessian signature exponential, identically 1 for
    built descriptions.
    """
    if tuple(amplitude.x_vars) != desc.base_patch.variables \
            or tuple(amplitude.s_vars) != desc.fiber_variables:
        raise DimensionMismatch(
            "amplitude variables do not match the description")
    if rng is None:
        rng = np.random.default_rng(0)
    seed = rng.integers(1 << 32)

    def frame_fn(p):
        z, s = p
        return lambda_tangent_frame(desc, z, s)

    def amp_at(p):
        z, s = p
        x_env = {name: float(v)
                 for name, v in zip(desc.base_patch.variables, np.atleast_1d(z))}
        s_env = {name: float(v)
                 for name, v in zip(desc.fiber_variables, np.atleast_1d(s))}
        return complex(amplitude.evaluate(x_env, s_env, 0.0))

    def coeff_fn(p):
        z, s = p
        local = np.random.default_rng(seed)
        return amp_at(p) * induced_reference(desc, z, s, local)

    def maslov_fn(p):
        z, s = p
        return maslov_section(desc, z, s)

    return SymbolSection(maslov_fn, HalfDensity(frame_fn, coeff_fn), amp_at)


def compose_symbols(sig1: SymbolSection, sig2: SymbolSection,
                    rel1: CanonicalRelation, rel2: CanonicalRelation,
                    candidate: CanonicalRelation,
                    candidate_desc: HormanderDescription,
                    rng: Optional[np.random.Generator] = None) -> SymbolSection:
    """Product of two symbols over a transverse zero-excess chain.

    The composed density is evaluated lazily: each candidate point
    (z_c, s_c) is chained through the relations, the two half-densities
    are composed there, and the coefficient is reported against the
    candidate description's induced reference.  Maslov factors multiply.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    seed = int(rng.integers(1 << 32))

    def as_relation_density(sig: SymbolSection, rel: CanonicalRelation):
        # symbol densities live on the un-flipped bundle; transport them
        # to the relation convention (|det| = 1) before composing
        n1, n2 = rel.n_source, rel.n_target

        def frame_fn(p):
            z, s = p
            return relation_frame(rel, z, s)

        def coeff_fn(p):
            frame = frame_fn(p)
            return sig.density.value_on(
                p, _relation_rows_to_lambda(frame, n1, n2))

        return HalfDensity(frame_fn, coeff_fn)

    rho1 = as_relation_density(sig1, rel1)
    rho2 = as_relation_density(sig2, rel2)

    def frame_fn(p):
        z, s = p
        return relation_frame(candidate, z, s)

    def resolve(p):
        z, s = p
        local = np.random.default_rng(seed)
        return composed_point(rel1, rel2, candidate, z, s, local), local

    def coeff_fn(p):
        cpt, local = resolve(p)
        return compose_half_densities(rho1, rho2, cpt, local)

    def maslov_fn(p):
        cpt, _ = resolve(p)
        sol = cpt.star
        z1 = np.concatenate([sol.x1, sol.x2])
        z2 = np.concatenate([sol.x2, sol.x3])
        return sig1.maslov((z1, sol.s)) * sig2.maslov((z2, sol.t))

    def coefficient_fn(p):
        z, s = p
        local = np.random.default_rng(seed)
        value = coeff_fn(p)
        n1, n3 = candidate.n_source, candidate.n_target
        lam_frame = _relation_rows_to_lambda(
            relation_frame(candidate, z, s), n1, n3)
        ref = induced_reference(candidate_desc, z, s, local,
                                frame=lam_frame)
        return value / ref

    return SymbolSection(maslov_fn, HalfDensity(frame_fn, coeff_fn),
                         coefficient_fn)


# ---------------------------------------------------------------------------
# stationary-phase readout of discretized kernels


def stationary_phase_leading(fio: DiscretizedFIO, x_source: float,
                             x_target: float, *, window: float = 1.4,
                             min_nodes: int = 5,
                             residual_tol: float = 0.25) -> float:
    """Leading amplitude modulus of a 1D kernel at an on-relation point.

    Reads the kernel column at the source node nearest ``x_source``,
    fits |K| by a low-order polynomial in the scaled offset
    w = (x2 - x_target)/hbar over |w| <= window, and returns the fitted
    on-point value normalized by hbar^(r - k/2) (2 pi hbar)^((k-1)/2).
    For a single built kernel this recovers |integral of a ds| at the
    point; for a direct composed kernel (k = n2 + k1 + k2) the same
    normalization accounts for the reduced stationary pairs, whose
    mixed-Hessian determinant is 1 for graph-form constraints.
    """
    if fio.source_grid.dim != 1 or fio.target_grid.dim != 1:
        raise DimensionMismatch("stationary-phase readout is 1D only")
    src_nodes = fio.source_grid.axis_nodes(0)
    tgt_nodes = fio.target_grid.axis_nodes(0)
    j1 = int(np.argmin(np.abs(src_nodes - x_source)))
    column = np.abs(fio.kernel[:, j1])

    peak = float(np.max(column)) if column.size else 0.0
    if peak == 0.0:
        return 0.0

    w = (tgt_nodes - x_target) / fio.hbar
    sel = np.abs(w) <= window
    n_sel = int(np.count_nonzero(sel))
    if n_sel < min_nodes:
        raise FitFailed(
            f"only {n_sel} nodes within |w| <= {window}; refine the grid "
            f"for hbar = {fio.hbar}")
    ws = w[sel]
    vals = column[sel]
    degree = 3 if n_sel >= 7 else 2
    design = np.vander(ws, degree + 1, increasing=True)
    coeffs, *_ = np.linalg.lstsq(design, vals, rcond=None)
    fitted = design @ coeffs
    scale = float(np.max(vals))
    residual = float(np.max(np.abs(fitted - vals))) / max(scale, 1e-300)
    if residual > residual_tol:
        raise FitFailed(
            f"local fit residual {residual:.3f} above {residual_tol}")
    c0 = float(coeffs[0])
    if c0 <= 0.0:
        raise FitFailed("fitted on-point value is not positive")
    expo = float(fio.r - Fraction(fio.k, 2))
    norm = fio.hbar ** expo * (2.0 * np.pi * fio.hbar) ** ((fio.k - 1) / 2.0)
    return c0 / norm


def symbol_table(section: SymbolSection, points) -> list:
    """Rows (parametrization coords..., coefficient, maslov re, im)."""
    rows = []
    for p in points:
        z, s = p
        coeff = section.coefficient(p)
        mas = section.maslov(p)
        rows.append(tuple(np.atleast_1d(z)) + tuple(np.atleast_1d(s))
                    + (complex(coeff).real, complex(coeff).imag,
                       mas.real, mas.imag))
    return rows
