"""Discretized semi-classical operators from relations and amplitudes.

The kernel of a quantized relation on grids over X1 and X2 is

    K[j2, j1] = hbar^(r - k/2) * integral_s a(x, s, hbar) e^{i phi / hbar} ds

with phi = sum_i s_i u_i + f the generating phase of the relation.  The
oscillatory integrals are done by tensorized Gauss-Legendre panels sized
so the phase varies by less than pi/2 per panel; no specialized high
frequency rules, hbar stays at desk scale.

Conventions fixed here: phases always carry the imaginary unit, orders
are tracked as exact rationals (composition introduces halves), grid
functions are coefficients against coordinate Lebesgue references, and
every reduction runs in a fixed order so kernels are reproducible to
the byte.
"""

from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Optional

import numpy as np

from .errors import (DimensionMismatch, GridMismatch,
                     QuadraturePanelOverflow)
from .expr import ScalarExpr
from .geometry import EuclideanPatch
from .relations import CanonicalRelation, _require_chainable

PANEL_PHASE_LIMIT = np.pi / 2.0
DEFAULT_QUAD_ORDER = 8
DEFAULT_PANEL_BUDGET = 4096
CHUNK_ENTRIES = 1 << 21


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centered lattice over a patch's box.

    Cell centers make midpoint quadrature exact to second order and
    keep refinement nested-free: no node ever sits on the boundary,
    where amplitude cutoffs vanish anyway.
    """

    patch: EuclideanPatch
    points_per_axis: tuple

    def __post_init__(self):
        pts = tuple(int(p) for p in self.points_per_axis)
        if len(pts) != self.patch.dim:
            raise DimensionMismatch(
                f"{len(pts)} axis counts for a {self.patch.dim}-dim patch")
        if any(p < 1 for p in pts):
            raise DimensionMismatch("points_per_axis must be >= 1")
        object.__setattr__(self, "points_per_axis", pts)

    @property
    def dim(self) -> int:
        return self.patch.dim

    @property
    def spacings(self) -> tuple:
        return tuple((hi - lo) / p for (lo, hi), p in
                     zip(self.patch.box, self.points_per_axis))

    @property
    def cell_volume(self) -> float:
        out = 1.0
        for h in self.spacings:
            out *= h
        return out

    @property
    def n_nodes(self) -> int:
        out = 1
        for p in self.points_per_axis:
            out *= p
        return out

    def axis_nodes(self, i: int) -> np.ndarray:
        lo, hi = self.patch.box[i]
        p = self.points_per_axis[i]
        h = (hi - lo) / p
        return lo + h * (np.arange(p) + 0.5)

    def node_array(self) -> np.ndarray:
        """All nodes as an (n_nodes, dim) array in C (row-major) order."""
        axes = [self.axis_nodes(i) for i in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)

    def node_columns(self) -> list:
        """Per-variable flat coordinate arrays, aligned with node_array."""
        arr = self.node_array()
        return [arr[:, i] for i in range(self.dim)]


def grid_function(grid: Grid, fn) -> np.ndarray:
    """Sample a callable or expression on the grid, flat C order."""
    cols = grid.node_columns()
    if isinstance(fn, ScalarExpr):
        if fn.variables != grid.patch.variables:
            fn = fn.with_vars(grid.patch.variables)
        return np.asarray(fn(cols), dtype=complex).reshape(grid.n_nodes)
    out = fn(*cols)
    return np.broadcast_to(np.asarray(out, dtype=complex),
                           (grid.n_nodes,)).copy()


# ---------------------------------------------------------------------------
# amplitudes


def bump_profile(t, power: int = 4):
    """(1 - t^2)^power on [-1, 1], zero outside; C^(power-1) at the edge."""
    t = np.asarray(t, dtype=float)
    inside = np.abs(t) < 1.0
    core = np.where(inside, 1.0 - t * t, 0.0)
    return core ** power


@dataclass(frozen=True)
class Amplitude:
    """Symbol factor a(x, s, hbar) with compact support enforced by bumps.

    ``expr`` is bound to x_vars + s_vars + ("hbar",).  Every s axis
    carries a bump cutoff over its support interval; x axes listed in
    ``x_support`` get one too.  Outside the declared boxes the amplitude
    is exactly zero.
    """

    expr: ScalarExpr
    x_vars: tuple
    s_vars: tuple
    s_support: tuple
    x_support: Optional[dict] = None
    cutoff_power: int = 4

    def __post_init__(self):
        expected = tuple(self.x_vars) + tuple(self.s_vars) + ("hbar",)
        if self.expr.variables != expected:
            raise DimensionMismatch(
                f"amplitude bound to {self.expr.variables}, expected {expected}")
        if len(self.s_support) != len(self.s_vars):
            raise DimensionMismatch("one support interval per s variable")
        for lo, hi in self.s_support:
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise DimensionMismatch(f"bad support interval ({lo}, {hi})")
        if self.x_support:
            for name in self.x_support:
                if name not in self.x_vars:
                    raise DimensionMismatch(f"unknown support axis {name!r}")

    def evaluate(self, x_env: dict, s_env: dict, hbar: float):
        """Cutoff-weighted value on broadcastable coordinate arrays."""
        args = []
        for name in self.x_vars:
            args.append(x_env[name])
        for name in self.s_vars:
            args.append(s_env[name])
        args.append(hbar)
        out = self.expr(args)
        for name, (lo, hi) in zip(self.s_vars, self.s_support):
            t = (2.0 * np.asarray(s_env[name]) - lo - hi) / (hi - lo)
            out = out * bump_profile(t, self.cutoff_power)
        if self.x_support:
            for name in self.x_vars:
                if name in self.x_support:
                    lo, hi = self.x_support[name]
                    t = (2.0 * np.asarray(x_env[name]) - lo - hi) / (hi - lo)
                    out = out * bump_profile(t, self.cutoff_power)
        return out


def make_amplitude(text, x_vars, s_vars, s_support, x_support=None,
                   cutoff_power: int = 4) -> Amplitude:
    expected = tuple(x_vars) + tuple(s_vars) + ("hbar",)
    expr = text if isinstance(text, ScalarExpr) else ScalarExpr.parse(text, expected)
    if expr.variables != expected:
        expr = expr.with_vars(expected)
    return Amplitude(expr, tuple(x_vars), tuple(s_vars),
                     tuple(tuple(iv) for iv in s_support),
                     dict(x_support) if x_support else None, cutoff_power)


@dataclass(frozen=True)
class SeparableAmplitude:
    """Product a1(x1, x2, s) * a2(x2, x3, t) for chained-kernel builds.

    Factorized amplitudes admit an exact regrouping of the composed
    integral into two fiber integrals and one middle contraction, which
    is what makes large-grid composed kernels affordable.
    """

    first: Amplitude
    second: Amplitude


# ---------------------------------------------------------------------------
# panelized Gauss-Legendre machinery


def _panel_nodes(lo: float, hi: float, panels: int, order: int):
    """Nodes and weights of `panels` Gauss-Legendre panels on [lo, hi]."""
    base_x, base_w = np.polynomial.legendre.leggauss(order)
    width = (hi - lo) / panels
    edges = lo + width * np.arange(panels)
    nodes = (edges[:, None] + 0.5 * width * (base_x[None, :] + 1.0)).reshape(-1)
    weights = np.tile(0.5 * width * base_w, panels)
    return nodes, weights


def _required_panels(variation: float, hbar: float,
                     share: float = PANEL_PHASE_LIMIT) -> int:
    """Panels needed so the per-panel phase change stays below `share`."""
    if variation <= 0.0:
        return 1
    return max(1, int(np.ceil(variation / (hbar * share))))


def _apply_prefactor(kernel: np.ndarray, hbar: float, r: Fraction,
                     k: int) -> np.ndarray:
    """Scale a kernel by hbar^(r - k/2) as a sequence of exact steps.

    The half-integer tail is applied first and the nonnegative integer
    part as repeated elementwise multiplications by hbar, so raising r
    by 1 multiplies the finished kernel by hbar exactly (whenever the
    smaller exponent is >= -1/2, which covers every bundled case).
    """
    expo = r - Fraction(k, 2)
    if expo.denominator == 1:
        n = expo.numerator
        out = kernel
    else:
        n = int(expo + Fraction(1, 2))
        out = kernel * (1.0 / float(np.sqrt(hbar)))
    if n >= 0:
        for _ in range(n):
            out = out * hbar
    else:
        inv = 1.0 / hbar
        for _ in range(-n):
            out = out * inv
    return out


def _check_panel_budget(counts, budget: int):
    total = 1
    for c in counts:
        total *= c
    if total > budget:
        raise QuadraturePanelOverflow(
            f"oscillation requires {total} quadrature panels, budget {budget}",
            required=total)
    return total


def _phase_data(rel: CanonicalRelation):
    """Constraint components and twist of a relation in constraint form."""
    comps = ()
    if rel.base.constraints is not None:
        comps = rel.base.constraints.components
    twist = rel.twist.extension if rel.twist is not None else None
    return comps, twist


def _fiber_integral(u_vals, f_vals, amplitude: Amplitude, x_env: dict,
                    hbar: float, quad_order: int, panel_budget: int):
    """integral_s a(x, s, hbar) e^{i (s.u(x) + f(x)) / hbar} ds, vectorized.

    ``u_vals`` is a list of arrays (one per fiber variable, all the same
    broadcast shape), ``f_vals`` an array or 0.  The phase is affine in
    s, so per-axis panel counts follow from max |u_i| exactly; each axis
    gets an equal share of the pi/2 budget.
    """
    k = len(amplitude.s_vars)
    shape = np.broadcast(*(list(u_vals) + [np.asarray(f_vals)])).shape \
        if (u_vals or np.ndim(f_vals)) else ()
    if k == 0:
        amp = amplitude.evaluate(x_env, {}, hbar)
        return amp * np.exp(1j * np.asarray(f_vals) / hbar)

    axes = []
    counts = []
    for i, (lo, hi) in enumerate(amplitude.s_support):
        u_max = float(np.max(np.abs(u_vals[i]))) if np.size(u_vals[i]) else 0.0
        panels = _required_panels(u_max * (hi - lo), hbar)
        counts.append(panels)
        axes.append(_panel_nodes(lo, hi, panels, quad_order))
    _check_panel_budget(counts, panel_budget)

    node_lists = [a[0] for a in axes]
    weight_lists = [a[1] for a in axes]
    mesh = np.meshgrid(*node_lists, indexing="ij")
    s_nodes = np.stack([m.reshape(-1) for m in mesh], axis=-1)
    w_mesh = np.meshgrid(*weight_lists, indexing="ij")
    s_weights = np.ones(s_nodes.shape[0])
    for wm in w_mesh:
        s_weights = s_weights * wm.reshape(-1)

    base_phase = np.asarray(f_vals, dtype=float)
    out = np.zeros(shape, dtype=complex)
    # fixed iteration order; accumulation order defines the result bytes
    for q in range(s_nodes.shape[0]):
        s_env = {name: s_nodes[q, i]
                 for i, name in enumerate(amplitude.s_vars)}
        phase = base_phase
        for i in range(k):
            phase = phase + s_nodes[q, i] * u_vals[i]
        amp = amplitude.evaluate(x_env, s_env, hbar)
        out = out + (s_weights[q] * amp) * np.exp(1j * phase / hbar)
    return out


# ---------------------------------------------------------------------------
# the discretized operator


@dataclass(frozen=True)
class DiscretizedFIO:
    """Kernel matrix plus the order bookkeeping of the operator it samples.

    kernel[j2, j1] pairs target node j2 with source node j1.  Orders are
    Fractions: r is integer for directly built kernels but picks up a
    half-integer shift of n2/2 under composition, and m = r + n_target/2
    always holds for direct builds.
    """

    kernel: np.ndarray
    source_grid: Grid
    target_grid: Grid
    hbar: float
    r: Fraction
    k: int
    order_m: Fraction
    half_density_convention: str = "lebesgue"

    def __post_init__(self):
        if self.kernel.shape != (self.target_grid.n_nodes,
                                 self.source_grid.n_nodes):
            raise GridMismatch(
                f"kernel {self.kernel.shape} vs grids "
                f"({self.target_grid.n_nodes}, {self.source_grid.n_nodes})")

    @property
    def prefactor_exponent(self) -> Fraction:
        return self.r - Fraction(self.k, 2)


def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    f = Fraction(x).limit_denominator(2)
    if float(f) != float(x):
        raise DimensionMismatch(f"order {x!r} is not a half-integer")
    return f


def _product_env(source_grid: Grid, target_grid: Grid):
    """Broadcast coordinate arrays over (target, source) grid pairs."""
    env = {}
    n1, n2 = source_grid.n_nodes, target_grid.n_nodes
    for name, col in zip(source_grid.patch.variables,
                         source_grid.node_columns()):
        env[name] = col.reshape(1, n1)
    for name, col in zip(target_grid.patch.variables,
                         target_grid.node_columns()):
        env[name] = col.reshape(n2, 1)
    return env


def oscillatory_kernel(rel: CanonicalRelation, amplitude: Amplitude,
                       r, hbar: float, source_grid: Grid, target_grid: Grid,
                       quad_order: int = DEFAULT_QUAD_ORDER,
                       panel_budget: int = DEFAULT_PANEL_BUDGET) -> DiscretizedFIO:
    """Quantize a relation in constraint form against an amplitude.

    The phase is the canonical generating function of the relation; its
    affine dependence on the fiber variables sizes the quadrature panels
    from max |u_i| over the node pairs.  k = 0 relations need no
    integral at all.
    """
    if hbar <= 0.0:
        raise DimensionMismatch("hbar must be positive")
    if source_grid.patch.variables != rel.source.variables \
            or target_grid.patch.variables != rel.target.variables:
        raise GridMismatch("grids do not match the relation's patches")
    if tuple(amplitude.x_vars) != rel.base.ambient.variables:
        raise DimensionMismatch("amplitude x variables must match the product")
    if len(amplitude.s_vars) != rel.fiber_dim:
        raise DimensionMismatch(
            f"amplitude has {len(amplitude.s_vars)} fiber variables, "
            f"relation has {rel.fiber_dim}")
    r = _as_fraction(r)

    comps, twist = _phase_data(rel)
    env = _product_env(source_grid, target_grid)
    arglist = [env[name] for name in rel.base.ambient.variables]
    shape = (target_grid.n_nodes, source_grid.n_nodes)
    u_vals = [np.broadcast_to(np.asarray(c(arglist), dtype=float), shape)
              for c in comps]
    f_vals = np.broadcast_to(np.asarray(twist(arglist), dtype=float), shape) \
        if twist is not None else np.zeros(shape)

    kernel = _fiber_integral(u_vals, f_vals, amplitude, env, hbar,
                             quad_order, panel_budget)
    kernel = np.asarray(kernel, dtype=complex).reshape(shape)
    kernel = _apply_prefactor(kernel, hbar, r, rel.fiber_dim)
    m = r + Fraction(rel.n_target, 2)
    return DiscretizedFIO(kernel, source_grid, target_grid, float(hbar),
                          r, rel.fiber_dim, m)


def apply(fio: DiscretizedFIO, g) -> np.ndarray:
    """Push a source-grid coefficient vector through the kernel."""
    g = np.asarray(g)
    if g.shape != (fio.source_grid.n_nodes,):
        raise GridMismatch(
            f"grid function has shape {g.shape}, "
            f"expected ({fio.source_grid.n_nodes},)")
    return (fio.kernel @ g.astype(complex)) * fio.source_grid.cell_volume


def compose_numeric(second: DiscretizedFIO, first: DiscretizedFIO,
                    excess: int = 0) -> DiscretizedFIO:
    """Matrix composition with middle-grid cell weights.

    The discrete middle integral is the grid Riemann sum; the order is
    the composition law m1 + m2 - e/2 and r picks up the half-integer
    shift n2/2 that the middle integration contributes to the exponent.
    """
    if first.target_grid != second.source_grid:
        raise GridMismatch("middle grids differ")
    if first.hbar != second.hbar:
        raise DimensionMismatch(
            f"hbar mismatch: {first.hbar} vs {second.hbar}")
    vol = first.target_grid.cell_volume
    kernel = second.kernel @ (first.kernel * vol)
    n2 = first.target_grid.patch.dim
    r = first.r + second.r + Fraction(n2, 2)
    k = first.k + second.k + n2
    m = first.order_m + second.order_m - Fraction(excess, 2)
    return DiscretizedFIO(kernel, first.source_grid, second.target_grid,
                          first.hbar, r, k, m)


# ---------------------------------------------------------------------------
# direct composed kernels


def _middle_panel_bound(rel1: CanonicalRelation, rel2: CanonicalRelation,
                        amplitude, source_grid: Grid, target_grid: Grid,
                        middle_patch: EuclideanPatch, probes: int = 9):
    """Max |d phase / d x2_j| over a deterministic probe lattice.

    The phase is affine in (s, t), so taking |s|, |t| at their support
    maxima bounds the fiber part exactly; the x-dependent factors are
    probed on a coarse lattice over the three boxes.
    """
    if isinstance(amplitude, SeparableAmplitude):
        s_support = amplitude.first.s_support
        t_support = amplitude.second.s_support
    else:
        k1 = rel1.fiber_dim
        s_support = amplitude.s_support[:k1]
        t_support = amplitude.s_support[k1:]
    s_max = [max(abs(lo), abs(hi)) for lo, hi in s_support]
    t_max = [max(abs(lo), abs(hi)) for lo, hi in t_support]

    def probe_axis(box):
        return [np.linspace(lo, hi, probes) for lo, hi in box]

    ax1 = probe_axis(source_grid.patch.box)
    ax2 = probe_axis(middle_patch.box)
    ax3 = probe_axis(target_grid.patch.box)
    mesh = np.meshgrid(*(ax1 + ax2 + ax3), indexing="ij")
    flat = [m.reshape(-1) for m in mesh]
    n1 = source_grid.patch.dim
    n2 = middle_patch.dim
    x1 = flat[:n1]
    x2 = flat[n1:n1 + n2]
    x3 = flat[n1 + n2:]

    comps1, twist1 = _phase_data(rel1)
    comps2, twist2 = _phase_data(rel2)
    z1 = x1 + x2
    z2 = x2 + x3
    bound = np.zeros((n2,) + np.broadcast(*flat).shape)

    def add_grad(expr, args, split, weight):
        # d/dx2 columns of expr over the probe lattice, via one-variable
        # central differences of the broadcast evaluation
        h = 1e-5
        for j in range(n2):
            shifted_p = list(args)
            shifted_m = list(args)
            shifted_p[split + j] = args[split + j] + h
            shifted_m[split + j] = args[split + j] - h
            d = (np.asarray(expr(shifted_p)) - np.asarray(expr(shifted_m))) / (2 * h)
            bound[j] += weight * np.abs(d)

    for i, c in enumerate(comps1):
        add_grad(c, z1, n1, s_max[i])
    if twist1 is not None:
        add_grad(twist1, z1, n1, 1.0)
    for i, c in enumerate(comps2):
        add_grad(c, z2, 0, t_max[i])
    if twist2 is not None:
        add_grad(twist2, z2, 0, 1.0)
    return [float(np.max(bound[j])) for j in range(n2)]


def _composed_tensor_kernel(rel1, rel2, amplitude: Amplitude, hbar: float,
                            source_grid: Grid, target_grid: Grid,
                            mid_nodes, mid_weights, quad_order: int,
                            panel_budget: int) -> np.ndarray:
    """Joint amplitude path: one shared fiber lattice, chunked sweeps.

    Fiber panel counts come from the worst |u_i|, |v_j| over a probe
    lattice (so one node set serves every middle point), and the middle
    by fiber product is swept in chunks sized to keep the working arrays
    near CHUNK_ENTRIES scalars.
    """
    n_src, n_tgt = source_grid.n_nodes, target_grid.n_nodes
    comps1, twist1 = _phase_data(rel1)
    comps2, twist2 = _phase_data(rel2)
    k1 = len(comps1)
    probes = 9

    def box_probe(patch):
        return [np.linspace(lo, hi, probes) for lo, hi in patch.box]

    mesh1 = np.meshgrid(*(box_probe(source_grid.patch)
                          + box_probe(rel1.target)), indexing="ij")
    z1_probe = [m.reshape(-1) for m in mesh1]
    mesh2 = np.meshgrid(*(box_probe(rel1.target)
                          + box_probe(target_grid.patch)), indexing="ij")
    z2_probe = [m.reshape(-1) for m in mesh2]

    axes = []
    counts = []
    for i, (lo, hi) in enumerate(amplitude.s_support):
        if i < k1:
            bound = float(np.max(np.abs(comps1[i](z1_probe))))
        else:
            bound = float(np.max(np.abs(comps2[i - k1](z2_probe))))
        panels = _required_panels(bound * (hi - lo), hbar)
        counts.append(panels)
        axes.append(_panel_nodes(lo, hi, panels, quad_order))
    _check_panel_budget(counts, panel_budget)

    if axes:
        mesh = np.meshgrid(*[a[0] for a in axes], indexing="ij")
        fib_nodes = np.stack([m.reshape(-1) for m in mesh], axis=-1)
        w_mesh = np.meshgrid(*[a[1] for a in axes], indexing="ij")
        fib_weights = np.ones(fib_nodes.shape[0])
        for wm in w_mesh:
            fib_weights = fib_weights * wm.reshape(-1)
    else:
        fib_nodes = np.zeros((1, 0))
        fib_weights = np.ones(1)
    q_fib = fib_nodes.shape[0]

    src_cols = source_grid.node_columns()
    tgt_cols = target_grid.node_columns()
    x1_env = {name: col.reshape(1, 1, n_src)
              for name, col in zip(source_grid.patch.variables, src_cols)}
    x3_env = {name: col.reshape(1, n_tgt, 1)
              for name, col in zip(target_grid.patch.variables, tgt_cols)}

    chunk = max(1, CHUNK_ENTRIES // max(1, n_src * n_tgt))
    kernel = np.zeros((n_tgt, n_src), dtype=complex)
    for q in range(mid_nodes.shape[0]):
        x2_env = {name: float(mid_nodes[q, j])
                  for j, name in enumerate(rel1.target.variables)}
        env = dict(x1_env)
        env.update(x2_env)
        env.update(x3_env)
        z1 = [env[name] for name in rel1.base.ambient.variables]
        z2 = [env[name] for name in rel2.base.ambient.variables]
        u_here = [np.asarray(c(z1), dtype=float) for c in comps1]
        v_here = [np.asarray(c(z2), dtype=float) for c in comps2]
        base_phase = np.zeros((1, n_tgt, n_src))
        if twist1 is not None:
            base_phase = base_phase + np.asarray(twist1(z1), dtype=float)
        if twist2 is not None:
            base_phase = base_phase + np.asarray(twist2(z2), dtype=float)
        acc = np.zeros((n_tgt, n_src), dtype=complex)
        for lo_i in range(0, q_fib, chunk):
            hi_i = min(q_fib, lo_i + chunk)
            block = fib_nodes[lo_i:hi_i]
            b = hi_i - lo_i
            s_env = {name: block[:, i].reshape(b, 1, 1)
                     for i, name in enumerate(amplitude.s_vars)}
            phase = np.broadcast_to(base_phase, (b, n_tgt, n_src)).copy()
            for i in range(k1):
                phase += s_env[amplitude.s_vars[i]] * u_here[i]
            for i in range(len(comps2)):
                phase += s_env[amplitude.s_vars[k1 + i]] * v_here[i]
            amp = amplitude.evaluate(env, s_env, hbar)
            integrand = amp * np.exp(1j * phase / hbar)
            acc = acc + np.tensordot(fib_weights[lo_i:hi_i],
                                     np.broadcast_to(integrand,
                                                     (b, n_tgt, n_src)),
                                     axes=1)
        kernel = kernel + mid_weights[q] * acc
    return kernel


def composed_kernel_direct(rel1: CanonicalRelation, rel2: CanonicalRelation,
                           amplitude, r, hbar: float, source_grid: Grid,
                           target_grid: Grid,
                           quad_order: int = DEFAULT_QUAD_ORDER,
                           panel_budget: int = DEFAULT_PANEL_BUDGET) -> DiscretizedFIO:
    """One-shot kernel of the chained relation, without composing matrices.

    Integrates over the middle coordinates and both fiber boxes with the
    chained phase s.u + t.v + f1 + f2; k = n2 + k1 + k2.  A
    SeparableAmplitude triggers the exact regrouping into two fiber
    integrals and a weighted middle contraction, which is the path that
    scales to fine grids.
    """
    _require_chainable(rel1, rel2)
    if hbar <= 0.0:
        raise DimensionMismatch("hbar must be positive")
    r = _as_fraction(r)
    n2 = rel1.target.dim
    k_total = n2 + rel1.fiber_dim + rel2.fiber_dim
    middle_patch = rel1.target

    bounds = _middle_panel_bound(rel1, rel2, amplitude, source_grid,
                                 target_grid, middle_patch)
    mid_axes = []
    mid_counts = []
    for j, (lo, hi) in enumerate(middle_patch.box):
        panels = _required_panels(bounds[j] * (hi - lo), hbar)
        mid_counts.append(panels)
        mid_axes.append(_panel_nodes(lo, hi, panels, quad_order))
    # the budget applies per tensor stage: the middle lattice here, each
    # fiber box inside _fiber_integral
    _check_panel_budget(mid_counts, panel_budget)

    mesh = np.meshgrid(*[a[0] for a in mid_axes], indexing="ij")
    mid_nodes = np.stack([m.reshape(-1) for m in mesh], axis=-1)
    w_mesh = np.meshgrid(*[a[1] for a in mid_axes], indexing="ij")
    mid_weights = np.ones(mid_nodes.shape[0])
    for wm in w_mesh:
        mid_weights = mid_weights * wm.reshape(-1)
    q_mid = mid_nodes.shape[0]

    n_src = source_grid.n_nodes
    n_tgt = target_grid.n_nodes
    comps1, twist1 = _phase_data(rel1)
    comps2, twist2 = _phase_data(rel2)
    fiber_budget = panel_budget

    if isinstance(amplitude, SeparableAmplitude):
        # exact regrouping: inner1[q, j1], inner2[j3, q], then contract q
        env1 = {}
        for name, col in zip(source_grid.patch.variables,
                             source_grid.node_columns()):
            env1[name] = col.reshape(1, n_src)
        for j, name in enumerate(middle_patch.variables):
            env1[name] = mid_nodes[:, j].reshape(q_mid, 1)
        args1 = [env1[name] for name in rel1.base.ambient.variables]
        shape1 = (q_mid, n_src)
        u_vals = [np.broadcast_to(np.asarray(c(args1), dtype=float), shape1)
                  for c in comps1]
        f1 = np.broadcast_to(np.asarray(twist1(args1), dtype=float), shape1) \
            if twist1 is not None else np.zeros(shape1)
        inner1 = _fiber_integral(u_vals, f1, amplitude.first, env1, hbar,
                                 quad_order, fiber_budget)

        env2 = {}
        for j, name in enumerate(middle_patch.variables):
            env2[name] = mid_nodes[:, j].reshape(1, q_mid)
        for name, col in zip(target_grid.patch.variables,
                             target_grid.node_columns()):
            env2[name] = col.reshape(n_tgt, 1)
        args2 = [env2[name] for name in rel2.base.ambient.variables]
        shape2 = (n_tgt, q_mid)
        v_vals = [np.broadcast_to(np.asarray(c(args2), dtype=float), shape2)
                  for c in comps2]
        f2 = np.broadcast_to(np.asarray(twist2(args2), dtype=float), shape2) \
            if twist2 is not None else np.zeros(shape2)
        inner2 = _fiber_integral(v_vals, f2, amplitude.second, env2, hbar,
                                 quad_order, fiber_budget)

        kernel = (inner2 * mid_weights.reshape(1, q_mid)) @ inner1
    else:
        expected = (source_grid.patch.variables + middle_patch.variables
                    + target_grid.patch.variables)
        if tuple(amplitude.x_vars) != expected:
            raise DimensionMismatch(
                f"amplitude x variables {amplitude.x_vars}, expected {expected}")
        kernel = _composed_tensor_kernel(
            rel1, rel2, amplitude, hbar, source_grid, target_grid,
            mid_nodes, mid_weights, quad_order, fiber_budget)

    kernel = _apply_prefactor(np.asarray(kernel, dtype=complex), hbar, r, k_total)
    m = r + Fraction(target_grid.patch.dim, 2)
    return DiscretizedFIO(np.asarray(kernel, dtype=complex),
                          source_grid, target_grid, float(hbar),
                          r, k_total, m)


# ---------------------------------------------------------------------------
# export

BINARY_MAGIC = b"CNRMFIO1"


def kernel_to_csv(fio: DiscretizedFIO, path):
    """Rows (j2, j1, re, im) with a one-line header, deterministic order."""
    with open(path, "w") as fh:
        fh.write("j2,j1,re,im\n")
        kern = fio.kernel
        for j2 in range(kern.shape[0]):
            row = kern[j2]
            for j1 in range(kern.shape[1]):
                fh.write(f"{j2},{j1},{row[j1].real!r},{row[j1].imag!r}\n")


def kernel_to_binary(fio: DiscretizedFIO, path):
    """Little-endian dump.

    Layout: magic "CNRMFIO1" (8 bytes); uint32 rows, cols; float64 hbar;
    int32 r numerator, r denominator, k, m numerator, m denominator;
    then rows*cols little-endian complex128 entries, row-major.
    """
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        header = np.array([fio.kernel.shape[0], fio.kernel.shape[1]],
                          dtype="<u4")
        fh.write(header.tobytes())
        fh.write(np.array([fio.hbar], dtype="<f8").tobytes())
        ints = np.array([fio.r.numerator, fio.r.denominator, fio.k,
                         fio.order_m.numerator, fio.order_m.denominator],
                        dtype="<i4")
        fh.write(ints.tobytes())
        fh.write(fio.kernel.astype("<c16").tobytes(order="C"))


def kernel_from_binary(path) -> dict:
    """Parse a binary dump back into its fields (round-trip checking)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != BINARY_MAGIC:
            raise DimensionMismatch(f"bad magic {magic!r}")
        rows, cols = np.frombuffer(fh.read(8), dtype="<u4")
        hbar = float(np.frombuffer(fh.read(8), dtype="<f8")[0])
        r_num, r_den, k, m_num, m_den = np.frombuffer(fh.read(20), dtype="<i4")
        data = np.frombuffer(fh.read(int(rows) * int(cols) * 16), dtype="<c16")
        kernel = data.reshape(int(rows), int(cols)).copy()
    return {
        "kernel": kernel,
        "hbar": hbar,
        "r": Fraction(int(r_num), int(r_den)),
        "k": int(k),
        "order_m": Fraction(int(m_num), int(m_den)),
    }
