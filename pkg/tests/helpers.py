"""Shared oracles for the test suite.

Everything here is deliberately independent of the library's own
differentiation and quadrature: finite differences for derivatives and
a plain random expression-text generator for fuzzing the parser/AD
pipeline.  Keeping the oracles dumb is the point.
"""

import numpy as np

# grammar pieces the generator may emit; every construct is smooth and
# bounded on [-1, 1]^n by construction so finite differences stay honest
_BOUNDED_FUNCS = ("sin", "cos", "tanh")


def random_expression(rng: np.random.Generator, variables, depth: int = 3) -> str:
    """Random expression text over `variables`, bounded and C^inf.

    The grammar keeps every subexpression's magnitude modest: bounded
    functions at the unary layer, guarded log/sqrt/division (argument
    1 + E^2 type), and integer powers only.  That keeps fourth
    derivatives small enough for second-order central differences to
    resolve Hessians to ~1e-8.
    """
    if depth == 0 or rng.random() < 0.18:
        if rng.random() < 0.35:
            return _fmt(rng.uniform(-1.5, 1.5))
        return str(variables[rng.integers(len(variables))])
    roll = rng.random()
    a = random_expression(rng, variables, depth - 1)
    if roll < 0.18:
        f = _BOUNDED_FUNCS[rng.integers(len(_BOUNDED_FUNCS))]
        return f"{f}({a})"
    if roll < 0.26:
        return f"exp({_fmt(rng.uniform(0.2, 0.7))}*{_wrap(a)})"
    if roll < 0.34:
        guard = _fmt(rng.uniform(0.6, 1.6))
        return f"log({guard} + {_wrap(a)}^2)"
    if roll < 0.40:
        guard = _fmt(rng.uniform(0.6, 1.6))
        return f"sqrt({guard} + {_wrap(a)}^2)"
    b = random_expression(rng, variables, depth - 1)
    if roll < 0.55:
        return f"{_wrap(a)} + {_wrap(b)}"
    if roll < 0.70:
        return f"{_wrap(a)} - {_wrap(b)}"
    if roll < 0.86:
        return f"{_wrap(a)}*{_wrap(b)}"
    if roll < 0.93:
        guard = _fmt(rng.uniform(0.8, 1.8))
        return f"{_wrap(a)}/({guard} + {_wrap(b)}^2)"
    return f"{_wrap(a)}^{int(rng.integers(2, 4))}"


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _wrap(text: str) -> str:
    return f"({text})"


def fd_gradient(fn, x, h: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (fn(x + e) - fn(x - e)) / (2.0 * h)
    return out


def fd_hessian(fn, x, h: float = 2e-4) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = x.size
    out = np.zeros((n, n))
    f0 = fn(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h
        out[i, i] = (fn(x + ei) - 2.0 * f0 + fn(x - ei)) / (h * h)
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = h
            val = (fn(x + ei + ej) - fn(x + ei - ej)
                   - fn(x - ei + ej) + fn(x - ei - ej)) / (4.0 * h * h)
            out[i, j] = val
            out[j, i] = val
    return out


def fd_jacobian(fn, x, h: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2.0 * h))
    return np.stack(cols, axis=-1)


def rel_err(approx, exact, floor: float = 1.0) -> float:
    approx = np.asarray(approx, dtype=float)
    exact = np.asarray(exact, dtype=float)
    scale = max(floor, float(np.max(np.abs(exact))))
    return float(np.max(np.abs(approx - exact))) / scale


def fourier_bump_transform(omega: float, power: int = 4) -> complex:
    """Adaptive-quadrature value of int_{-1}^{1} (1-s^2)^power e^{i omega s} ds.

    Kept deliberately independent of the package's panelized rule: this
    is the reference the oscillatory kernels are judged against.
    """
    from scipy.integrate import quad

    def profile(s):
        return (1.0 - s * s) ** power

    re = quad(lambda s: profile(s) * np.cos(omega * s), -1.0, 1.0,
              epsabs=1e-13, epsrel=1e-13, limit=400)[0]
    im = quad(lambda s: profile(s) * np.sin(omega * s), -1.0, 1.0,
              epsabs=1e-13, epsrel=1e-13, limit=400)[0]
    return complex(re, im)
