"""Closed-form scalar expressions with exact forward-mode derivatives.

This module is the numeric substrate for the rest of the package.  It
provides a tiny expression language

    literals        1.5, 2e-3, .25
    arithmetic      + - * / ^        (^ is right associative and binds
                                      tighter than unary minus)
    unary minus     -x
    functions       sin cos exp log sqrt tanh
    constants       pi, e

parsed against an explicit ordered tuple of variable names.  Expressions
evaluate on floats or on numpy arrays (broadcasting elementwise), and
differentiate by propagating second-order jets (value, gradient,
Hessian) through the syntax tree.  No finite differences are involved,
and the Hessian is symmetric exactly, entry by entry, because every
propagation rule is written in a manifestly symmetric form.

Integer powers are expanded by repeated multiplication, so they are
defined for negative bases and stay exact under differentiation.  A
fractional power demands a strictly positive base and raises
``DomainError`` otherwise, as do ``log``, ``sqrt`` and division at their
singular arguments.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, DomainError, ParseError, UnknownIdentifier

FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt", "tanh")
CONSTANTS = {"pi": math.pi, "e": math.e}


# ---------------------------------------------------------------------------
# syntax tree


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: object


@dataclass(frozen=True)
class Bin:
    op: str
    lhs: object
    rhs: object


@dataclass(frozen=True)
class Call:
    fn: str
    arg: object


# ---------------------------------------------------------------------------
# second-order jets

class Jet2:
    """Value, gradient and Hessian of a scalar quantity at one point.

    Arithmetic on jets implements the chain rule to second order.  The
    symmetric outer-product form ``outer(a, b) + outer(b, a)`` is used
    everywhere so the propagated Hessian is exactly symmetric.
    """

    __slots__ = ("val", "grad", "hess")

    def __init__(self, val, grad, hess):
        self.val = float(val)
        self.grad = grad
        self.hess = hess

    @staticmethod
    def variable(value: float, index: int, nvars: int) -> "Jet2":
        g = np.zeros(nvars)
        g[index] = 1.0
        return Jet2(float(value), g, np.zeros((nvars, nvars)))

    @staticmethod
    def constant(value: float, nvars: int) -> "Jet2":
        return Jet2(float(value), np.zeros(nvars), np.zeros((nvars, nvars)))

    def _lift(self, other) -> "Jet2":
        if isinstance(other, Jet2):
            return other
        return Jet2.constant(float(other), self.grad.shape[0])

    def __add__(self, other):
        o = self._lift(other)
        return Jet2(self.val + o.val, self.grad + o.grad, self.hess + o.hess)

    __radd__ = __add__

    def __neg__(self):
        return Jet2(-self.val, -self.grad, -self.hess)

    def __sub__(self, other):
        o = self._lift(other)
        return Jet2(self.val - o.val, self.grad - o.grad, self.hess - o.hess)

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __mul__(self, other):
        o = self._lift(other)
        cross = np.outer(self.grad, o.grad)
        return Jet2(
            self.val * o.val,
            self.grad * o.val + o.grad * self.val,
            self.hess * o.val + o.hess * self.val + cross + cross.T,
        )

    __rmul__ = __mul__

    def reciprocal(self) -> "Jet2":
        if self.val == 0.0:
            raise DomainError("division by zero")
        inv = 1.0 / self.val
        outer = np.outer(self.grad, self.grad)
        return Jet2(
            inv,
            -self.grad * inv * inv,
            -self.hess * inv * inv + 2.0 * inv ** 3 * outer,
        )

    def __truediv__(self, other):
        return self * self._lift(other).reciprocal()

    def __rtruediv__(self, other):
        return self._lift(other) * self.reciprocal()

    def _apply(self, f, df, d2f) -> "Jet2":
        v = f(self.val)
        d1 = df(self.val)
        d2 = d2f(self.val)
        return Jet2(
            v,
            d1 * self.grad,
            d1 * self.hess + d2 * np.outer(self.grad, self.grad),
        )

    def sin(self):
        return self._apply(math.sin, math.cos, lambda x: -math.sin(x))

    def cos(self):
        return self._apply(math.cos, lambda x: -math.sin(x), lambda x: -math.cos(x))

    def exp(self):
        return self._apply(math.exp, math.exp, math.exp)

    def log(self):
        if self.val <= 0.0:
            raise DomainError(f"log of nonpositive value {self.val}")
        return self._apply(math.log, lambda x: 1.0 / x, lambda x: -1.0 / (x * x))

    def sqrt(self):
        if self.val < 0.0:
            raise DomainError(f"sqrt of negative value {self.val}")
        if self.val == 0.0:
            raise DomainError("sqrt is not differentiable at zero")
        return self._apply(math.sqrt,
                           lambda x: 0.5 / math.sqrt(x),
                           lambda x: -0.25 / x ** 1.5)

    def tanh(self):
        def d2(x):
            t = math.tanh(x)
            return -2.0 * t * (1.0 - t * t)

        return self._apply(math.tanh, lambda x: 1.0 - math.tanh(x) ** 2, d2)


def _int_power(base, n: int):
    """base ** n for integer n by binary repeated multiplication.

    Works for floats, arrays and jets alike; n < 0 goes through the
    (checked) reciprocal.
    """
    if n == 0:
        return base * 0 + 1.0
    if n < 0:
        return 1.0 / _int_power(base, -n)
    result = None
    square = base
    while n:
        if n & 1:
            result = square if result is None else result * square
        square = square * square
        n >>= 1
    return result


# ---------------------------------------------------------------------------
# primitive dispatch over floats / arrays / jets

def _f_sin(x):
    if isinstance(x, Jet2):
        return x.sin()
    if isinstance(x, np.ndarray):
        return np.sin(x)
    return math.sin(x)


def _f_cos(x):
    if isinstance(x, Jet2):
        return x.cos()
    if isinstance(x, np.ndarray):
        return np.cos(x)
    return math.cos(x)


def _f_exp(x):
    if isinstance(x, Jet2):
        return x.exp()
    if isinstance(x, np.ndarray):
        return np.exp(x)
    return math.exp(x)


def _f_log(x):
    if isinstance(x, Jet2):
        return x.log()
    if isinstance(x, np.ndarray):
        if np.any(x <= 0.0):
            raise DomainError("log of nonpositive value")
        return np.log(x)
    if x <= 0.0:
        raise DomainError(f"log of nonpositive value {x}")
    return math.log(x)


def _f_sqrt(x):
    if isinstance(x, Jet2):
        return x.sqrt()
    if isinstance(x, np.ndarray):
        if np.any(x < 0.0):
            raise DomainError("sqrt of negative value")
        return np.sqrt(x)
    if x < 0.0:
        raise DomainError(f"sqrt of negative value {x}")
    return math.sqrt(x)


def _f_tanh(x):
    if isinstance(x, Jet2):
        return x.tanh()
    if isinstance(x, np.ndarray):
        return np.tanh(x)
    return math.tanh(x)


_FUNC_IMPL = {
    "sin": _f_sin,
    "cos": _f_cos,
    "exp": _f_exp,
    "log": _f_log,
    "sqrt": _f_sqrt,
    "tanh": _f_tanh,
}


def _divide(a, b):
    if isinstance(a, Jet2) or isinstance(b, Jet2):
        if isinstance(b, Jet2):
            return a * b.reciprocal() if isinstance(a, Jet2) else b.__rtruediv__(a)
        return a / b
    if isinstance(b, np.ndarray):
        if np.any(b == 0.0):
            raise DomainError("division by zero")
        return a / b
    if b == 0.0:
        raise DomainError("division by zero")
    return a / b


def _general_power(a, b):
    # a^b with non-integer exponent: defined only for strictly positive base.
    # An exponent that happens to evaluate to an integer still goes through
    # repeated multiplication, keeping negative bases legal and the result
    # exact; only a genuinely variable exponent (a jet) needs exp/log.
    if isinstance(b, (int, float)) and float(b).is_integer():
        return _int_power(a, int(b))
    if isinstance(a, Jet2) or isinstance(b, Jet2):
        base = a if isinstance(a, Jet2) else Jet2.constant(a, b.grad.shape[0])
        expo = b if isinstance(b, Jet2) else Jet2.constant(b, a.grad.shape[0])
        return (expo * base.log()).exp()
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        if np.any(np.asarray(a) <= 0.0):
            raise DomainError("fractional power of nonpositive base")
        return np.exp(np.asarray(b) * np.log(a))
    if a <= 0.0:
        raise DomainError(f"fractional power of nonpositive base {a}")
    return math.exp(b * math.log(a))


def _literal_int_exponent(node):
    """Return n if the exponent node is an integer literal (possibly negated)."""
    if isinstance(node, Num) and float(node.value).is_integer():
        return int(node.value)
    if isinstance(node, Neg):
        inner = _literal_int_exponent(node.arg)
        if inner is not None:
            return -inner
    return None


def _eval(node, env):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return env[node.name]
    if isinstance(node, Neg):
        return -_eval(node.arg, env)
    if isinstance(node, Call):
        return _FUNC_IMPL[node.fn](_eval(node.arg, env))
    # Bin
    op = node.op
    if op == "^":
        n = _literal_int_exponent(node.rhs)
        base = _eval(node.lhs, env)
        if n is not None:
            return _int_power(base, n)
        return _general_power(base, _eval(node.rhs, env))
    a = _eval(node.lhs, env)
    b = _eval(node.rhs, env)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        return _divide(a, b)
    raise AssertionError(f"unknown operator {op!r}")


# ---------------------------------------------------------------------------
# tokenizer / parser

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            # skip over whitespace-only tails
            if text[pos:].strip() == "":
                break
            bad = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ParseError(f"unexpected character {text[bad]!r}", bad)
        if m.group("num") is not None:
            tokens.append(("num", m.group("num"), m.start("num")))
        elif m.group("ident") is not None:
            tokens.append(("ident", m.group("ident"), m.start("ident")))
        else:
            tokens.append(("op", m.group("op"), m.start("op")))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, variables):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0
        self.variables = set(variables)

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op: str):
        kind, value, pos = self.peek()
        if kind != "op" or value != op:
            raise ParseError(f"expected {op!r}", pos)
        return self.advance()

    def parse(self):
        node = self.sum()
        kind, value, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected token {value!r}", pos)
        return node

    def sum(self):
        node = self.term()
        while True:
            kind, value, _ = self.peek()
            if kind == "op" and value in "+-":
                self.advance()
                node = Bin(value, node, self.term())
            else:
                return node

    def term(self):
        node = self.unary()
        while True:
            kind, value, _ = self.peek()
            if kind == "op" and value in "*/":
                self.advance()
                node = Bin(value, node, self.unary())
            else:
                return node

    def unary(self):
        kind, value, _ = self.peek()
        if kind == "op" and value == "-":
            self.advance()
            return Neg(self.unary())
        return self.power()

    def power(self):
        node = self.atom()
        kind, value, _ = self.peek()
        if kind == "op" and value == "^":
            self.advance()
            # right associative; exponent may carry its own unary minus
            return Bin("^", node, self.unary())
        return node

    def atom(self):
        kind, value, pos = self.advance()
        if kind == "num":
            return Num(float(value))
        if kind == "ident":
            nk, nv, _ = self.peek()
            if nk == "op" and nv == "(":
                if value not in FUNCTIONS:
                    raise UnknownIdentifier(
                        f"unknown function {value!r} at offset {pos}")
                self.advance()
                arg = self.sum()
                self.expect_op(")")
                return Call(value, arg)
            if value in self.variables:
                return Var(value)
            if value in CONSTANTS:
                return Num(CONSTANTS[value])
            raise UnknownIdentifier(
                f"unknown identifier {value!r} at offset {pos}")
        if kind == "op" and value == "(":
            node = self.sum()
            self.expect_op(")")
            return node
        if kind == "end":
            raise ParseError("unexpected end of input", pos)
        raise ParseError(f"unexpected token {value!r}", pos)


# ---------------------------------------------------------------------------
# printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def _fmt(node, parent_prec: int = 0) -> str:
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.fn}({_fmt(node.arg)})"
    if isinstance(node, Neg):
        s = "-" + _fmt(node.arg, _PREC["neg"])
        return f"({s})" if parent_prec > _PREC["neg"] else s
    prec = _PREC[node.op]
    if node.op == "^":
        # right associative: parenthesize a compound base
        s = _fmt(node.lhs, prec + 1) + "^" + _fmt(node.rhs, prec)
    else:
        # left associative: the right operand of - and / needs the bump
        rbump = 1 if node.op in ("-", "/") else 0
        s = _fmt(node.lhs, prec) + node.op + _fmt(node.rhs, prec + rbump)
    return f"({s})" if parent_prec > prec else s


# ---------------------------------------------------------------------------
# public wrappers


def _check_var_names(variables):
    names = tuple(variables)
    seen = set()
    for name in names:
        if name in FUNCTIONS or name in CONSTANTS:
            raise ParseError(f"variable name {name!r} shadows a builtin", 0)
        if name in seen:
            raise ParseError(f"duplicate variable name {name!r}", 0)
        seen.add(name)
    return names


@dataclass(frozen=True)
class ScalarExpr:
    """A parsed scalar expression bound to an ordered variable tuple.

    Instances are immutable; arithmetic between expressions over the
    same variable tuple builds new trees without simplification.
    """

    ast: object
    variables: tuple

    @staticmethod
    def parse(text: str, variables) -> "ScalarExpr":
        names = _check_var_names(variables)
        ast = _Parser(text, names).parse()
        return ScalarExpr(ast, names)

    @staticmethod
    def constant(value: float, variables) -> "ScalarExpr":
        return ScalarExpr(Num(float(value)), _check_var_names(variables))

    @property
    def nvars(self) -> int:
        return len(self.variables)

    def _env(self, point):
        if len(point) != len(self.variables):
            raise DomainError(
                f"expected {len(self.variables)} coordinates, got {len(point)}")
        return dict(zip(self.variables, point))

    def __call__(self, point):
        """Evaluate at a point (sequence of floats or broadcastable arrays)."""
        return _eval(self.ast, self._env(point))

    def jet(self, point) -> Jet2:
        n = len(self.variables)
        env = {name: Jet2.variable(float(v), i, n)
               for i, (name, v) in enumerate(zip(self.variables, point))}
        if len(point) != n:
            raise DomainError(f"expected {n} coordinates, got {len(point)}")
        out = _eval(self.ast, env)
        if not isinstance(out, Jet2):
            out = Jet2.constant(out, n)
        return out

    def gradient(self, point) -> np.ndarray:
        return self.jet(point).grad

    def hessian(self, point) -> np.ndarray:
        return self.jet(point).hess

    def to_text(self) -> str:
        return _fmt(self.ast)

    def with_vars(self, variables) -> "ScalarExpr":
        """Rebind to a larger (or reordered) variable tuple.

        Every variable appearing in the tree must be present in the new
        tuple; extra names are allowed and simply never read.
        """
        names = _check_var_names(variables)
        missing = _free_names(self.ast) - set(names)
        if missing:
            raise UnknownIdentifier(
                f"variables {sorted(missing)} absent from new binding")
        return ScalarExpr(self.ast, names)

    def substitute(self, mapping: dict, variables) -> "ScalarExpr":
        """Replace variables by sub-expressions (or numbers).

        ``mapping`` sends variable names to ScalarExpr or float; the
        result is re-bound to ``variables``.  Unmapped variables must be
        present in the new tuple.
        """
        names = _check_var_names(variables)
        repl = {}
        for key, value in mapping.items():
            repl[key] = value.ast if isinstance(value, ScalarExpr) else Num(float(value))
        ast = _substitute(self.ast, repl)
        missing = _free_names(ast) - set(names)
        if missing:
            raise UnknownIdentifier(
                f"variables {sorted(missing)} absent from new binding")
        return ScalarExpr(ast, names)

    def _combine(self, other, op):
        if isinstance(other, (int, float)):
            other = ScalarExpr.constant(float(other), self.variables)
        if other.variables != self.variables:
            raise DimensionMismatch("expressions bound to different variable tuples")
        return ScalarExpr(Bin(op, self.ast, other.ast), self.variables)

    def __add__(self, other):
        return self._combine(other, "+")

    def __radd__(self, other):
        return ScalarExpr.constant(float(other), self.variables)._combine(self, "+")

    def __sub__(self, other):
        return self._combine(other, "-")

    def __mul__(self, other):
        return self._combine(other, "*")

    def __rmul__(self, other):
        return ScalarExpr.constant(float(other), self.variables)._combine(self, "*")

    def __neg__(self):
        return ScalarExpr(Neg(self.ast), self.variables)


def _free_names(node) -> set:
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Neg):
        return _free_names(node.arg)
    if isinstance(node, Call):
        return _free_names(node.arg)
    if isinstance(node, Bin):
        return _free_names(node.lhs) | _free_names(node.rhs)
    return set()


def _substitute(node, repl: dict):
    if isinstance(node, Var):
        return repl.get(node.name, node)
    if isinstance(node, Neg):
        return Neg(_substitute(node.arg, repl))
    if isinstance(node, Call):
        return Call(node.fn, _substitute(node.arg, repl))
    if isinstance(node, Bin):
        return Bin(node.op, _substitute(node.lhs, repl), _substitute(node.rhs, repl))
    return node


@dataclass(frozen=True)
class VectorExpr:
    """A tuple of scalar expressions over one shared variable tuple."""

    components: tuple
    variables: tuple

    @staticmethod
    def parse(texts, variables) -> "VectorExpr":
        names = _check_var_names(variables)
        comps = tuple(ScalarExpr.parse(t, names) for t in texts)
        return VectorExpr(comps, names)

    @staticmethod
    def from_exprs(exprs) -> "VectorExpr":
        exprs = tuple(exprs)
        if not exprs:
            raise DimensionMismatch("empty component list")
        names = exprs[0].variables
        for ex in exprs:
            if ex.variables != names:
                raise DimensionMismatch("components bound to different variables")
        return VectorExpr(exprs, names)

    @property
    def dim(self) -> int:
        return len(self.components)

    @property
    def nvars(self) -> int:
        return len(self.variables)

    def __call__(self, point) -> np.ndarray:
        return np.array([c(point) for c in self.components])

    def jacobian(self, point) -> np.ndarray:
        return np.array([c.gradient(point) for c in self.components])

    def substitute(self, mapping: dict, variables) -> "VectorExpr":
        comps = tuple(c.substitute(mapping, variables) for c in self.components)
        return VectorExpr(comps, tuple(variables))
