"""Boundary profile expressions: parsing, evaluation, differentiation, validation.

Profiles are written in a small infix language over the variables ``x`` and
``y``::

    2 + (1 + 0.5*x)*sin(2*pi*y)

Supported: numbers, ``pi``, ``e``, ``+ - * / ^`` (``**`` is accepted as a
synonym for ``^``), unary minus, and the functions ``sin cos exp sqrt abs``.
Evaluation is vectorised over numpy arrays.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import (
    ArityError,
    ExprDomainError,
    ExprSyntaxError,
    HypothesisViolation,
    NonDifferentiableError,
    PeriodicityError,
    UnknownIdentifierError,
)

FUNCTIONS = ("sin", "cos", "exp", "sqrt", "abs")
CONSTANTS = {"pi": math.pi, "e": math.e}
VARIABLES = ("x", "y")
BINARY = ("add", "sub", "mul", "div", "pow")

_PREC = {"add": 1, "sub": 1, "mul": 2, "div": 2, "neg": 3, "pow": 4}
_SYMBOL = {"add": "+", "sub": "-", "mul": "*", "div": "/", "pow": "^"}


@dataclass(frozen=True)
class Expr:
    """Immutable expression tree node.

    ``kind`` is one of ``const``, ``var``, ``neg``, ``add``, ``sub``, ``mul``,
    ``div``, ``pow`` or a function name from :data:`FUNCTIONS`.
    """

    kind: str
    args: tuple = ()
    value: float = 0.0
    name: str = ""

    def __post_init__(self):
        arity = {"const": 0, "var": 0, "neg": 1}.get(self.kind)
        if arity is None:
            arity = 2 if self.kind in BINARY else 1 if self.kind in FUNCTIONS else None
        if arity is None:
            raise ValueError(f"unknown node kind {self.kind!r}")
        if len(self.args) != arity:
            raise ValueError(f"{self.kind} node needs {arity} children, got {len(self.args)}")
        if self.kind == "var" and self.name not in VARIABLES:
            raise ValueError(f"unknown variable {self.name!r}")

    def __str__(self):
        return to_text(self)

    @property
    def is_const(self):
        return self.kind == "const"

    def variables(self):
        if self.kind == "var":
            return {self.name}
        out = set()
        for a in self.args:
            out |= a.variables()
        return out


def const(v, name=""):
    return Expr("const", value=float(v), name=name)


def var(name):
    return Expr("var", name=name)


ZERO = const(0.0)
ONE = const(1.0)


# --------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<id>[A-Za-z_]\w*)|(?P<op>\*\*|[-+*/^(),]))"
)


def _tokenize(text):
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", n))
    return tokens


class _Parser:
    def __init__(self, text):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, op):
        kind, val, off = self.take()
        if val != op or kind != "op":
            what = "end of input" if kind == "end" else repr(val)
            raise ExprSyntaxError(f"expected {op!r}, found {what}", off)

    def parse(self):
        node = self.expr()
        kind, val, off = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {val!r}", off)
        return node

    def expr(self):
        node = self.term()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "+-":
                self.take()
                node = Expr("add" if val == "+" else "sub", (node, self.term()))
            else:
                return node

    def term(self):
        node = self.unary()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in ("*", "/"):
                self.take()
                node = Expr("mul" if val == "*" else "div", (node, self.unary()))
            else:
                return node

    def unary(self):
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.take()
            return Expr("neg", (self.unary(),))
        if kind == "op" and val == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        kind, val, _ = self.peek()
        if kind == "op" and val in ("^", "**"):
            self.take()
            return Expr("pow", (base, self.unary()))
        return base

    def atom(self):
        kind, val, off = self.take()
        if kind == "num":
            return const(float(val))
        if kind == "id":
            nxt = self.peek()
            if nxt[0] == "op" and nxt[1] == "(":
                if val not in FUNCTIONS:
                    raise UnknownIdentifierError(val, off)
                self.take()
                args = [self.expr()]
                while self.peek()[0] == "op" and self.peek()[1] == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != 1:
                    raise ArityError(val, len(args), off)
                return Expr(val, (args[0],))
            if val in VARIABLES:
                return var(val)
            if val in CONSTANTS:
                return const(CONSTANTS[val], name=val)
            if val in FUNCTIONS:
                raise ArityError(val, 0, off)
            raise UnknownIdentifierError(val, off)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        what = "end of input" if kind == "end" else f"token {val!r}"
        raise ExprSyntaxError(f"unexpected {what}", off)


def parse(text: str) -> Expr:
    """Parse profile text into an expression tree.

    Raises :class:`ExprSyntaxError` (with ``offset``), :class:`UnknownIdentifierError`
    or :class:`ArityError`.
    """
    return _Parser(str(text)).parse()


def as_expr(obj) -> Expr:
    if isinstance(obj, Expr):
        return obj
    if isinstance(obj, (int, float)):
        return const(obj)
    return parse(obj)


# --------------------------------------------------------------------------
# printing


def _fmt_const(node):
    if node.name:
        return node.name
    v = node.value
    if math.isfinite(v) and v == int(v) and abs(v) < 1e15:
        s = str(int(v))
    else:
        s = repr(v)
    return f"({s})" if v < 0 or s.startswith("-") else s


def to_text(node: Expr) -> str:
    """Render with the minimum parentheses needed for an identical re-parse."""
    k = node.kind
    if k == "const":
        return _fmt_const(node)
    if k == "var":
        return node.name
    if k in FUNCTIONS:
        return f"{k}({to_text(node.args[0])})"
    if k == "neg":
        (a,) = node.args
        s = to_text(a)
        return f"-({s})" if _PREC.get(a.kind, 9) < _PREC["neg"] else f"-{s}"
    a, b = node.args
    p = _PREC[k]
    sa, sb = to_text(a), to_text(b)
    if k == "pow":
        # base must bind tighter than ^; exponent may be a unary minus
        if _PREC.get(a.kind, 9) <= p or (a.kind == "const" and a.value < 0):
            sa = f"({sa})"
        if _PREC.get(b.kind, 9) < _PREC["neg"]:
            sb = f"({sb})"
        return f"{sa}^{sb}"
    if _PREC.get(a.kind, 9) < p:
        sa = f"({sa})"
    # left-associative: right operand of the same level needs parentheses
    if _PREC.get(b.kind, 9) <= p:
        sb = f"({sb})"
    return f"{sa} {_SYMBOL[k]} {sb}"


# --------------------------------------------------------------------------
# evaluation


def evaluate(node: Expr, x=0.0, y=0.0):
    """Evaluate ``node`` at ``(x, y)``; arrays broadcast.

    Raises :class:`ExprDomainError` naming the offending subexpression when a
    primitive leaves its domain anywhere in the input.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    out = _eval(node, x, y)
    shape = np.broadcast_shapes(x.shape, y.shape)
    out = np.broadcast_to(out, shape)
    if out.ndim == 0:
        return float(out)
    return np.array(out)


def _eval(node, x, y):
    k = node.kind
    if k == "const":
        return np.float64(node.value)
    if k == "var":
        return x if node.name == "x" else y
    if k == "neg":
        return -_eval(node.args[0], x, y)
    if k in FUNCTIONS:
        u = _eval(node.args[0], x, y)
        if k == "sqrt":
            if np.any(u < 0):
                raise ExprDomainError("sqrt of negative value", to_text(node))
            return np.sqrt(u)
        if k == "exp":
            with np.errstate(over="ignore"):
                r = np.exp(u)
            if not np.all(np.isfinite(r)):
                raise ExprDomainError("exp overflow", to_text(node))
            return r
        return {"sin": np.sin, "cos": np.cos, "abs": np.abs}[k](u)
    a = _eval(node.args[0], x, y)
    b = _eval(node.args[1], x, y)
    if k == "add":
        return a + b
    if k == "sub":
        return a - b
    if k == "mul":
        return a * b
    if k == "div":
        if np.any(b == 0):
            raise ExprDomainError("division by zero", to_text(node))
        return a / b
    # pow
    a_arr, b_arr = np.broadcast_arrays(a, b)
    bad_neg = (a_arr < 0) & (b_arr != np.round(b_arr))
    bad_zero = (a_arr == 0) & (b_arr < 0)
    if np.any(bad_neg) or np.any(bad_zero):
        raise ExprDomainError("power outside real domain", to_text(node))
    with np.errstate(over="ignore"):
        r = np.power(a, b)
    if not np.all(np.isfinite(r)):
        raise ExprDomainError("power overflow", to_text(node))
    return r


def compile_expr(node: Expr):
    """Return a vectorised callable ``f(x, y)`` for ``node``."""
    node = as_expr(node)

    def f(x=0.0, y=0.0):
        return evaluate(node, x, y)

    f.expr = node
    return f


# --------------------------------------------------------------------------
# symbolic algebra (constant folding only)


def _is(node, v):
    return node.kind == "const" and node.value == v


def add(a, b):
    if a.is_const and b.is_const:
        return const(a.value + b.value)
    if _is(a, 0):
        return b
    if _is(b, 0):
        return a
    return Expr("add", (a, b))


def sub(a, b):
    if a.is_const and b.is_const:
        return const(a.value - b.value)
    if _is(b, 0):
        return a
    if _is(a, 0):
        return neg(b)
    return Expr("sub", (a, b))


def mul(a, b):
    if a.is_const and b.is_const:
        return const(a.value * b.value)
    if _is(a, 0) or _is(b, 0):
        return ZERO
    if _is(a, 1):
        return b
    if _is(b, 1):
        return a
    if _is(a, -1):
        return neg(b)
    if _is(b, -1):
        return neg(a)
    return Expr("mul", (a, b))


def div(a, b):
    if _is(b, 0):
        raise ExprDomainError("division by zero", to_text(Expr("div", (a, b))))
    if a.is_const and b.is_const:
        return const(a.value / b.value)
    if _is(a, 0):
        return ZERO
    if _is(b, 1):
        return a
    return Expr("div", (a, b))


def neg(a):
    if a.is_const:
        return const(-a.value)
    if a.kind == "neg":
        return a.args[0]
    return Expr("neg", (a,))


def power(a, b):
    if a.is_const and b.is_const:
        return const(a.value ** b.value)
    if _is(b, 1):
        return a
    if _is(b, 0):
        return ONE
    return Expr("pow", (a, b))


def fn(name, a):
    if a.is_const and name != "sqrt" or (a.is_const and a.value >= 0):
        return const(evaluate(Expr(name, (a,))))
    return Expr(name, (a,))


def deriv(node: Expr, wrt: str) -> Expr:
    """Exact symbolic derivative with respect to ``x`` or ``y``.

    ``abs(u)`` differentiates to ``u' * u / abs(u)`` so that evaluating the
    derivative where ``u == 0`` raises :class:`ExprDomainError`; powers with a
    variable exponent and a variable base raise :class:`NonDifferentiableError`.
    """
    if wrt not in VARIABLES:
        raise ValueError(f"cannot differentiate with respect to {wrt!r}")
    node = as_expr(node)
    return _d(node, wrt)


def _d(node, v):
    k = node.kind
    if k == "const":
        return ZERO
    if k == "var":
        return ONE if node.name == v else ZERO
    if k == "neg":
        return neg(_d(node.args[0], v))
    if k in FUNCTIONS:
        u = node.args[0]
        du = _d(u, v)
        if _is(du, 0):
            return ZERO
        if k == "sin":
            return mul(fn("cos", u), du)
        if k == "cos":
            return neg(mul(fn("sin", u), du))
        if k == "exp":
            return mul(node, du)
        if k == "sqrt":
            return div(du, mul(const(2.0), node))
        if k == "abs":
            return mul(du, div(u, node))
    a, b = node.args
    da, db = _d(a, v), _d(b, v)
    if k == "add":
        return add(da, db)
    if k == "sub":
        return sub(da, db)
    if k == "mul":
        return add(mul(da, b), mul(a, db))
    if k == "div":
        if _is(db, 0):
            return div(da, b)
        return div(sub(mul(da, b), mul(a, db)), power(b, const(2.0)))
    # pow
    if _is(db, 0):
        if _is(da, 0):
            return ZERO
        return mul(mul(b, power(a, sub(b, ONE))), da)
    if _is(da, 0) and a.is_const:
        if a.value <= 0:
            raise NonDifferentiableError(f"{to_text(node)}: non-positive base with variable exponent")
        return mul(mul(node, const(math.log(a.value))), db)
    raise NonDifferentiableError(f"{to_text(node)}: variable base and exponent")


# --------------------------------------------------------------------------
# profile specification


@dataclass(frozen=True)
class Bounds:
    """Sampled bounds of a profile plus Lipschitz-margined safe versions."""

    b1: float
    G0: float
    G1: float
    M: float
    b1_safe: float
    G0_safe: float
    G1_safe: float
    periodicity_defect: float
    grid_density: int


@dataclass(frozen=True)
class ProfileSpec:
    """Lower boundary ``b(x)``, roof ``G(x, y)`` (``L``-periodic in ``y``)."""

    b_expr: Expr
    G_expr: Expr
    L: float = 1.0
    bounds: Bounds | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.L > 0:
            raise ValueError(f"period L must be positive, got {self.L}")
        if "y" in self.b_expr.variables():
            raise ValueError("b must depend on x only")

    @classmethod
    def from_text(cls, b="0", G="1", L=1.0):
        return cls(as_expr(b), as_expr(G), float(L))

    @cached_property
    def Gy_expr(self):
        return deriv(self.G_expr, "y")

    @cached_property
    def Gx_expr(self):
        return deriv(self.G_expr, "x")

    def b(self, x):
        return evaluate(self.b_expr, x, 0.0)

    def G(self, x, y):
        return evaluate(self.G_expr, x, y)

    def Gy(self, x, y):
        return evaluate(self.Gy_expr, x, y)

    def Gx(self, x, y):
        return evaluate(self.Gx_expr, x, y)

    @property
    def y_only(self):
        """True when neither b nor G depends on x (purely periodic case)."""
        return "x" not in self.G_expr.variables() and "x" not in self.b_expr.variables()

    def with_bounds(self, grid_density=512):
        return ProfileSpec(self.b_expr, self.G_expr, self.L, validate(self, grid_density))


PERIODICITY_TOL = 1e-12


def validate(profile: ProfileSpec, grid_density: int = 512) -> Bounds:
    """Sample b, G and |dG/dy| on ``[0,1] x [0,L]`` and check the hypotheses.

    Raises :class:`HypothesisViolation` if ``b < 0`` somewhere or ``inf G <= 0``
    (sampled, or after the Lipschitz safety margin), and
    :class:`PeriodicityError` if ``|G(x, y+L) - G(x, y)| > 1e-12``.
    """
    n = int(grid_density)
    if n < 2:
        raise ValueError("grid_density must be >= 2")
    xs = np.linspace(0.0, 1.0, n + 1)
    ys = np.linspace(0.0, profile.L, n + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    G = profile.G(X, Y)
    b = np.broadcast_to(profile.b(xs), xs.shape)
    Gy = np.abs(profile.Gy(X, Y))

    defect = float(np.max(np.abs(profile.G(X, Y + profile.L) - G)))
    if defect > PERIODICITY_TOL:
        raise PeriodicityError(f"G is not {profile.L}-periodic in y: defect {defect:.3e}")

    hx, hy = xs[1] - xs[0], ys[1] - ys[0]
    lip_x = np.max(np.abs(np.diff(G, axis=0))) / hx
    lip_y = np.max(np.abs(np.diff(G, axis=1))) / hy
    lip_b = np.max(np.abs(np.diff(b))) / hx
    margin_G = 0.5 * (lip_x * hx + lip_y * hy)

    bounds = Bounds(
        b1=float(b.max()),
        G0=float(G.min()),
        G1=float(G.max()),
        M=float(Gy.max()),
        b1_safe=float(b.max() + 0.5 * lip_b * hx),
        G0_safe=float(G.min() - margin_G),
        G1_safe=float(G.max() + margin_G),
        periodicity_defect=defect,
        grid_density=n,
    )
    if b.min() < 0:
        raise HypothesisViolation(f"b takes negative value {b.min():.6g}")
    if bounds.G0 <= 0:
        raise HypothesisViolation(f"G is not bounded below by a positive constant (min {bounds.G0:.6g})")
    if bounds.G0_safe <= 0:
        raise HypothesisViolation(
            f"G min {bounds.G0:.6g} is within the sampling margin {margin_G:.3g} of zero"
        )
    return bounds
