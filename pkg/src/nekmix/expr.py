"""Expression trees for action-dependent coefficient functions.

Coefficients of the trigonometric fields are small closed-form expressions in
the actions ``I1..In``.  They are differentiated symbolically (so gradients
and Hessians are exact), evaluated vectorially on point arrays, printed back
to the config grammar, and emitted as scalar Python source for the compiled
flow kernels.

Grammar accepted by :func:`parse`::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('-' | '+') unary | power
    power  := atom (('^' | '**') unary)?        # exponent must be constant
    atom   := NUMBER | NAME | NAME '(' args ')' | '(' expr ')'
    args   := arg (',' arg)*
    arg    := expr | '[' expr (',' expr)* ']'

Names: ``I1..In`` (actions, 1-based), ``pi``, ``e``.  Functions: ``exp``,
``sin``, ``cos``, ``log``, ``sqrt``, ``bump([c1,..,cn], w)`` (C-infinity bump
with support radius ``w`` and peak value 1), ``gauss([c1,..,cn], w)``
(``exp(-|I-c|^2 / (2 w^2))``) and ``bumpprofile(d, s)`` (d-th derivative of
the bump profile, produced by differentiation).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import Polynomial

__all__ = [
    "Expr",
    "Const",
    "Var",
    "Add",
    "Mul",
    "Pow",
    "Call",
    "Bump",
    "ExprParseError",
    "const",
    "var",
    "add",
    "mul",
    "power",
    "call",
    "bump",
    "gauss",
    "diff",
    "evaluate",
    "split_complex",
    "to_source",
    "parse",
    "support_box",
]

ZERO_TOL = 0.0
# exp(1 - u) underflows for u beyond this; polynomial factors must not turn 0*inf into nan
_BUMP_U_MAX = 700.0


class Expr:
    """Base class; instances are immutable and shared freely between trees."""

    __slots__ = ("_dcache", "__weakref__")

    def __init__(self):
        self._dcache = {}

    # operator sugar, used heavily when building fields in code
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(const(-1.0), _lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), mul(const(-1.0), self))

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, power(_lift(other), -1.0))

    def __rtruediv__(self, other):
        return mul(_lift(other), power(self, -1.0))

    def __neg__(self):
        return mul(const(-1.0), self)

    def __pow__(self, p):
        return power(self, float(p))

    def __str__(self):
        return to_string(self)

    def __repr__(self):
        return f"Expr({to_string(self)!r})"


class Const(Expr):
    __slots__ = ("value",)

    def __init__(self, value):
        super().__init__()
        value = complex(value)
        self.value = value.real if value.imag == 0 else value


class Var(Expr):
    __slots__ = ("index",)

    def __init__(self, index: int):
        super().__init__()
        self.index = int(index)


class Add(Expr):
    __slots__ = ("args",)

    def __init__(self, args):
        super().__init__()
        self.args = tuple(args)


class Mul(Expr):
    __slots__ = ("args",)

    def __init__(self, args):
        super().__init__()
        self.args = tuple(args)


class Pow(Expr):
    __slots__ = ("base", "exponent")

    def __init__(self, base: Expr, exponent: float):
        super().__init__()
        self.base = base
        self.exponent = float(exponent)


class Call(Expr):
    __slots__ = ("fn", "arg")

    FUNCTIONS = ("exp", "sin", "cos", "log")

    def __init__(self, fn: str, arg: Expr):
        super().__init__()
        if fn not in self.FUNCTIONS:
            raise ValueError(f"unknown function {fn!r}")
        self.fn = fn
        self.arg = arg


class Bump(Expr):
    """``order``-th derivative of ``psi(s) = exp(1 - 1/(1 - s))`` (0 for s >= 1).

    ``center``/``width`` are kept only as metadata for printing and support
    bounds when the node was built by :func:`bump`.
    """

    __slots__ = ("arg", "order", "center", "width")

    def __init__(self, arg: Expr, order: int = 0, center=None, width=None):
        super().__init__()
        self.arg = arg
        self.order = int(order)
        self.center = None if center is None else tuple(float(c) for c in center)
        self.width = None if width is None else float(width)


def _lift(x) -> Expr:
    if isinstance(x, Expr):
        return x
    return const(x)


# ---------------------------------------------------------------------------
# constructors with light simplification


def const(value) -> Const:
    return Const(value)


def var(index: int) -> Var:
    return Var(index)


def _is_const(e: Expr, value=None) -> bool:
    if not isinstance(e, Const):
        return False
    return value is None or e.value == value


def add(*terms: Expr) -> Expr:
    flat = []
    total = 0.0
    for t in terms:
        t = _lift(t)
        if isinstance(t, Add):
            items = t.args
        else:
            items = (t,)
        for s in items:
            if isinstance(s, Const):
                total = total + s.value
            else:
                flat.append(s)
    if total != 0 or not flat:
        flat.append(Const(total))
    if len(flat) == 1:
        return flat[0]
    return Add(flat)


def mul(*factors: Expr) -> Expr:
    flat = []
    coeff = 1.0
    for f in factors:
        f = _lift(f)
        items = f.args if isinstance(f, Mul) else (f,)
        for s in items:
            if isinstance(s, Const):
                coeff = coeff * s.value
            else:
                flat.append(s)
    if coeff == 0:
        return Const(0.0)
    if coeff != 1 or not flat:
        flat.insert(0, Const(coeff))
    if len(flat) == 1:
        return flat[0]
    return Mul(flat)


def power(base: Expr, exponent: float) -> Expr:
    base = _lift(base)
    exponent = float(exponent)
    if exponent == 0.0:
        return Const(1.0)
    if exponent == 1.0:
        return base
    if isinstance(base, Const):
        return Const(base.value ** exponent)
    if isinstance(base, Pow) and float(exponent).is_integer():
        return Pow(base.base, base.exponent * exponent)
    return Pow(base, exponent)


def call(fn: str, arg: Expr) -> Expr:
    arg = _lift(arg)
    if isinstance(arg, Const):
        v = arg.value
        fun = {"exp": np.exp, "sin": np.sin, "cos": np.cos, "log": np.log}[fn]
        return Const(complex(fun(v)) if isinstance(v, complex) else float(fun(v)))
    return Call(fn, arg)


def _radius_sq(center, width) -> Expr:
    terms = []
    for j, c in enumerate(center):
        d = add(var(j), const(-float(c)))
        terms.append(power(d, 2.0))
    return mul(add(*terms), const(1.0 / float(width) ** 2))


def bump(center, width) -> Expr:
    """Smooth compactly supported bump, equal to 1 at ``center``."""
    if width <= 0:
        raise ValueError("bump width must be positive")
    return Bump(_radius_sq(center, width), 0, center=center, width=width)


def gauss(center, width) -> Expr:
    if width <= 0:
        raise ValueError("gauss width must be positive")
    return call("exp", mul(const(-0.5), _radius_sq(center, width)))


# ---------------------------------------------------------------------------
# differentiation


def diff(e: Expr, j: int) -> Expr:
    """Partial derivative with respect to action ``j`` (0-based)."""
    cached = e._dcache.get(j)
    if cached is not None:
        return cached
    out = _diff(e, j)
    e._dcache[j] = out
    return out


def _diff(e: Expr, j: int) -> Expr:
    if isinstance(e, Const):
        return Const(0.0)
    if isinstance(e, Var):
        return Const(1.0 if e.index == j else 0.0)
    if isinstance(e, Add):
        return add(*(diff(a, j) for a in e.args))
    if isinstance(e, Mul):
        terms = []
        for i, a in enumerate(e.args):
            da = diff(a, j)
            if _is_const(da, 0.0):
                continue
            terms.append(mul(*e.args[:i], da, *e.args[i + 1 :]))
        return add(*terms) if terms else Const(0.0)
    if isinstance(e, Pow):
        db = diff(e.base, j)
        if _is_const(db, 0.0):
            return Const(0.0)
        return mul(const(e.exponent), power(e.base, e.exponent - 1.0), db)
    if isinstance(e, Call):
        da = diff(e.arg, j)
        if _is_const(da, 0.0):
            return Const(0.0)
        if e.fn == "exp":
            return mul(e, da)
        if e.fn == "sin":
            return mul(call("cos", e.arg), da)
        if e.fn == "cos":
            return mul(const(-1.0), call("sin", e.arg), da)
        if e.fn == "log":
            return mul(da, power(e.arg, -1.0))
    if isinstance(e, Bump):
        da = diff(e.arg, j)
        if _is_const(da, 0.0):
            return Const(0.0)
        return mul(Bump(e.arg, e.order + 1), da)
    raise TypeError(f"cannot differentiate {type(e).__name__}")


# ---------------------------------------------------------------------------
# evaluation


@lru_cache(maxsize=None)
def _bump_poly(order: int) -> Polynomial:
    # psi^(d)(s) = psi(s) * P_d(u), u = 1/(1-s);  P_{d+1} = u^2 (P_d' - P_d)
    p = Polynomial([1.0])
    u2 = Polynomial([0.0, 0.0, 1.0])
    for _ in range(order):
        p = u2 * (p.deriv() - p)
    return p


def bump_profile(s: np.ndarray, order: int = 0) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = s < 1.0
    if np.any(inside):
        u = 1.0 / (1.0 - s[inside])
        ok = u < _BUMP_U_MAX
        val = np.zeros_like(u)
        uu = u[ok]
        val[ok] = np.exp(1.0 - uu) * _bump_poly(order)(uu)
        out[inside] = val
    return out


def evaluate(e: Expr, points: np.ndarray) -> np.ndarray:
    """Evaluate on ``points`` of shape (m, n); returns shape (m,)."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2:
        raise ValueError("points must have shape (m, n)")
    memo: dict[int, np.ndarray] = {}
    return np.asarray(_eval(e, points, memo)) * np.ones(points.shape[0])


def _eval(e: Expr, X: np.ndarray, memo: dict):
    key = id(e)
    hit = memo.get(key)
    if hit is not None:
        return hit
    if isinstance(e, Const):
        out = e.value
    elif isinstance(e, Var):
        if e.index >= X.shape[1]:
            raise IndexError(f"I{e.index + 1} used but points have dimension {X.shape[1]}")
        out = X[:, e.index]
    elif isinstance(e, Add):
        out = _eval(e.args[0], X, memo)
        for a in e.args[1:]:
            out = out + _eval(a, X, memo)
    elif isinstance(e, Mul):
        out = _eval(e.args[0], X, memo)
        for a in e.args[1:]:
            out = out * _eval(a, X, memo)
    elif isinstance(e, Pow):
        b = _eval(e.base, X, memo)
        p = e.exponent
        if p.is_integer() and p > 0:
            out = b ** int(p)
        elif p == -1.0:
            out = 1.0 / b
        elif p.is_integer():
            out = 1.0 / (b ** int(-p))
        else:
            out = np.power(b, p)
    elif isinstance(e, Call):
        a = _eval(e.arg, X, memo)
        out = {"exp": np.exp, "sin": np.sin, "cos": np.cos, "log": np.log}[e.fn](a)
    elif isinstance(e, Bump):
        s = _eval(e.arg, X, memo)
        s = np.broadcast_to(np.real(s), (X.shape[0],))
        out = bump_profile(s, e.order)
    else:
        raise TypeError(type(e).__name__)
    memo[key] = out
    return out


def is_constant(e: Expr) -> bool:
    if isinstance(e, Const):
        return True
    if isinstance(e, Var):
        return False
    if isinstance(e, (Add, Mul)):
        return all(is_constant(a) for a in e.args)
    if isinstance(e, Pow):
        return is_constant(e.base)
    if isinstance(e, (Call, Bump)):
        return is_constant(e.arg)
    return False


def is_zero(e: Expr) -> bool:
    return isinstance(e, Const) and e.value == 0


# ---------------------------------------------------------------------------
# complex splitting (variables and function arguments are real)


def split_complex(e: Expr) -> tuple[Expr, Expr]:
    """Return (real part, imaginary part) as real-valued expressions."""
    if isinstance(e, Const):
        v = complex(e.value)
        return Const(v.real), Const(v.imag)
    if isinstance(e, Var):
        return e, Const(0.0)
    if isinstance(e, Add):
        parts = [split_complex(a) for a in e.args]
        return add(*(p[0] for p in parts)), add(*(p[1] for p in parts))
    if isinstance(e, Mul):
        re_, im_ = Const(1.0), Const(0.0)
        for a in e.args:
            ar, ai = split_complex(a)
            re_, im_ = (
                add(mul(re_, ar), mul(const(-1.0), im_, ai)),
                add(mul(re_, ai), mul(im_, ar)),
            )
        return re_, im_
    if isinstance(e, Pow):
        br, bi = split_complex(e.base)
        if not is_zero(bi):
            raise ValueError("complex base in power is not supported")
        return power(br, e.exponent), Const(0.0)
    if isinstance(e, Call):
        ar, ai = split_complex(e.arg)
        if not is_zero(ai):
            raise ValueError("complex function arguments are not supported")
        return call(e.fn, ar), Const(0.0)
    if isinstance(e, Bump):
        return e, Const(0.0)
    raise TypeError(type(e).__name__)


# ---------------------------------------------------------------------------
# printing


def to_string(e: Expr) -> str:
    if isinstance(e, Const):
        v = e.value
        if isinstance(v, complex):
            return f"({v.real!r}+{v.imag!r}j)"
        return repr(float(v))
    if isinstance(e, Var):
        return f"I{e.index + 1}"
    if isinstance(e, Add):
        return "(" + " + ".join(to_string(a) for a in e.args) + ")"
    if isinstance(e, Mul):
        return " * ".join(_wrap(a) for a in e.args)
    if isinstance(e, Pow):
        return f"{_wrap(e.base)}^({e.exponent!r})"
    if isinstance(e, Call):
        return f"{e.fn}({to_string(e.arg)})"
    if isinstance(e, Bump):
        if e.order == 0 and e.center is not None:
            c = ", ".join(repr(x) for x in e.center)
            return f"bump([{c}], {e.width!r})"
        return f"bumpprofile({e.order}, {to_string(e.arg)})"
    raise TypeError(type(e).__name__)


def _wrap(e: Expr) -> str:
    s = to_string(e)
    if isinstance(e, Mul):
        return "(" + s + ")"
    return s


def to_source(e: Expr, names=None) -> str:
    """Scalar Python source for a *real* expression (used by the JIT kernels).

    ``names[j]`` is the variable name bound to action ``j``.
    """
    if isinstance(e, Const):
        if isinstance(e.value, complex):
            raise ValueError("to_source needs a real expression; use split_complex first")
        return repr(float(e.value))
    if isinstance(e, Var):
        return names[e.index] if names is not None else f"I{e.index}"
    if isinstance(e, Add):
        return "(" + " + ".join(to_source(a, names) for a in e.args) + ")"
    if isinstance(e, Mul):
        return "(" + " * ".join(to_source(a, names) for a in e.args) + ")"
    if isinstance(e, Pow):
        p = e.exponent
        b = to_source(e.base, names)
        if p.is_integer() and p > 0:
            return f"({b} ** {int(p)})"
        if p.is_integer():
            return f"(1.0 / ({b} ** {int(-p)}))"
        return f"({b} ** {p!r})"
    if isinstance(e, Call):
        return f"math.{e.fn}({to_source(e.arg, names)})"
    if isinstance(e, Bump):
        return f"_bump({to_source(e.arg, names)}, {e.order})"
    raise TypeError(type(e).__name__)


def support_box(e: Expr, dim: int):
    """Bounding box ``(lo, hi)`` of the support, or ``None`` if unbounded.

    Only bump factors bound a support; the result is conservative.
    """
    if isinstance(e, Const):
        if e.value == 0:
            return (np.full(dim, np.inf), np.full(dim, -np.inf))
        return None
    if isinstance(e, Bump):
        if e.center is None:
            return None
        c = np.asarray(e.center)
        return (c - e.width, c + e.width)
    if isinstance(e, Mul):
        box = None
        for a in e.args:
            b = support_box(a, dim)
            if b is None:
                continue
            box = b if box is None else (np.maximum(box[0], b[0]), np.minimum(box[1], b[1]))
        return box
    if isinstance(e, Add):
        boxes = [support_box(a, dim) for a in e.args]
        if any(b is None for b in boxes):
            return None
        lo = np.min([b[0] for b in boxes], axis=0)
        hi = np.max([b[1] for b in boxes], axis=0)
        return (lo, hi)
    if isinstance(e, Pow) and e.exponent > 0:
        return support_box(e.base, dim)
    return None


# ---------------------------------------------------------------------------
# parsing


class ExprParseError(ValueError):
    """Parse failure carrying the 0-based character position."""

    def __init__(self, message: str, position: int, text: str):
        self.message = message
        self.position = position
        self.text = text
        caret = " " * position + "^"
        super().__init__(f"{message} at column {position + 1}\n  {text}\n  {caret}")


_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^(),\[\]]))"
)


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            start = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ExprParseError(f"unexpected character {text[start]!r}", start, text)
        kind = m.lastgroup
        start = m.start(kind)
        toks.append(_Tok(kind, m.group(kind), start))
        pos = m.end()
    toks.append(_Tok("end", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str, dim: int | None):
        self.text = text
        self.dim = dim
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def take(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, text: str) -> _Tok:
        tok = self.peek()
        if tok.text != text:
            found = "end of input" if tok.kind == "end" else repr(tok.text)
            raise ExprParseError(f"expected {text!r}, found {found}", tok.pos, self.text)
        return self.take()

    def error(self, msg: str, tok: _Tok | None = None):
        tok = tok or self.peek()
        raise ExprParseError(msg, tok.pos, self.text)

    def parse(self) -> Expr:
        e = self.expr()
        if self.peek().kind != "end":
            self.error(f"unexpected {self.peek().text!r}")
        return e

    def expr(self) -> Expr:
        e = self.term()
        while self.peek().text in ("+", "-"):
            op = self.take().text
            rhs = self.term()
            e = add(e, rhs) if op == "+" else add(e, mul(const(-1.0), rhs))
        return e

    def term(self) -> Expr:
        e = self.unary()
        while self.peek().text in ("*", "/"):
            op = self.take().text
            rhs = self.unary()
            e = mul(e, rhs) if op == "*" else mul(e, power(rhs, -1.0))
        return e

    def unary(self) -> Expr:
        if self.peek().text == "-":
            self.take()
            return mul(const(-1.0), self.unary())
        if self.peek().text == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.peek().text in ("^", "**"):
            tok = self.take()
            exp_start = self.peek()
            ex = self.unary()
            if not isinstance(ex, Const) or isinstance(ex.value, complex):
                self.error("exponent must be a real constant", exp_start)
            del tok
            return power(base, float(ex.value))
        return base

    def atom(self) -> Expr:
        tok = self.peek()
        if tok.kind == "num":
            self.take()
            return const(float(tok.text))
        if tok.text == "(":
            self.take()
            e = self.expr()
            self.expect(")")
            return e
        if tok.kind == "name":
            self.take()
            if self.peek().text == "(":
                return self.function(tok)
            return self.name(tok)
        found = "end of input" if tok.kind == "end" else repr(tok.text)
        self.error(f"expected a value, found {found}")

    def name(self, tok: _Tok) -> Expr:
        if tok.text == "pi":
            return const(math.pi)
        if tok.text == "e":
            return const(math.e)
        m = re.fullmatch(r"I([1-9][0-9]*)", tok.text)
        if m:
            j = int(m.group(1)) - 1
            if self.dim is not None and j >= self.dim:
                self.error(f"{tok.text} exceeds dimension {self.dim}", tok)
            return var(j)
        self.error(f"unknown name {tok.text!r}", tok)

    def function(self, tok: _Tok) -> Expr:
        fn = tok.text
        self.expect("(")
        args = [self.arg()]
        while self.peek().text == ",":
            self.take()
            args.append(self.arg())
        self.expect(")")
        if fn in ("exp", "sin", "cos", "log", "sqrt"):
            if len(args) != 1 or isinstance(args[0], list):
                self.error(f"{fn} takes one scalar argument", tok)
            if fn == "sqrt":
                return power(args[0], 0.5)
            return call(fn, args[0])
        if fn in ("bump", "gauss"):
            if len(args) != 2 or not isinstance(args[0], list) or isinstance(args[1], list):
                self.error(f"{fn} expects ([center...], width)", tok)
            center = []
            for c in args[0]:
                if not isinstance(c, Const) or isinstance(c.value, complex):
                    self.error(f"{fn} center must be real constants", tok)
                center.append(float(c.value))
            w = args[1]
            if not isinstance(w, Const) or isinstance(w.value, complex) or w.value <= 0:
                self.error(f"{fn} width must be a positive constant", tok)
            if self.dim is not None and len(center) != self.dim:
                self.error(f"{fn} center has {len(center)} entries, expected {self.dim}", tok)
            return (bump if fn == "bump" else gauss)(center, float(w.value))
        if fn == "bumpprofile":
            if len(args) != 2 or not isinstance(args[0], Const):
                self.error("bumpprofile expects (order, expr)", tok)
            return Bump(args[1], int(args[0].value))
        self.error(f"unknown function {fn!r}", tok)

    def arg(self):
        if self.peek().text == "[":
            self.take()
            items = [self.expr()]
            while self.peek().text == ",":
                self.take()
                items.append(self.expr())
            self.expect("]")
            return items
        return self.expr()


def parse(text: str, dim: int | None = None) -> Expr:
    """Parse the config expression grammar; errors carry character positions."""
    if not isinstance(text, str):
        text = repr(float(text))
    return _Parser(text, dim).parse()
