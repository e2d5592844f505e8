"""Expression trees for time-periodic, moment-dependent coefficients.

An expression is a polynomial in the coordinates ``x1..x3`` whose coefficients
may contain the time atoms ``sin(k*w*t)`` / ``cos(k*w*t)`` (``w = 2*pi/T``,
``k`` a nonzero integer) and moment observables ``M[a1,...,ad]`` standing for
the weighted empirical moment ``sum_i w_i prod_j x_ij**aj`` of the current
particle cloud.

Grammar (Python infix syntax)::

    expr  := number | pi | x1..x3 | M[a1,..,ad] | sin(arg) | cos(arg)
           | sqrt(const) | expr (+ - *) expr | expr / const
           | expr ** n | expr ^ n | -expr
    arg   := c*w*t | c*t      (c must make the frequency an integer multiple of w)

Lyapunov functionals use the same grammar with ``y1..y3`` in place of the
coordinates.
"""
from __future__ import annotations

import ast
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Mapping

import numpy as np

MAX_POWER = 6
MAX_OBS_DEGREE = 4
MAX_DIM = 3
TWO_PI = 2.0 * math.pi


class ExprError(ValueError):
    """Malformed expression or violated degree/periodicity bound."""


class ExprEvalError(ArithmeticError):
    """Raised when an atom evaluates to a non-finite value."""

    def __init__(self, atom: "Expr", value):
        self.atom = atom
        self.value = value
        super().__init__(f"non-finite value {value!r} for atom {to_string(atom)}")


class Expr:
    """Base class of expression nodes. Nodes are immutable and hashable."""

    __slots__ = ()

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, n):
        return power(self, n)

    def __str__(self):
        return to_string(self)


@dataclass(frozen=True)
class Const(Expr):
    value: float


@dataclass(frozen=True)
class Coord(Expr):
    index: int  # 0-based


@dataclass(frozen=True)
class Obs(Expr):
    alpha: tuple


@dataclass(frozen=True)
class Trig(Expr):
    kind: str  # "sin" | "cos"
    k: int
    period: float

    @property
    def omega(self) -> float:
        return TWO_PI * self.k / self.period


@dataclass(frozen=True)
class Add(Expr):
    terms: tuple


@dataclass(frozen=True)
class Mul(Expr):
    factors: tuple


@dataclass(frozen=True)
class Pow(Expr):
    base: Expr
    n: int


ZERO = Const(0.0)
ONE = Const(1.0)


def _lift(v) -> Expr:
    if isinstance(v, Expr):
        return v
    if isinstance(v, (int, float, Fraction)):
        return Const(float(v))
    raise TypeError(f"cannot use {type(v).__name__} in an expression")


def const(v: float) -> Const:
    return Const(float(v))


def coord(i: int) -> Coord:
    return Coord(i)


def obs(*alpha: int) -> Obs:
    return Obs(tuple(int(a) for a in alpha))


def sin(k: int, period: float) -> Trig:
    return Trig("sin", int(k), float(period))


def cos(k: int, period: float) -> Trig:
    return Trig("cos", int(k), float(period))


# --- smart constructors -----------------------------------------------------

def add(*terms: Expr) -> Expr:
    flat = []
    c = 0.0
    for t in terms:
        parts = t.terms if isinstance(t, Add) else (t,)
        for p in parts:
            if isinstance(p, Const):
                c += p.value
            else:
                flat.append(p)
    if c != 0.0 or not flat:
        flat.append(Const(c))
    if len(flat) == 1:
        return flat[0]
    return Add(tuple(flat))


def mul(*factors: Expr) -> Expr:
    flat = []
    c = 1.0
    for f in factors:
        parts = f.factors if isinstance(f, Mul) else (f,)
        for p in parts:
            if isinstance(p, Const):
                c *= p.value
            else:
                flat.append(p)
    if c == 0.0:
        return ZERO
    if c != 1.0 or not flat:
        flat.insert(0, Const(c))
    if len(flat) == 1:
        return flat[0]
    return Mul(tuple(flat))


def neg(e: Expr) -> Expr:
    return mul(Const(-1.0), e)


def power(base: Expr, n: int) -> Expr:
    if int(n) != n or n < 0:
        raise ExprError(f"exponent must be a nonnegative integer, got {n!r}")
    n = int(n)
    if n > MAX_POWER:
        raise ExprError(f"exponent {n} exceeds the bound {MAX_POWER}")
    if n == 0:
        return ONE
    if n == 1:
        return base
    if isinstance(base, Const):
        return Const(base.value ** n)
    return Pow(base, n)


# --- structural queries -----------------------------------------------------

def atoms(e: Expr) -> set:
    if isinstance(e, (Const, Coord, Obs, Trig)):
        return {e}
    if isinstance(e, Add):
        return set().union(*(atoms(t) for t in e.terms))
    if isinstance(e, Mul):
        return set().union(*(atoms(f) for f in e.factors))
    if isinstance(e, Pow):
        return atoms(e.base)
    raise TypeError(e)


def observables(e: Expr) -> set:
    return {a.alpha for a in atoms(e) if isinstance(a, Obs)}


def degree(e: Expr) -> int:
    """Polynomial degree in the coordinates (an upper bound, no cancellation)."""
    if isinstance(e, Coord):
        return 1
    if isinstance(e, (Const, Obs, Trig)):
        return 0
    if isinstance(e, Add):
        return max(degree(t) for t in e.terms)
    if isinstance(e, Mul):
        return sum(degree(f) for f in e.factors)
    if isinstance(e, Pow):
        return e.n * degree(e.base)
    raise TypeError(e)


def validate(e: Expr, d: int, period: float, allow_obs: bool = True, max_degree: int = MAX_POWER) -> None:
    """Check dimension, periodicity and degree bounds; raise ExprError otherwise."""
    for a in atoms(e):
        if isinstance(a, Coord) and not 0 <= a.index < d:
            raise ExprError(f"coordinate x{a.index + 1} out of range for d={d}")
        if isinstance(a, Obs):
            if not allow_obs:
                raise ExprError("observable atoms are not allowed here")
            if len(a.alpha) != d or min(a.alpha) < 0:
                raise ExprError(f"multi-index {a.alpha} does not match d={d}")
            if sum(a.alpha) > MAX_OBS_DEGREE:
                raise ExprError(f"observable degree {sum(a.alpha)} exceeds {MAX_OBS_DEGREE}")
        if isinstance(a, Trig):
            ratio = a.k * period / a.period
            if a.k == 0 or abs(ratio - round(ratio)) > 1e-9:
                raise ExprError(f"time atom {to_string(a)} is not {period}-periodic")
        if isinstance(a, Const) and not math.isfinite(a.value):
            raise ExprError("non-finite constant")
    if degree(e) > max_degree:
        raise ExprError(f"polynomial degree {degree(e)} exceeds {max_degree}")


# --- differentiation --------------------------------------------------------

def diff(e: Expr, var) -> Expr:
    """Symbolic derivative. ``var`` is a coordinate index (int) or ``"t"``."""
    if isinstance(e, (Const, Obs)):
        return ZERO
    if isinstance(e, Coord):
        return ONE if var == e.index else ZERO
    if isinstance(e, Trig):
        if var != "t":
            return ZERO
        if e.kind == "sin":
            return mul(Const(e.omega), Trig("cos", e.k, e.period))
        return mul(Const(-e.omega), Trig("sin", e.k, e.period))
    if isinstance(e, Add):
        return add(*(diff(t, var) for t in e.terms))
    if isinstance(e, Mul):
        out = []
        for i, f in enumerate(e.factors):
            df = diff(f, var)
            if df == ZERO:
                continue
            out.append(mul(*e.factors[:i], df, *e.factors[i + 1:]))
        return add(*out) if out else ZERO
    if isinstance(e, Pow):
        db = diff(e.base, var)
        if db == ZERO:
            return ZERO
        return mul(Const(float(e.n)), power(e.base, e.n - 1), db)
    raise TypeError(e)


def substitute_obs(e: Expr, values: Mapping[tuple, float]) -> Expr:
    """Replace observable atoms by constants."""
    if isinstance(e, Obs):
        return Const(float(values[e.alpha]))
    if isinstance(e, Add):
        return add(*(substitute_obs(t, values) for t in e.terms))
    if isinstance(e, Mul):
        return mul(*(substitute_obs(f, values) for f in e.factors))
    if isinstance(e, Pow):
        return power(substitute_obs(e.base, values), e.n)
    return e


# --- evaluation -------------------------------------------------------------

def trig_value(a: Trig, t: float) -> float:
    # reduce by the atom's own period so t and t+T give the same argument
    tau = math.fmod(t, a.period)
    angle = TWO_PI * a.k * (tau / a.period)
    return math.sin(angle) if a.kind == "sin" else math.cos(angle)


Compiled = Callable[[float, np.ndarray, Mapping[tuple, float]], "np.ndarray | float"]


def compile_expr(e: Expr) -> Compiled:
    """Build a fast evaluator ``f(t, X, obs)`` with X of shape (n, d).

    Returns either an (n,) array or a Python float when the expression does
    not depend on the coordinates. Only +, * and repeated multiplication are
    applied to arrays, so results do not depend on how X is chunked.
    """
    if isinstance(e, Const):
        v = e.value
        return lambda t, X, o: v
    if isinstance(e, Coord):
        i = e.index
        return lambda t, X, o: X[:, i]
    if isinstance(e, Obs):
        a = e.alpha
        return lambda t, X, o: o[a]
    if isinstance(e, Trig):
        return lambda t, X, o: trig_value(e, t)
    if isinstance(e, Add):
        fs = [compile_expr(t) for t in e.terms]

        def f_add(t, X, o):
            acc = fs[0](t, X, o)
            for g in fs[1:]:
                acc = acc + g(t, X, o)
            return acc
        return f_add
    if isinstance(e, Mul):
        fs = [compile_expr(t) for t in e.factors]

        def f_mul(t, X, o):
            acc = fs[0](t, X, o)
            for g in fs[1:]:
                acc = acc * g(t, X, o)
            return acc
        return f_mul
    if isinstance(e, Pow):
        fb = compile_expr(e.base)
        n = e.n

        def f_pow(t, X, o):
            b = fb(t, X, o)
            acc = b
            for _ in range(n - 1):
                acc = acc * b
            return acc
        return f_pow
    raise TypeError(e)


def evaluate(e: Expr, t: float, x, obs_values: Mapping[tuple, float] | None = None) -> float:
    """Evaluate at a single point, checking every atom for finiteness."""
    x = np.asarray(x, dtype=float).reshape(-1)
    obs_values = obs_values or {}
    if not math.isfinite(t):
        raise ExprEvalError(Const(t), t)
    for a in atoms(e):
        if isinstance(a, Coord):
            if a.index >= x.size:
                raise ExprError(f"x{a.index + 1} requested but point has dimension {x.size}")
            if not math.isfinite(x[a.index]):
                raise ExprEvalError(a, x[a.index])
        elif isinstance(a, Obs):
            if a.alpha not in obs_values:
                raise ExprError(f"missing observable {a.alpha}")
            if not math.isfinite(obs_values[a.alpha]):
                raise ExprEvalError(a, obs_values[a.alpha])
    val = compile_expr(e)(t, x.reshape(1, -1), obs_values)
    val = float(np.asarray(val).reshape(-1)[0])
    if not math.isfinite(val):
        raise ExprEvalError(e, val)
    return val


# --- printing ---------------------------------------------------------------

def _num(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def to_string(e: Expr, var: str = "x", period: float | None = None) -> str:
    """Render in the parser's grammar; time atoms use ``w`` when ``period`` matches."""
    def r(n):
        return to_string(n, var, period)
    if isinstance(e, Const):
        s = _num(e.value)
        return f"({s})" if e.value < 0 else s
    if isinstance(e, Coord):
        return f"{var}{e.index + 1}"
    if isinstance(e, Obs):
        return "M[" + ",".join(str(a) for a in e.alpha) + "]"
    if isinstance(e, Trig):
        if period is not None and e.period == period:
            return f"{e.kind}({e.k}*w*t)"
        return f"{e.kind}({e.k}*(2*pi/{e.period!r})*t)"
    if isinstance(e, Add):
        return "(" + " + ".join(r(t) for t in e.terms) + ")"
    if isinstance(e, Mul):
        return "*".join(r(f) for f in e.factors)
    if isinstance(e, Pow):
        return f"({r(e.base)})**{e.n}"
    raise TypeError(e)


# --- parsing ----------------------------------------------------------------

class _Parser:
    def __init__(self, period: float, d: int, var: str, allow_obs: bool):
        self.period = float(period)
        self.d = d
        self.var = var
        self.allow_obs = allow_obs

    def const_value(self, node) -> float | None:
        """Value of a constant subtree, or None when it is not constant."""
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            return float(node.value)
        if isinstance(node, ast.Name) and node.id == "pi":
            return math.pi
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            v = self.const_value(node.operand)
            if v is None:
                return None
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.BinOp):
            a, b = self.const_value(node.left), self.const_value(node.right)
            if a is None or b is None:
                return None
            if isinstance(node.op, ast.Add):
                return a + b
            if isinstance(node.op, ast.Sub):
                return a - b
            if isinstance(node.op, ast.Mult):
                return a * b
            if isinstance(node.op, ast.Div):
                return a / b
            if isinstance(node.op, ast.Pow):
                return a ** b
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) \
                and node.func.id == "sqrt" and len(node.args) == 1:
            v = self.const_value(node.args[0])
            if v is None:
                raise ExprError("sqrt is only allowed on constants")
            return math.sqrt(v)
        return None

    def time_coefficient(self, node) -> float:
        """Return c such that node == c * t (with w = 2*pi/T)."""
        if isinstance(node, ast.Name):
            if node.id == "t":
                return 1.0
            if node.id == "w":
                raise ExprError("w must be multiplied by t")
        if isinstance(node, ast.BinOp) and isinstance(node.op, (ast.Mult, ast.Div)):
            factors = []

            def collect(n):
                if isinstance(n, ast.BinOp) and isinstance(n.op, ast.Mult):
                    collect(n.left)
                    collect(n.right)
                else:
                    factors.append(n)
            if isinstance(node.op, ast.Div):
                den = self.const_value(node.right)
                if den is None:
                    raise ExprError("time argument may only be divided by a constant")
                return self.time_coefficient(node.left) / den
            collect(node)
            coef, n_t = 1.0, 0
            for f in factors:
                if isinstance(f, ast.Name) and f.id == "t":
                    n_t += 1
                elif isinstance(f, ast.Name) and f.id == "w":
                    coef *= TWO_PI / self.period
                else:
                    v = self.const_value(f)
                    if v is None:
                        raise ExprError("trig argument must be linear in t")
                    coef *= v
            if n_t != 1:
                raise ExprError("trig argument must be linear in t")
            return coef
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            return -self.time_coefficient(node.operand)
        raise ExprError("trig argument must have the form c*w*t or c*t")

    def visit(self, node) -> Expr:
        v = self.const_value(node)
        if v is not None:
            return Const(v)
        if isinstance(node, ast.Name):
            name = node.id
            if name == self.var and self.d == 1:
                return Coord(0)
            if name.startswith(self.var) and name[1:].isdigit():
                i = int(name[1:]) - 1
                if not 0 <= i < self.d:
                    raise ExprError(f"{name} out of range for d={self.d}")
                return Coord(i)
            if name == "t":
                raise ExprError("bare t is not periodic; use sin(k*w*t) or cos(k*w*t)")
            raise ExprError(f"unknown name {name!r}")
        if isinstance(node, ast.UnaryOp):
            if isinstance(node.op, ast.USub):
                return neg(self.visit(node.operand))
            if isinstance(node.op, ast.UAdd):
                return self.visit(node.operand)
        if isinstance(node, ast.BinOp):
            if isinstance(node.op, ast.Add):
                return add(self.visit(node.left), self.visit(node.right))
            if isinstance(node.op, ast.Sub):
                return add(self.visit(node.left), neg(self.visit(node.right)))
            if isinstance(node.op, ast.Mult):
                return mul(self.visit(node.left), self.visit(node.right))
            if isinstance(node.op, ast.Div):
                den = self.const_value(node.right)
                if den is None:
                    raise ExprError("division is only allowed by constants")
                return mul(self.visit(node.left), Const(1.0 / den))
            if isinstance(node.op, ast.Pow):
                n = self.const_value(node.right)
                if n is None or n != int(n):
                    raise ExprError("exponent must be an integer constant")
                return power(self.visit(node.left), int(n))
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
            fname = node.func.id
            if fname in ("sin", "cos") and len(node.args) == 1:
                c = self.time_coefficient(node.args[0])
                k_real = c * self.period / TWO_PI
                k = round(k_real)
                if k == 0 or abs(k_real - k) > 1e-9:
                    raise ExprError(f"{fname} frequency is not an integer multiple of 2*pi/T")
                if k < 0:
                    # sin(-kwt) = -sin(kwt), cos(-kwt) = cos(kwt)
                    return neg(Trig("sin", -k, self.period)) if fname == "sin" \
                        else Trig("cos", -k, self.period)
                return Trig(fname, k, self.period)
            raise ExprError(f"unsupported call {fname}")
        if isinstance(node, ast.Subscript) and isinstance(node.value, ast.Name) \
                and node.value.id == "M":
            if not self.allow_obs:
                raise ExprError("observable atoms are not allowed here")
            sl = node.slice
            elts = sl.elts if isinstance(sl, ast.Tuple) else [sl]
            alpha = []
            for el in elts:
                a = self.const_value(el)
                if a is None or a != int(a) or a < 0:
                    raise ExprError("multi-index entries must be nonnegative integers")
                alpha.append(int(a))
            if len(alpha) != self.d:
                raise ExprError(f"multi-index {tuple(alpha)} does not match d={self.d}")
            if sum(alpha) > MAX_OBS_DEGREE:
                raise ExprError(f"observable degree {sum(alpha)} exceeds {MAX_OBS_DEGREE}")
            return Obs(tuple(alpha))
        raise ExprError(f"unsupported syntax: {ast.dump(node)}")


def parse(text: str, period: float, d: int, var: str = "x", allow_obs: bool = True) -> Expr:
    """Parse an infix expression string; see the module docstring for the grammar."""
    if not 1 <= d <= MAX_DIM:
        raise ExprError(f"dimension must be in 1..{MAX_DIM}")
    try:
        # ^ binds looser than * in Python; treat it as **
        tree = ast.parse(str(text).strip().replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ExprError(f"cannot parse {text!r}: {exc.msg}") from None
    e = _Parser(period, d, var, allow_obs).visit(tree.body)
    validate(e, d, period, allow_obs=allow_obs)
    return e
