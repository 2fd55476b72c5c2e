"""Scalar symbolic expressions: parsing, calculus, substitution and evaluation.

Expressions are plain sympy trees.  What this module adds on top of sympy is
the restricted input grammar (with positioned error messages), the
convention for external time functions (``ell(t)`` and its derivatives), a
checked evaluator that names the offending subexpression on domain errors,
and a seeded randomized zero test used by the constraint algorithm.

Grammar::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := ('+' | '-') unary | power
    power   := atom ('^' unary)?
    atom    := NUMBER | 'pi' | IDENT | IDENT primes? '(' expr ')' | '(' expr ')'
    NUMBER  := decimal or scientific literal
    IDENT   := [a-zA-Z_][a-zA-Z0-9_]*

``sin cos exp log`` take an arbitrary argument.  Declared external functions
must be called with the time coordinate, e.g. ``ell(t)``; derivatives are
written with primes, ``ell''(t)``.  Exponents must be constant and are
converted to exact rationals.
"""

from __future__ import annotations

import math
import re
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import sympy as sp
from sympy.printing.str import StrPrinter

Expr = sp.Expr

ZERO_TEST_SEED = 20211018
ZERO_TEST_POINTS = 32
ZERO_TEST_TOL = 1e-9
ZERO_TEST_BOX = 2.0

ELEMENTARY = {"sin": sp.sin, "cos": sp.cos, "exp": sp.exp, "log": sp.log}
RESERVED = {"pi"} | set(ELEMENTARY)


class ExprSyntaxError(ValueError):
    """Malformed expression text.  ``position`` is a 0-based character offset."""

    def __init__(self, message: str, position: int, text: str = ""):
        self.position = position
        self.text = text
        super().__init__(f"{message} at offset {position}")


class UnknownSymbolError(ExprSyntaxError):
    def __init__(self, name: str, position: int, text: str = ""):
        self.name = name
        super().__init__(f"unknown symbol {name!r}", position, text)


class UnboundSymbolError(KeyError):
    pass


class DomainError(ArithmeticError):
    """Numeric evaluation left the domain of an elementary operation."""

    def __init__(self, message: str, subexpr: Expr):
        self.subexpr = subexpr
        super().__init__(f"{message}: {to_infix(subexpr)}")


# --------------------------------------------------------------------------
# symbols and external functions

_SYMBOLS: dict[str, sp.Symbol] = {}
_FUNCTIONS: dict[str, sp.core.function.UndefinedFunction] = {}


def symbol(name: str) -> sp.Symbol:
    """The canonical (real) sympy symbol for ``name``."""
    try:
        return _SYMBOLS[name]
    except KeyError:
        sym = _SYMBOLS[name] = sp.Symbol(name, real=True)
        return sym


def symbols(names: Iterable[str]) -> tuple[sp.Symbol, ...]:
    return tuple(symbol(n) for n in names)


def function(name: str):
    try:
        return _FUNCTIONS[name]
    except KeyError:
        fn = _FUNCTIONS[name] = sp.Function(name, real=True)
        return fn


def external(name: str, t: sp.Symbol | str = "t", order: int = 0) -> Expr:
    """``name(t)`` differentiated ``order`` times with respect to ``t``."""
    if isinstance(t, str):
        t = symbol(t)
    base = function(name)(t)
    if order == 0:
        return base
    return sp.Derivative(base, (t, order))


def external_nodes(e: Expr) -> set[tuple[str, int]]:
    """All ``(name, derivative order)`` pairs of external functions in ``e``."""
    found = set()
    walk = sp.preorder_traversal(e)
    for node in walk:
        if isinstance(node, sp.Derivative) and isinstance(node.expr, sp.core.function.AppliedUndef):
            found.add((node.expr.func.__name__, int(node.derivative_count)))
            walk.skip()
        elif isinstance(node, sp.core.function.AppliedUndef):
            found.add((node.func.__name__, 0))
    return found


# --------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>\*\*|[-+*/^(),'])
    """,
    re.VERBOSE,
)


@dataclass
class _Token:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        if kind != "ws":
            tok_text = m.group()
            if tok_text == "**":
                tok_text = "^"
            tokens.append(_Token(kind, tok_text, pos))
        pos = m.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text, coords, params, externals, time):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0
        self.coords = coords
        self.params = params
        self.externals = externals
        self.time = time

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str) -> _Token:
        if self.tok.text != text:
            found = self.tok.text or "end of input"
            raise ExprSyntaxError(f"expected {text!r}, found {found!r}", self.tok.pos, self.text)
        return self.advance()

    def parse(self) -> Expr:
        e = self.expr()
        if self.tok.kind != "end":
            raise ExprSyntaxError(f"unexpected {self.tok.text!r}", self.tok.pos, self.text)
        return e

    def expr(self) -> Expr:
        e = self.term()
        while self.tok.text in ("+", "-"):
            op = self.advance().text
            rhs = self.term()
            e = e + rhs if op == "+" else e - rhs
        return e

    def term(self) -> Expr:
        e = self.unary()
        while self.tok.text in ("*", "/"):
            op = self.advance().text
            rhs = self.unary()
            e = e * rhs if op == "*" else e / rhs
        return e

    def unary(self) -> Expr:
        if self.tok.text in ("+", "-"):
            op = self.advance().text
            e = self.unary()
            return -e if op == "-" else e
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.tok.text == "^":
            pos = self.advance().pos
            exponent = self.unary()
            if exponent.free_symbols or exponent.atoms(sp.core.function.AppliedUndef):
                raise ExprSyntaxError("exponent must be a constant", pos + 1, self.text)
            if not exponent.is_Rational:
                exponent = sp.nsimplify(exponent, rational=True)
            if not exponent.is_Rational:
                raise ExprSyntaxError("exponent must be rational", pos + 1, self.text)
            return base**exponent
        return base

    def atom(self) -> Expr:
        tok = self.tok
        if tok.kind == "number":
            self.advance()
            return sp.Rational(tok.text)
        if tok.text == "(":
            self.advance()
            e = self.expr()
            self.expect(")")
            return e
        if tok.kind == "ident":
            return self.identifier()
        found = tok.text or "end of input"
        raise ExprSyntaxError(f"unexpected {found!r}", tok.pos, self.text)

    def identifier(self) -> Expr:
        tok = self.advance()
        name = tok.text
        order = 0
        while self.tok.text == "'":
            self.advance()
            order += 1
        if self.tok.text == "(":
            if name in ELEMENTARY and order == 0:
                self.advance()
                arg = self.expr()
                self.expect(")")
                return ELEMENTARY[name](arg)
            if name not in self.externals:
                raise UnknownSymbolError(name, tok.pos, self.text)
            self.advance()
            arg_tok = self.tok
            if arg_tok.text != self.time:
                raise ExprSyntaxError(
                    f"external function {name!r} must be called with {self.time!r}", arg_tok.pos, self.text
                )
            self.advance()
            self.expect(")")
            return external(name, self.time, order)
        if order:
            raise ExprSyntaxError("primes are only allowed on external calls", self.tok.pos, self.text)
        if name == "pi":
            return sp.pi
        if name in self.coords or name in self.params:
            return symbol(name)
        if name in self.externals:
            raise ExprSyntaxError(f"external function {name!r} must be called as {name}({self.time})", tok.pos, self.text)
        raise UnknownSymbolError(name, tok.pos, self.text)


def parse(
    text: str,
    chart=None,
    params: Iterable[str] = (),
    externals: Iterable[str] = (),
) -> Expr:
    """Parse ``text`` against the coordinates of ``chart`` and the declared names.

    ``chart`` may be a :class:`~cocontact.exterior.Chart` or any iterable of
    coordinate names; the first name containing the time role (or ``"t"``)
    is the argument of external calls.
    """
    if chart is None:
        coords, time = set(), "t"
    elif hasattr(chart, "names"):
        coords, time = set(chart.names), chart.time_name
    else:
        coords, time = set(chart), "t"
    params = set(params)
    externals = set(externals)
    clash = (coords | params | externals) & RESERVED
    if clash:
        raise ValueError(f"reserved names cannot be declared: {sorted(clash)}")
    return _Parser(str(text), coords, params, externals, time).parse()


# --------------------------------------------------------------------------
# printing


class _InfixPrinter(StrPrinter):
    def _print_Derivative(self, expr):
        inner = expr.expr
        if isinstance(inner, sp.core.function.AppliedUndef):
            return f"{inner.func.__name__}{chr(39) * int(expr.derivative_count)}({self._print(inner.args[0])})"
        return super()._print_Derivative(expr)


def to_infix(e) -> str:
    """Render ``e`` in the input grammar (so that ``parse(to_infix(e))`` round-trips)."""
    return _InfixPrinter({"order": "none"}).doprint(sp.sympify(e)).replace("**", "^")


# --------------------------------------------------------------------------
# calculus and substitution


def differentiate(e: Expr, x: sp.Symbol | str) -> Expr:
    """Exact partial derivative.  External functions of ``t`` pick up one more prime."""
    if isinstance(x, str):
        x = symbol(x)
    return sp.diff(e, x)


def substitute(e: Expr, mapping: Mapping) -> Expr:
    """Simultaneous substitution; keys may be names or symbols."""
    if not mapping:
        return e
    subs = {(symbol(k) if isinstance(k, str) else k): sp.sympify(v) for k, v in mapping.items()}
    e = sp.sympify(e)
    if all(isinstance(k, sp.Symbol) for k in subs):
        return e.xreplace(subs)
    return e.subs(subs, simultaneous=True)


def tidy(e: Expr) -> Expr:
    """Cheap canonical form: cancel rational structure, then expand."""
    e = sp.sympify(e)
    if e.is_Number:
        return e
    return sp.expand(sp.cancel(e))


# --------------------------------------------------------------------------
# external time functions


class TimeFunction:
    """A function of time given by an expression, with symbolic derivatives.

    Calling ``f(t, order)`` returns the ``order``-th derivative.  Works on
    floats and on numpy arrays.
    """

    def __init__(self, expr: Expr | str, t: str = "t", max_order: int = 4, label: str | None = None):
        self.t = symbol(t)
        self.expr = parse(expr, [t]) if isinstance(expr, str) else sp.sympify(expr)
        bad = self.expr.free_symbols - {self.t}
        if bad:
            raise ValueError(f"time function depends on {sorted(map(str, bad))}")
        self.label = label or to_infix(self.expr)
        self.derivatives = [self.expr]
        for _ in range(max_order):
            self.derivatives.append(sp.diff(self.derivatives[-1], self.t))
        self._compiled = [sp.lambdify(self.t, d, "numpy") for d in self.derivatives]
        self._scalar = [sp.lambdify(self.t, d, "math") for d in self.derivatives]

    def __call__(self, t, order: int = 0):
        if order >= len(self._compiled):
            d = sp.diff(self.expr, self.t, order)
            fn = sp.lambdify(self.t, d, "numpy")
        elif isinstance(t, float):
            return float(self._scalar[order](t))
        else:
            fn = self._compiled[order]
        out = fn(t)
        if np.ndim(t) and np.ndim(out) == 0:
            out = np.full(np.shape(t), float(out))
        return out

    def __repr__(self):
        return f"TimeFunction({self.label!r})"


def probe_function(name: str) -> TimeFunction:
    """The fixed smooth function bound to external ``name`` during zero tests."""
    rng = np.random.default_rng(zlib.crc32(name.encode()) ^ ZERO_TEST_SEED)
    a, b, c, d, e = (sp.Rational(int(v), 64) for v in rng.integers(16, 96, size=5))
    t = symbol("t")
    return TimeFunction(a + b * sp.sin(c * t + d) + e * t**2 / 4, "t", label=f"test:{name}")


# --------------------------------------------------------------------------
# numeric evaluation


@dataclass
class Bindings:
    """Numeric values for free symbols and callables for external functions.

    ``externals[name](t, order)`` must return the ``order``-th time derivative.
    """

    values: dict[str, float] = field(default_factory=dict)
    externals: dict[str, Callable] = field(default_factory=dict)

    def merged(self, values: Mapping[str, float] | None = None, **kw) -> "Bindings":
        vals = dict(self.values)
        vals.update(values or {})
        vals.update(kw)
        return Bindings(vals, dict(self.externals))


def _placeholders(e: Expr) -> tuple[Expr, dict[str, tuple[str, int]]]:
    """Replace external nodes with plain applied functions ``name__dk(t)``."""
    mapping: dict = {}
    names: dict[str, tuple[str, int]] = {}
    for node in sp.preorder_traversal(e):
        if isinstance(node, sp.Derivative) and isinstance(node.expr, sp.core.function.AppliedUndef):
            name, order = node.expr.func.__name__, int(node.derivative_count)
            arg = node.expr.args[0]
        elif isinstance(node, sp.core.function.AppliedUndef) and "__d" not in node.func.__name__:
            name, order = node.func.__name__, 0
            arg = node.args[0]
        else:
            continue
        ph = f"{name}__d{order}"
        mapping[node] = sp.Function(ph)(arg)
        names[ph] = (name, order)
    # xreplace matches outermost nodes first, so derivative nodes win
    return sp.sympify(e).xreplace(mapping), names


def compile_numeric(
    exprs: Sequence[Expr],
    args: Sequence[sp.Symbol],
    bindings: Bindings,
    vectorized: bool = False,
):
    """Compile ``exprs`` to a function of ``args``.

    Symbols not in ``args`` are taken from ``bindings.values``; external
    functions from ``bindings.externals``.  Returns ``f(*args) -> list``.
    """
    exprs = [sp.sympify(e) for e in exprs]
    arg_set = set(args)
    consts = {}
    for e in exprs:
        for s in e.free_symbols - arg_set:
            if s.name not in bindings.values:
                raise UnboundSymbolError(f"no value bound for {s.name!r}")
            consts[s] = sp.Float(bindings.values[s.name])
    bundle = sp.Tuple(*exprs).xreplace(consts) if consts else sp.Tuple(*exprs)
    bundle, names = _placeholders(bundle)
    namespace = {}
    for ph, (name, order) in names.items():
        if name not in bindings.externals:
            raise UnboundSymbolError(f"no function bound for external {name!r}")
        fn = bindings.externals[name]
        namespace[ph] = (lambda f, k: (lambda tt: f(tt, k)))(fn, order)
    modules = [namespace, "numpy"] if vectorized else [namespace, "math"]
    return sp.lambdify(list(args), list(bundle), modules=modules, cse=True)


def evaluate(e: Expr, b: Bindings | Mapping[str, float]) -> float:
    """Evaluate ``e`` to a float, checking every elementary operation's domain."""
    if not isinstance(b, Bindings):
        b = Bindings(dict(b))
    return float(_eval(sp.sympify(e), b))


def _eval(e: Expr, b: Bindings) -> float:
    if e.is_Number:
        return float(e)
    if e is sp.pi:
        return math.pi
    if isinstance(e, sp.Symbol):
        try:
            return float(b.values[e.name])
        except KeyError:
            raise UnboundSymbolError(f"no value bound for {e.name!r}") from None
    if isinstance(e, sp.Add):
        return math.fsum(_eval(a, b) for a in e.args)
    if isinstance(e, sp.Mul):
        out = 1.0
        for a in e.args:
            out *= _eval(a, b)
        return out
    if isinstance(e, sp.Pow):
        base = _eval(e.base, b)
        expo = e.exp
        if base == 0.0 and (expo.is_negative or (expo.is_Number and float(expo) < 0)):
            raise DomainError("division by zero", e)
        if base < 0.0 and expo.is_Rational and not expo.is_Integer and expo.q % 2 == 0:
            raise DomainError("even root of a negative number", e)
        if expo.is_Rational and not expo.is_Integer and base < 0.0:
            return -((-base) ** float(expo)) if expo.p % 2 else (-base) ** float(expo)
        return base ** _eval(expo, b)
    if isinstance(e, sp.log):
        x = _eval(e.args[0], b)
        if x <= 0.0:
            raise DomainError("log of a non-positive number", e)
        return math.log(x)
    if isinstance(e, sp.exp):
        try:
            return math.exp(_eval(e.args[0], b))
        except OverflowError:
            raise DomainError("overflow", e) from None
    if isinstance(e, sp.sin):
        return math.sin(_eval(e.args[0], b))
    if isinstance(e, sp.cos):
        return math.cos(_eval(e.args[0], b))
    if isinstance(e, sp.Derivative) and isinstance(e.expr, sp.core.function.AppliedUndef):
        return _call_external(e.expr, int(e.derivative_count), b)
    if isinstance(e, sp.core.function.AppliedUndef):
        return _call_external(e, 0, b)
    # anything sympy produced that the grammar does not (tan, sqrt as Pow is handled)
    value = e.evalf(subs={symbol(k): v for k, v in b.values.items()})
    if not value.is_Number:
        raise UnboundSymbolError(f"cannot evaluate {to_infix(e)}")
    return float(value)


def _call_external(node, order: int, b: Bindings) -> float:
    name = node.func.__name__
    if name not in b.externals:
        raise UnboundSymbolError(f"no function bound for external {name!r}")
    t = _eval(node.args[0], b)
    return float(b.externals[name](t, order))


# --------------------------------------------------------------------------
# zero testing


def _zero_test_bindings(e: Expr) -> Bindings:
    return Bindings({}, {name: probe_function(name) for name, _ in external_nodes(e)})


def sample_box(names: Sequence[str], n: int, seed: int = ZERO_TEST_SEED, box: float = ZERO_TEST_BOX) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(-box, box, size=(n, len(names)))


def is_identically_zero(e: Expr, chart=None, *, points: int = ZERO_TEST_POINTS, tol: float = ZERO_TEST_TOL) -> bool:
    """Whether ``e`` vanishes identically.

    Rule-based first (``expand``/``cancel``); otherwise ``e`` is evaluated at
    ``points`` seeded uniform samples of every free symbol in
    ``[-2, 2]``, with external functions bound to :func:`probe_function`.  A
    sample counts as zero when ``|e| <= tol * max(1, sum of |terms|)``.
    Samples where ``e`` is not finite are skipped.  ``chart`` is accepted
    for interface symmetry; the sampled symbols are the free symbols of ``e``.
    """
    e = sp.sympify(e)
    if e == 0:
        return True
    if e.is_Number:
        return False
    ex = sp.expand(e)
    if ex == 0:
        return True
    free = sorted(ex.free_symbols, key=lambda s: s.name)
    terms = list(ex.args) if isinstance(ex, sp.Add) else [ex]
    fn = compile_numeric([ex, *terms], free, _zero_test_bindings(ex), vectorized=True)
    X = sample_box([s.name for s in free], points)
    with np.errstate(all="ignore"):
        cols = [X[:, k] for k in range(len(free))]
        vals = [np.broadcast_to(np.asarray(v, dtype=float), (points,)) for v in fn(*cols)]
    value = vals[0]
    scale = np.maximum(1.0, np.sum(np.abs(np.vstack(vals[1:])), axis=0))
    ok = np.isfinite(value) & np.isfinite(scale)
    if not ok.any():
        return sp.simplify(e) == 0
    return bool(np.all(np.abs(value[ok]) <= tol * scale[ok]))
