"""Exterior calculus on a fixed coordinate chart.

Forms are stored sparsely: a k-form is a dict from strictly increasing index
tuples (into the chart's coordinate list) to sympy coefficients.  Vector
fields are dicts from coordinate name to coefficient.  Everything is
immutable once built.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg
import sympy as sp

from . import symlang
from .symlang import Expr

PIVOT_TOL = 1e-10
RANK_RTOL = 1e-9


class Role(str, enum.Enum):
    TIME = "time"
    POSITION = "position"
    VELOCITY = "velocity"
    MOMENTUM = "momentum"
    MULTIPLIER = "multiplier"
    MULTIPLIER_VELOCITY = "multiplier_velocity"
    ACTION = "action"
    GAUGE = "gauge"
    GENERIC = "generic"


class ChartError(ValueError):
    pass


@dataclass(frozen=True)
class Chart:
    """Ordered coordinates with role tags.

    Phase-space charts have exactly one time and one action coordinate and
    matching position / velocity-or-momentum blocks.  A chart whose roles are
    all ``GENERIC`` (e.g. the parameter space of an embedded submanifold) is
    exempt from those rules.
    """

    names: tuple[str, ...]
    roles: tuple[Role, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "roles", tuple(Role(r) for r in self.roles))
        if len(self.names) != len(self.roles):
            raise ChartError("names and roles differ in length")
        if len(set(self.names)) != len(self.names):
            raise ChartError(f"duplicate coordinate names in {self.names}")
        for name in self.names:
            if name in symlang.RESERVED:
                raise ChartError(f"{name!r} is reserved")
        if all(r is Role.GENERIC for r in self.roles):
            return
        count = {r: self.roles.count(r) for r in Role}
        if count[Role.TIME] != 1 or count[Role.ACTION] != 1:
            raise ChartError("a phase-space chart needs exactly one time and one action coordinate")
        if count[Role.VELOCITY] and count[Role.MOMENTUM]:
            raise ChartError("velocities and momenta cannot be mixed")
        if count[Role.POSITION] != count[Role.VELOCITY] + count[Role.MOMENTUM]:
            raise ChartError("position and velocity/momentum blocks differ in length")
        if count[Role.MULTIPLIER] != count[Role.MULTIPLIER_VELOCITY]:
            raise ChartError("multiplier and multiplier-velocity blocks differ in length")
        if count[Role.GENERIC]:
            raise ChartError("generic coordinates are not allowed on a phase-space chart")

    # construction helpers

    @classmethod
    def canonical(cls, positions: Sequence[str] | int = 1, momenta: Sequence[str] | None = None,
                  time: str = "t", action: str = "s", gauge: Sequence[str] = ()) -> "Chart":
        """Darboux chart ``(t, q, p, s[, u])``."""
        if isinstance(positions, int):
            n = positions
            positions = ["q"] if n == 1 else [f"q{i + 1}" for i in range(n)]
            momenta = ["p"] if n == 1 else [f"p{i + 1}" for i in range(n)]
        momenta = list(momenta) if momenta is not None else [f"p_{q}" for q in positions]
        names = [time, *positions, *momenta, action, *gauge]
        roles = [Role.TIME, *[Role.POSITION] * len(positions), *[Role.MOMENTUM] * len(momenta),
                 Role.ACTION, *[Role.GAUGE] * len(gauge)]
        return cls(tuple(names), tuple(roles))

    @classmethod
    def tangent(cls, positions: Sequence[str], velocities: Sequence[str] | None = None,
                multipliers: Sequence[str] = (), multiplier_velocities: Sequence[str] | None = None,
                time: str = "t", action: str = "s") -> "Chart":
        """Chart ``(t, q, lambda, v, v_lambda, s)`` on R x TQ x R."""
        velocities = list(velocities) if velocities is not None else [f"v_{q}" for q in positions]
        if multiplier_velocities is None:
            multiplier_velocities = [f"v_{a}" for a in multipliers]
        names = [time, *positions, *multipliers, *velocities, *multiplier_velocities, action]
        roles = [Role.TIME, *[Role.POSITION] * len(positions), *[Role.MULTIPLIER] * len(multipliers),
                 *[Role.VELOCITY] * len(velocities), *[Role.MULTIPLIER_VELOCITY] * len(multiplier_velocities),
                 Role.ACTION]
        return cls(tuple(names), tuple(roles))

    @classmethod
    def generic(cls, names: Sequence[str]) -> "Chart":
        return cls(tuple(names), tuple(Role.GENERIC for _ in names))

    # queries

    @property
    def dim(self) -> int:
        return len(self.names)

    def __len__(self):
        return len(self.names)

    def __contains__(self, name) -> bool:
        return str(name) in self.names

    def index(self, name: str | sp.Symbol) -> int:
        return self.names.index(str(name))

    @cached_property
    def symbols(self) -> tuple[sp.Symbol, ...]:
        return symlang.symbols(self.names)

    def symbol(self, name: str) -> sp.Symbol:
        if name not in self.names:
            raise KeyError(name)
        return symlang.symbol(name)

    def with_role(self, *roles: Role) -> tuple[str, ...]:
        return tuple(n for n, r in zip(self.names, self.roles) if r in roles)

    @property
    def time_name(self) -> str:
        found = self.with_role(Role.TIME)
        return found[0] if found else "t"

    @property
    def action_name(self) -> str:
        return self.with_role(Role.ACTION)[0]

    @property
    def positions(self) -> tuple[str, ...]:
        return self.with_role(Role.POSITION)

    @property
    def velocities(self) -> tuple[str, ...]:
        return self.with_role(Role.VELOCITY)

    @property
    def momenta(self) -> tuple[str, ...]:
        return self.with_role(Role.MOMENTUM)

    @property
    def multipliers(self) -> tuple[str, ...]:
        return self.with_role(Role.MULTIPLIER)

    @property
    def multiplier_velocities(self) -> tuple[str, ...]:
        return self.with_role(Role.MULTIPLIER_VELOCITY)

    @property
    def gauge(self) -> tuple[str, ...]:
        return self.with_role(Role.GAUGE)

    @property
    def is_tangent(self) -> bool:
        return bool(self.velocities) or (not self.momenta and bool(self.multipliers))

    def pairs(self) -> list[tuple[str, str]]:
        """(position, velocity-or-momentum) pairs, multipliers last."""
        partner = self.velocities or self.momenta
        out = list(zip(self.positions, partner))
        out += list(zip(self.multipliers, self.multiplier_velocities))
        return out

    def __str__(self):
        return "(" + ", ".join(self.names) + ")"


# --------------------------------------------------------------------------
# forms and fields


def _perm_sign(seq: Sequence[int]) -> int:
    """Sign of the permutation sorting ``seq`` (which has distinct entries)."""
    sign = 1
    seq = list(seq)
    for i in range(len(seq)):
        for j in range(i + 1, len(seq)):
            if seq[i] > seq[j]:
                sign = -sign
    return sign


class DegreeError(ValueError):
    pass


@dataclass(frozen=True)
class DifferentialForm:
    chart: Chart
    degree: int
    coeffs: Mapping[tuple[int, ...], Expr] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.degree <= self.chart.dim:
            raise DegreeError(f"degree {self.degree} on a {self.chart.dim}-dimensional chart")
        clean = {}
        for key, c in self.coeffs.items():
            key = tuple(key)
            if len(key) != self.degree or list(key) != sorted(set(key)):
                raise ValueError(f"bad index tuple {key} for a {self.degree}-form")
            c = sp.sympify(c)
            if c != 0:
                clean[key] = c
        object.__setattr__(self, "coeffs", clean)

    # constructors

    @classmethod
    def zero(cls, chart: Chart, degree: int) -> "DifferentialForm":
        return cls(chart, degree, {})

    @classmethod
    def scalar(cls, chart: Chart, value) -> "DifferentialForm":
        return cls(chart, 0, {(): sp.sympify(value)})

    @classmethod
    def one_form(cls, chart: Chart, components: Mapping[str, Expr]) -> "DifferentialForm":
        return cls(chart, 1, {(chart.index(k),): v for k, v in components.items()})

    @classmethod
    def basis(cls, chart: Chart, name: str) -> "DifferentialForm":
        return cls(chart, 1, {(chart.index(name),): sp.Integer(1)})

    @classmethod
    def differential(cls, chart: Chart, f: Expr) -> "DifferentialForm":
        return exterior_derivative(cls.scalar(chart, f))

    # algebra

    def __add__(self, other: "DifferentialForm") -> "DifferentialForm":
        self._check_compatible(other)
        out = dict(self.coeffs)
        for k, v in other.coeffs.items():
            out[k] = out.get(k, 0) + v
        return DifferentialForm(self.chart, self.degree, out)

    def __neg__(self):
        return DifferentialForm(self.chart, self.degree, {k: -v for k, v in self.coeffs.items()})

    def __sub__(self, other):
        return self + (-other)

    def scale(self, f: Expr) -> "DifferentialForm":
        f = sp.sympify(f)
        return DifferentialForm(self.chart, self.degree, {k: f * v for k, v in self.coeffs.items()})

    __rmul__ = scale

    def __xor__(self, other):
        return wedge(self, other)

    def _check_compatible(self, other):
        if other.chart != self.chart or other.degree != self.degree:
            raise DegreeError("forms live on different charts or have different degrees")

    def component(self, *names: str) -> Expr:
        """Coefficient on ``d names[0] ^ d names[1] ^ ...`` (sign-adjusted)."""
        idx = [self.chart.index(n) for n in names]
        if len(set(idx)) != len(idx):
            return sp.Integer(0)
        return _perm_sign(idx) * self.coeffs.get(tuple(sorted(idx)), sp.Integer(0))

    def components(self) -> list[Expr]:
        """1-form coefficients in chart order."""
        if self.degree != 1:
            raise DegreeError("components() is for 1-forms")
        return [self.coeffs.get((i,), sp.Integer(0)) for i in range(self.chart.dim)]

    def map(self, fn) -> "DifferentialForm":
        return DifferentialForm(self.chart, self.degree, {k: fn(v) for k, v in self.coeffs.items()})

    def is_zero(self) -> bool:
        return all(symlang.is_identically_zero(c) for c in self.coeffs.values())

    def equals(self, other: "DifferentialForm") -> bool:
        return (self - other).is_zero()

    def __str__(self):
        if not self.coeffs:
            return "0"
        parts = []
        for key, c in sorted(self.coeffs.items()):
            basis = "^".join("d" + self.chart.names[i] for i in key)
            parts.append(f"({symlang.to_infix(c)})" + (f" {basis}" if basis else ""))
        return " + ".join(parts)


@dataclass(frozen=True)
class VectorFieldExpr:
    chart: Chart
    coeffs: Mapping[str, Expr] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for k, v in self.coeffs.items():
            k = str(k)
            if k not in self.chart.names:
                raise KeyError(f"{k!r} is not a coordinate of {self.chart}")
            v = sp.sympify(v)
            if v != 0:
                clean[k] = v
        object.__setattr__(self, "coeffs", clean)

    @classmethod
    def basis(cls, chart: Chart, name: str) -> "VectorFieldExpr":
        return cls(chart, {name: sp.Integer(1)})

    def __getitem__(self, name: str) -> Expr:
        if name not in self.chart.names:
            raise KeyError(name)
        return self.coeffs.get(name, sp.Integer(0))

    def components(self) -> list[Expr]:
        return [self[n] for n in self.chart.names]

    def __add__(self, other: "VectorFieldExpr") -> "VectorFieldExpr":
        out = dict(self.coeffs)
        for k, v in other.coeffs.items():
            out[k] = out.get(k, 0) + v
        return VectorFieldExpr(self.chart, out)

    def __neg__(self):
        return VectorFieldExpr(self.chart, {k: -v for k, v in self.coeffs.items()})

    def __sub__(self, other):
        return self + (-other)

    def scale(self, f) -> "VectorFieldExpr":
        f = sp.sympify(f)
        return VectorFieldExpr(self.chart, {k: f * v for k, v in self.coeffs.items()})

    __rmul__ = scale

    def map(self, fn) -> "VectorFieldExpr":
        return VectorFieldExpr(self.chart, {k: fn(v) for k, v in self.coeffs.items()})

    def is_zero(self) -> bool:
        return all(symlang.is_identically_zero(c) for c in self.coeffs.values())

    def equals(self, other: "VectorFieldExpr") -> bool:
        return (self - other).is_zero()

    def __call__(self, f: Expr) -> Expr:
        return lie_derivative(self, f)

    def __str__(self):
        if not self.coeffs:
            return "0"
        return " + ".join(f"({symlang.to_infix(self.coeffs[n])}) d/d{n}" for n in self.chart.names if n in self.coeffs)


# --------------------------------------------------------------------------
# operations


def wedge(a: DifferentialForm, b: DifferentialForm) -> DifferentialForm:
    if a.chart != b.chart:
        raise DegreeError("forms live on different charts")
    deg = a.degree + b.degree
    if deg > a.chart.dim:
        raise DegreeError(f"wedge of degree {deg} exceeds dimension {a.chart.dim}")
    out: dict[tuple[int, ...], Expr] = {}
    for ka, ca in a.coeffs.items():
        for kb, cb in b.coeffs.items():
            merged = ka + kb
            if len(set(merged)) < len(merged):
                continue
            key = tuple(sorted(merged))
            out[key] = out.get(key, 0) + _perm_sign(merged) * ca * cb
    return DifferentialForm(a.chart, deg, {k: sp.expand(v) for k, v in out.items()})


def wedge_power(a: DifferentialForm, n: int) -> DifferentialForm:
    out = DifferentialForm.scalar(a.chart, 1)
    for _ in range(n):
        out = wedge(out, a)
    return out


def exterior_derivative(a: DifferentialForm) -> DifferentialForm:
    chart = a.chart
    if a.degree >= chart.dim:
        raise DegreeError("exterior derivative of a top-degree form")
    out: dict[tuple[int, ...], Expr] = {}
    for key, c in a.coeffs.items():
        for j, x in enumerate(chart.symbols):
            if j in key:
                continue
            dc = sp.diff(c, x)
            if dc == 0:
                continue
            merged = (j,) + key
            k = tuple(sorted(merged))
            out[k] = out.get(k, 0) + _perm_sign(merged) * dc
    return DifferentialForm(chart, a.degree + 1, {k: sp.expand(v) for k, v in out.items()})


def interior_product(X: VectorFieldExpr, a: DifferentialForm) -> DifferentialForm:
    if a.degree < 1:
        raise DegreeError("interior product needs a form of degree >= 1")
    if X.chart != a.chart:
        raise DegreeError("field and form live on different charts")
    names = a.chart.names
    out: dict[tuple[int, ...], Expr] = {}
    for key, c in a.coeffs.items():
        for pos, idx in enumerate(key):
            xc = X.coeffs.get(names[idx])
            if xc is None:
                continue
            rest = key[:pos] + key[pos + 1:]
            out[rest] = out.get(rest, 0) + (-1) ** pos * xc * c
    return DifferentialForm(a.chart, a.degree - 1, out)


def contract(X: VectorFieldExpr, a: DifferentialForm) -> Expr:
    """``i(X) a`` for a 1-form, as a scalar expression."""
    if a.degree != 1:
        raise DegreeError("contract() expects a 1-form")
    return interior_product(X, a).coeffs.get((), sp.Integer(0))


def lie_derivative(X: VectorFieldExpr, e: Expr) -> Expr:
    """Directional derivative of a scalar: sum of X^c de/dc."""
    e = sp.sympify(e)
    return sp.Add(*[c * sp.diff(e, symlang.symbol(name)) for name, c in X.coeffs.items()])


def pullback(a: DifferentialForm, source: Chart, mapping: Mapping[str, Expr]) -> DifferentialForm:
    """Pull ``a`` back along the map ``source -> a.chart`` given coordinate-wise.

    Target coordinates missing from ``mapping`` are taken as identity
    (they must then exist on ``source``).
    """
    target = a.chart
    images = []
    for name in target.names:
        if name in mapping:
            images.append(sp.sympify(mapping[name]))
        elif name in source.names:
            images.append(symlang.symbol(name))
        else:
            raise KeyError(f"no image given for target coordinate {name!r}")
    subs = dict(zip(target.symbols, images))
    differentials = [exterior_derivative(DifferentialForm.scalar(source, f)) if a.degree else None for f in images]
    out = DifferentialForm.zero(source, a.degree)
    for key, c in a.coeffs.items():
        term = DifferentialForm.scalar(source, c.subs(subs, simultaneous=True))
        for idx in key:
            term = wedge(term, differentials[idx])
        out = out + term
    return out.map(sp.expand)


# --------------------------------------------------------------------------
# matrices


def two_form_matrix(w: DifferentialForm) -> sp.Matrix:
    """Antisymmetric matrix ``A`` with ``w = sum_{i<j} A[i,j] dx_i ^ dx_j``."""
    if w.degree != 2:
        raise DegreeError("two_form_matrix expects a 2-form")
    n = w.chart.dim
    A = sp.zeros(n, n)
    for (i, j), c in w.coeffs.items():
        A[i, j] = c
        A[j, i] = -c
    return A


def flat_matrix(tau: DifferentialForm, eta: DifferentialForm) -> sp.Matrix:
    """Matrix of ``v -> (i(v)tau)tau + i(v)d eta + (i(v)eta)eta``.

    Column ``b`` holds the coframe components of the image of ``d/dx_b``, so
    that ``M @ X`` gives the components of the image of ``X``.
    """
    if tau.degree != 1 or eta.degree != 1:
        raise DegreeError("flat_matrix expects two 1-forms")
    t = sp.Matrix(tau.components())
    e = sp.Matrix(eta.components())
    omega = two_form_matrix(exterior_derivative(eta))
    return (t * t.T + e * e.T + omega.T).applyfunc(sp.expand)


def characteristic_matrix(tau: DifferentialForm, eta: DifferentialForm) -> sp.Matrix:
    """Rows whose common kernel is ``ker tau ^ ker eta ^ ker d eta``."""
    omega = two_form_matrix(exterior_derivative(eta))
    return sp.Matrix.vstack(sp.Matrix([tau.components()]), sp.Matrix([eta.components()]), omega)


def numeric_rank(A: np.ndarray, rtol: float = RANK_RTOL) -> int:
    s = np.linalg.svd(np.atleast_2d(A), compute_uv=False)
    if s.size == 0 or s[0] < 1e-300:
        return 0
    return int(np.sum(s > rtol * s[0]))


def null_space(A: np.ndarray, rtol: float = RANK_RTOL) -> np.ndarray:
    """Orthonormal basis (columns) of the null space of ``A``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    _, s, vh = np.linalg.svd(A)
    rank = 0 if s.size == 0 or s[0] < 1e-300 else int(np.sum(s > rtol * s[0]))
    return vh[rank:].conj().T


class SingularMatrixError(np.linalg.LinAlgError):
    pass


def lu_solve(A: np.ndarray, b: np.ndarray, pivot_tol: float = PIVOT_TOL) -> np.ndarray:
    """LU solve with partial pivoting; refuses pivots below ``pivot_tol`` (relative)."""
    A = np.asarray(A, dtype=float)
    lu, piv = scipy.linalg.lu_factor(A, check_finite=True)
    diag = np.abs(np.diag(lu))
    scale = max(1.0, np.max(np.abs(A)))
    if diag.min() < pivot_tol * scale:
        raise SingularMatrixError(f"pivot {diag.min():.3e} below threshold")
    return scipy.linalg.lu_solve((lu, piv), b)


# --------------------------------------------------------------------------
# probe points

PROBE_SEED = 7
PROBE_COUNT = 16
PROBE_MIN_ABS = 0.1


@dataclass
class Probes:
    """Seeded sample points for numeric structure checks.

    Coordinates are drawn uniformly from ``[-1, 1]`` and pushed away from 0
    (to at least ``PROBE_MIN_ABS`` in magnitude) so that expressions dividing
    by a coordinate stay finite.  Parameters default to ``[0.5, 1.5]``;
    external functions are bound to the zero-test family.
    """

    chart: Chart
    params: Sequence[str] = ()
    externals: Sequence[str] = ()
    count: int = PROBE_COUNT
    seed: int = PROBE_SEED
    param_values: Mapping[str, float] | None = None

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        X = rng.uniform(-1.0, 1.0, size=(self.count, self.chart.dim))
        X = np.where(np.abs(X) < PROBE_MIN_ABS, np.sign(X + 1e-300) * PROBE_MIN_ABS + X, X)
        self.points = X
        self.param_points = rng.uniform(0.5, 1.5, size=(self.count, len(self.params)))
        if self.param_values:
            for j, name in enumerate(self.params):
                if name in self.param_values:
                    self.param_points[:, j] = self.param_values[name]
        self.bindings = symlang.Bindings({}, {n: symlang.probe_function(n) for n in self.externals})

    @classmethod
    def for_exprs(cls, chart: Chart, exprs: Iterable[Expr], **kw) -> "Probes":
        params, exts = set(), set()
        for e in exprs:
            e = sp.sympify(e)
            params |= {s.name for s in e.free_symbols if s.name not in chart.names}
            exts |= {n for n, _ in symlang.external_nodes(e)}
        return cls(chart, tuple(sorted(params)), tuple(sorted(exts)), **kw)

    def evaluator(self, exprs: Sequence[Expr]):
        """Vectorized evaluation of ``exprs`` at all probes -> array (count, len(exprs))."""
        args = [*self.chart.symbols, *symlang.symbols(self.params)]
        fn = symlang.compile_numeric(exprs, args, self.bindings, vectorized=True)

        def run():
            cols = [self.points[:, i] for i in range(self.chart.dim)]
            cols += [self.param_points[:, j] for j in range(len(self.params))]
            with np.errstate(all="ignore"):
                vals = fn(*cols)
            return np.stack([np.broadcast_to(np.asarray(v, dtype=float), (self.count,)) for v in vals], axis=1)

        return run

    def matrices(self, M: sp.Matrix) -> np.ndarray:
        """Evaluate a symbolic matrix at every probe -> array (count, rows, cols)."""
        flat = self.evaluator(list(M))()
        return flat.reshape(self.count, M.rows, M.cols)

    def point(self, k: int) -> dict[str, float]:
        out = dict(zip(self.chart.names, self.points[k]))
        out.update(zip(self.params, self.param_points[k]))
        return out


# --------------------------------------------------------------------------
# numeric compilation


def compile_exprs(chart: Chart, exprs: Sequence[Expr], bindings: symlang.Bindings):
    """Vectorized ``f(states) -> (N, len(exprs))`` for a state matrix in chart order."""
    fn = symlang.compile_numeric(list(exprs), list(chart.symbols), bindings, vectorized=True)

    def run(states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        cols = [states[:, i] for i in range(chart.dim)]
        vals = fn(*cols)
        return np.stack([np.broadcast_to(np.asarray(v, dtype=float), (states.shape[0],)) for v in vals], axis=1)

    return run


def compile_field(X: VectorFieldExpr, bindings: symlang.Bindings):
    """Vectorized evaluation of a field's components on a state matrix."""
    return compile_exprs(X.chart, X.components(), bindings)
