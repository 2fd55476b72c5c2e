"""Lagrangian formalism on R x TQ x R.

Positions and velocities are read off the chart's ``pairs()``, so an
enlarged chart carrying Lagrange multipliers is handled the same way (the
multipliers count as positions, their velocities as velocities).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np
import sympy as sp

from . import symlang
from .exterior import (
    Chart,
    DifferentialForm,
    Probes,
    VectorFieldExpr,
    compile_exprs,
    exterior_derivative,
    numeric_rank,
    pullback,
)
from .hamiltonian import Structure, canonical_forms, field_residual, verify_cocontact
from .symlang import Expr

SYMBOLIC_INVERSE_MAX_N = 2


class NotAdmissibleError(ValueError):
    pass


class SingularLagrangianError(ValueError):
    pass


@dataclass(frozen=True)
class Regularity:
    rank: int
    n: int

    @property
    def regular(self) -> bool:
        return self.rank == self.n

    def __str__(self):
        return "regular" if self.regular else f"singular({self.rank})"


@dataclass(frozen=True)
class LegendreImagePoint:
    t: float
    q: tuple[float, ...]
    p: tuple[float, ...]
    s: float

    def as_tuple(self) -> tuple[float, ...]:
        return (self.t, *self.q, *self.p, self.s)


class LagrangianSystem:
    def __init__(self, chart: Chart, L: Expr, kinetic: Expr | None = None, potential: Expr | None = None,
                 name: str = "", base_L: Expr | None = None, holonomic: Sequence[Expr] = ()):
        if not chart.velocities and not chart.multiplier_velocities:
            raise ValueError(f"chart {chart} has no velocity coordinates")
        self.chart = chart
        self.L = sp.sympify(L)
        self.kinetic = None if kinetic is None else sp.sympify(kinetic)
        self.potential = None if potential is None else sp.sympify(potential)
        self.name = name
        # set by holonomic_augment: the unconstrained Lagrangian and the constraints
        self.base_L = None if base_L is None else sp.sympify(base_L)
        self.holonomic = tuple(sp.sympify(f) for f in holonomic)

    def __repr__(self):
        return f"LagrangianSystem({self.chart}, L={symlang.to_infix(self.L)})"

    @cached_property
    def q(self) -> tuple[sp.Symbol, ...]:
        return tuple(symlang.symbol(a) for a, _ in self.chart.pairs())

    @cached_property
    def v(self) -> tuple[sp.Symbol, ...]:
        return tuple(symlang.symbol(b) for _, b in self.chart.pairs())

    @property
    def t(self) -> sp.Symbol:
        return symlang.symbol(self.chart.time_name)

    @property
    def s(self) -> sp.Symbol:
        return symlang.symbol(self.chart.action_name)

    @cached_property
    def Lv(self) -> tuple[Expr, ...]:
        return tuple(sp.diff(self.L, v) for v in self.v)

    @cached_property
    def energy(self) -> Expr:
        return sp.expand(sum(v * lv for v, lv in zip(self.v, self.Lv)) - self.L)

    @cached_property
    def theta(self) -> DifferentialForm:
        return DifferentialForm.one_form(self.chart, {q.name: lv for q, lv in zip(self.q, self.Lv)})

    @cached_property
    def tau(self) -> DifferentialForm:
        return DifferentialForm.basis(self.chart, self.chart.time_name)

    @cached_property
    def eta(self) -> DifferentialForm:
        return DifferentialForm.basis(self.chart, self.chart.action_name) - self.theta

    @cached_property
    def d_eta(self) -> DifferentialForm:
        return exterior_derivative(self.eta)

    @cached_property
    def W(self) -> sp.Matrix:
        return sp.Matrix([[sp.diff(lv, w) for w in self.v] for lv in self.Lv])

    @cached_property
    def probes(self) -> Probes:
        return Probes.for_exprs(self.chart, [self.L])

    @cached_property
    def regularity(self) -> Regularity:
        mats = self.probes.matrices(self.W)
        ranks = {numeric_rank(m) for m in mats}
        if len(ranks) != 1:
            raise NotAdmissibleError("not admissible: non-constant rank")
        return Regularity(ranks.pop(), len(self.v))

    @cached_property
    def structure(self) -> Structure:
        return verify_cocontact(self.tau, self.eta, self.probes)

    @property
    def mechanical_energy(self) -> Expr | None:
        if self.kinetic is None or self.potential is None:
            return None
        return self.kinetic + self.potential

    def require_regular(self):
        if not self.regularity.regular:
            raise SingularLagrangianError(
                f"Lagrangian is {self.regularity}; use cocontact.precocontact for singular systems")

    @cached_property
    def W_inverse(self) -> sp.Matrix:
        self.require_regular()
        n = len(self.v)
        if n <= SYMBOLIC_INVERSE_MAX_N:
            det = sp.factor(self.W.det())
            return (self.W.adjugate() / det).applyfunc(sp.cancel)
        return self.W.inv(method="LU").applyfunc(sp.cancel)

    def _solve_velocity_block(self, rhs: list[Expr]) -> list[Expr]:
        x = self.W_inverse * sp.Matrix(rhs)
        return [sp.cancel(c) for c in x]


def lagrangian_forms(sys: LagrangianSystem):
    """``(E_L, theta_L, eta_L, d eta_L)``."""
    return sys.energy, sys.theta, sys.eta, sys.d_eta


def hessian(sys: LagrangianSystem) -> tuple[sp.Matrix, Regularity]:
    return sys.W, sys.regularity


def momentum_names(chart: Chart) -> list[str]:
    pos = [a for a, _ in chart.pairs()]
    if pos == ["q"]:
        return ["p"]
    return [f"p_{a}" for a in pos]


def momentum_chart(sys: LagrangianSystem) -> Chart:
    pos = [a for a, _ in sys.chart.pairs()]
    return Chart.canonical(pos, momentum_names(sys.chart), time=sys.chart.time_name, action=sys.chart.action_name)


def legendre_map(sys: LagrangianSystem, point: Mapping[str, float],
                 bindings: symlang.Bindings | None = None) -> LegendreImagePoint:
    b = bindings or symlang.Bindings({})
    vals = symlang.Bindings({**b.values, **point}, b.externals)
    c = sys.chart
    return LegendreImagePoint(
        float(point[c.time_name]),
        tuple(float(point[q.name]) for q in sys.q),
        tuple(symlang.evaluate(lv, vals) for lv in sys.Lv),
        float(point[c.action_name]),
    )


def legendre_pullback_check(sys: LagrangianSystem) -> bool:
    """True iff the Legendre map pulls ``ds - p dq`` back to ``eta_L``."""
    target = momentum_chart(sys)
    _, eta0 = canonical_forms(target)
    mapping = {p: lv for p, lv in zip(target.momenta, sys.Lv)}
    return pullback(eta0, sys.chart, mapping).equals(sys.eta)


def push_forward_legendre(sys: LagrangianSystem, X: VectorFieldExpr) -> dict[str, Expr]:
    """Components of the image of ``X`` under the Legendre map, as functions on the tangent chart."""
    target = momentum_chart(sys)
    out = {sys.chart.time_name: X[sys.chart.time_name], sys.chart.action_name: X[sys.chart.action_name]}
    for q, p, lv in zip(sys.q, target.momenta, sys.Lv):
        out[q.name] = X[q.name]
        out[p] = X(lv)
    return out


def lagrangian_reeb_fields(sys: LagrangianSystem) -> tuple[VectorFieldExpr, VectorFieldExpr]:
    """``R_t = d/dt - W^ij L_{t v_j} d/dv_i`` and its ``s`` analogue."""
    sys.require_regular()
    out = []
    for x in (sys.t, sys.s):
        comps = sys._solve_velocity_block([-sp.diff(lv, x) for lv in sys.Lv])
        field = {x.name: sp.Integer(1)}
        field.update({v.name: c for v, c in zip(sys.v, comps)})
        out.append(VectorFieldExpr(sys.chart, field))
    return out[0], out[1]


def herglotz_field(sys: LagrangianSystem) -> VectorFieldExpr:
    """The Herglotz-Euler-Lagrange vector field of a regular Lagrangian."""
    sys.require_regular()
    L, Ls = sys.L, sp.diff(sys.L, sys.s)
    rhs = []
    for j, lv in enumerate(sys.Lv):
        r = sp.diff(L, sys.q[j]) - sp.diff(lv, sys.t) - sp.Add(*[vk * sp.diff(lv, qk) for qk, vk in zip(sys.q, sys.v)])
        r += -L * sp.diff(lv, sys.s) + Ls * lv
        rhs.append(sp.expand(r))
    G = sys._solve_velocity_block(rhs)
    comps = {sys.chart.time_name: sp.Integer(1), sys.chart.action_name: L}
    for q, v, g in zip(sys.q, sys.v, G):
        comps[q.name] = v
        comps[v.name] = sp.expand(g)
    return VectorFieldExpr(sys.chart, comps)


def herglotz_residual(sys: LagrangianSystem, traj) -> np.ndarray:
    """Per-sample residuals of the Herglotz-Euler-Lagrange equations.

    Columns follow chart order: ``t`` holds ``t' - 1``, each position column
    ``q' - v``, each velocity column ``d/dt(dL/dv) - dL/dq - (dL/ds)(dL/dv)``
    and the action column ``s' - L``.
    """
    times = np.asarray(traj.times, dtype=float)
    X = np.asarray(traj.states, dtype=float)
    if len(times) < 3:
        raise ValueError("residuals need at least 3 samples")
    c = sys.chart
    n = len(sys.q)
    Ls = sp.diff(sys.L, sys.s)
    exprs = [sys.L, *sys.Lv, *[sp.diff(sys.L, q) + Ls * lv for q, lv in zip(sys.q, sys.Lv)]]
    vals = compile_exprs(c, exprs, traj.bindings)(X)
    Lval, Lv, force = vals[:, 0], vals[:, 1:n + 1], vals[:, n + 1:]
    d = lambda y: np.gradient(y, times, axis=0, edge_order=2)
    Xdot = d(X)
    out = np.zeros_like(X)
    out[:, c.index(c.time_name)] = Xdot[:, c.index(c.time_name)] - 1.0
    out[:, c.index(c.action_name)] = Xdot[:, c.index(c.action_name)] - Lval
    dLv = d(Lv)
    for i, (q, v) in enumerate(zip(sys.q, sys.v)):
        out[:, c.index(q.name)] = Xdot[:, c.index(q.name)] - X[:, c.index(v.name)]
        out[:, c.index(v.name)] = dLv[:, i] - force[:, i]
    return out


def herglotz_field_residual(sys: LagrangianSystem, traj) -> np.ndarray:
    """``x' - Gamma_L(x)`` per sample."""
    return field_residual(herglotz_field(sys), traj.times, traj.states, traj.bindings)
