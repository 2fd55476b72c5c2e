"""Degenerate structures, holonomic constraints and the constraint algorithm.

The algorithm works on the precocontact Hamilton equation ``flat(X) = gamma_H``
with ``gamma_H = dH - (R_s H + H) eta + (1 - R_t H) tau``.  The flat matrix
is block-diagonal with a zero block on the characteristic coordinates, so
the field is solved on the complementary block and the characteristic
components are left as unknown symbols.  Consistency of the zero block gives
the primary constraints; tangency of every constraint then either fixes an
unknown or produces a new constraint.

Constraints are turned into oriented rewrite rules (``r -> ell(t)``) and
every later expression is reduced with them before it is tested for
vanishing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import sympy as sp

from . import symlang
from .exterior import (
    Chart,
    DifferentialForm,
    Probes,
    Role,
    VectorFieldExpr,
    characteristic_matrix,
    flat_matrix,
    lie_derivative,
    numeric_rank,
    null_space,
)
from .hamiltonian import CocontactSystem, Structure, solve_symbolic, verify_cocontact
from .lagrangian import LagrangianSystem, NotAdmissibleError
from .symlang import Expr

DEFAULT_MAX_STAGES = 12


class AlignmentError(ValueError):
    pass


class HolonomicRankError(ValueError):
    pass


class NonlinearUnknownError(ValueError):
    pass


# --------------------------------------------------------------------------
# characteristic distribution


def characteristic_distribution(tau: DifferentialForm, eta: DifferentialForm,
                                probes: Probes | None = None) -> list[VectorFieldExpr]:
    """Coordinate basis of ``ker tau & ker eta & ker d eta``.

    Only coordinate-aligned kernels are supported symbolically: the kernel
    must be spanned by the coordinates whose columns vanish identically.
    """
    chart = tau.chart
    K = characteristic_matrix(tau, eta)
    if probes is None:
        probes = Probes.for_exprs(chart, list(K))
    dims = {chart.dim - numeric_rank(m) for m in probes.matrices(K)}
    if len(dims) != 1:
        raise NotAdmissibleError(f"not admissible: non-constant kernel rank {sorted(dims)}")
    dim = dims.pop()
    zero_cols = [j for j in range(chart.dim) if all(symlang.is_identically_zero(c) for c in K[:, j])]
    if len(zero_cols) != dim:
        basis = null_space(probes.matrices(K)[0])
        raise AlignmentError(
            f"characteristic distribution of rank {dim} is not coordinate-aligned; "
            f"numeric basis at first probe:\n{np.array2string(basis.T, precision=4)}")
    return [VectorFieldExpr.basis(chart, chart.names[j]) for j in zero_cols]


# --------------------------------------------------------------------------
# holonomic augmentation


def default_multiplier_names(d: int) -> list[str]:
    return ["lam"] if d == 1 else [f"lam{a + 1}" for a in range(d)]


def holonomic_augment(base: LagrangianSystem, constraints: Sequence[Expr],
                      multipliers: Sequence[str] | None = None,
                      multiplier_velocities: Sequence[str] | None = None) -> LagrangianSystem:
    """Enlarge ``base`` with multipliers: ``L = L' + lam_a f^a``."""
    fs = [sp.sympify(f) for f in constraints]
    d = len(fs)
    if d == 0:
        raise ValueError("no constraints given")
    chart = base.chart
    vel = set(symlang.symbols(chart.velocities))
    for f in fs:
        bad = f.free_symbols & vel
        if bad:
            raise ValueError(f"constraint {symlang.to_infix(f)} depends on velocities "
                             f"{sorted(s.name for s in bad)}; only holonomic constraints are supported")
    names = list(multipliers) if multipliers else default_multiplier_names(d)
    if len(names) != d:
        raise ValueError("one multiplier name per constraint is required")
    mvel = list(multiplier_velocities) if multiplier_velocities else [f"v_{a}" for a in names]
    q = symlang.symbols(chart.positions)
    J = sp.Matrix([[sp.diff(f, x) for x in q] for f in fs])
    probes = Probes.for_exprs(chart, fs)
    for k, M in enumerate(probes.matrices(J)):
        if numeric_rank(M) < d:
            combo = null_space(M.T)[:, 0]
            combo = combo / combo[np.argmax(np.abs(combo))]
            terms = " ".join(f"{c:+.4g}*({symlang.to_infix(f)})" for c, f in zip(combo, fs) if abs(c) > 1e-9)
            raise HolonomicRankError(
                f"holonomic constraints are rank-deficient (rank {numeric_rank(M)} < {d}); "
                f"degenerate combination: {terms}")
    new_chart = Chart.tangent(chart.positions, chart.velocities, names, mvel,
                              time=chart.time_name, action=chart.action_name)
    lam = symlang.symbols(names)
    L = base.L + sp.Add(*[a * f for a, f in zip(lam, fs)])
    return LagrangianSystem(new_chart, L, kinetic=base.kinetic, potential=base.potential, name=base.name,
                            base_L=base.L, holonomic=fs)


# --------------------------------------------------------------------------
# systems and ledger


class PrecocontactSystem:
    """``(tau, eta, H)`` with a possibly degenerate pair and chosen Reeb fields."""

    def __init__(self, chart: Chart, tau: DifferentialForm, eta: DifferentialForm, generator: Expr,
                 reeb: tuple[VectorFieldExpr, VectorFieldExpr] | None = None,
                 lagrangian: LagrangianSystem | None = None, name: str = ""):
        self.chart = chart
        self.tau = tau
        self.eta = eta
        self.generator = sp.sympify(generator)
        self.lagrangian = lagrangian
        self.name = name
        self._reeb = reeb

    @classmethod
    def from_lagrangian(cls, sys: LagrangianSystem, reeb=None) -> "PrecocontactSystem":
        return cls(sys.chart, sys.tau, sys.eta, sys.energy, reeb=reeb, lagrangian=sys, name=sys.name)

    @classmethod
    def from_cocontact(cls, sys: CocontactSystem, reeb=None) -> "PrecocontactSystem":
        return cls(sys.chart, sys.tau, sys.eta, sys.H, reeb=reeb, name=sys.name)

    def with_reeb(self, reeb) -> "PrecocontactSystem":
        return PrecocontactSystem(self.chart, self.tau, self.eta, self.generator, reeb=reeb,
                                  lagrangian=self.lagrangian, name=self.name)

    @cached_property
    def probes(self) -> Probes:
        return Probes.for_exprs(self.chart, [*self.tau.coeffs.values(), *self.eta.coeffs.values(), self.generator])

    @cached_property
    def structure(self) -> Structure:
        return verify_cocontact(self.tau, self.eta, self.probes)

    def require_admissible(self):
        if not self.structure.ok:
            raise NotAdmissibleError(f"not admissible: {self.structure.reason}")

    @cached_property
    def basis(self) -> list[VectorFieldExpr]:
        self.require_admissible()
        return characteristic_distribution(self.tau, self.eta, self.probes)

    @cached_property
    def kernel_names(self) -> tuple[str, ...]:
        return tuple(n for Y in self.basis for n in Y.coeffs)

    @cached_property
    def reduced_names(self) -> tuple[str, ...]:
        return tuple(n for n in self.chart.names if n not in self.kernel_names)

    @cached_property
    def flat(self) -> sp.Matrix:
        return flat_matrix(self.tau, self.eta)

    def _reduced_solve(self, rhs: Sequence[Expr]) -> dict[str, Expr]:
        idx = [self.chart.index(n) for n in self.reduced_names]
        M = self.flat.extract(idx, idx)
        sol = solve_symbolic(M, [rhs[i] for i in idx])
        return dict(zip(self.reduced_names, sol))

    @property
    def reeb(self) -> tuple[VectorFieldExpr, VectorFieldExpr]:
        """Reeb representatives; default has no characteristic components."""
        if self._reeb is None:
            self._reeb = tuple(VectorFieldExpr(self.chart, self._reduced_solve(form.components()))
                               for form in (self.tau, self.eta))
        return self._reeb

    @cached_property
    def gamma(self) -> DifferentialForm:
        H = self.generator
        R_t, R_s = self.reeb
        dH = DifferentialForm.differential(self.chart, H)
        return (dH - self.eta.scale(R_s(H) + H) + self.tau.scale(1 - R_t(H))).map(sp.expand)


@dataclass
class LedgerEntry:
    xi: Expr
    stage: int
    origin: str  # consistency | tangency | sode | reeb
    variable: str | None = None  # coordinate the rule solves for

    def __str__(self):
        rule = f"  [{self.variable} -> solved]" if self.variable else ""
        return f"stage {self.stage} ({self.origin}): {symlang.to_infix(self.xi)} = 0{rule}"


@dataclass
class Solved:
    name: str
    coordinate: str
    value: Expr
    stage: int


@dataclass
class ConstraintLedger:
    chart: Chart
    entries: list[LedgerEntry] = field(default_factory=list)
    solved: dict[str, Solved] = field(default_factory=dict)
    rules: dict[sp.Symbol, Expr] = field(default_factory=dict)
    status: str = "running"
    final_stage: int = 0
    unknowns: dict[str, sp.Symbol] = field(default_factory=dict)
    field: VectorFieldExpr | None = None
    raw_field: VectorFieldExpr | None = None
    witness: Expr | None = None

    @property
    def constraints(self) -> list[Expr]:
        return [e.xi for e in self.entries]

    @property
    def finalized(self) -> bool:
        return self.status == "finalized"

    @property
    def final_dimension(self) -> int:
        return self.chart.dim - len(self.entries)

    def reduce(self, e: Expr) -> Expr:
        return symlang.tidy(sp.sympify(e).xreplace(self.rules))

    def coefficient(self, name: str) -> Expr:
        return self.field[name]

    def add_rule(self, var: sp.Symbol, rhs: Expr):
        rhs = symlang.tidy(rhs)
        for k in list(self.rules):
            self.rules[k] = symlang.tidy(self.rules[k].xreplace({var: rhs}))
        self.rules[var] = rhs

    def status_text(self) -> str:
        if self.status == "finalized":
            return f"finalized at stage {self.final_stage} (dim M_f = {self.final_dimension})"
        if self.status == "inconsistent":
            w = "" if self.witness is None else f": {symlang.to_infix(self.witness)} = 0 has no solution"
            return f"inconsistent at stage {self.final_stage}{w}"
        return f"max-iterations reached at stage {self.final_stage}"

    def report(self) -> str:
        lines = ["constraints:"]
        if not self.entries:
            lines.append("  (none)")
        for k, e in enumerate(self.entries, 1):
            lines.append(f"  xi_{k} {e}")
        lines.append("solved coefficients:")
        if not self.solved:
            lines.append("  (none)")
        for s in self.solved.values():
            lines.append(f"  {s.name} = {symlang.to_infix(s.value)}  (stage {s.stage}, component d/d{s.coordinate})")
        free = [n for n, u in self.unknowns.items() if n not in self.solved]
        if free:
            lines.append("undetermined: " + ", ".join(free))
        if self.field is not None:
            lines.append("final field:")
            for n in self.chart.names:
                lines.append(f"  X^{n} = {symlang.to_infix(self.field[n])}")
        lines.append("status: " + self.status_text())
        return "\n".join(lines)


def primary_constraints(sys: PrecocontactSystem) -> list[Expr]:
    out = []
    for Y in sys.basis:
        c = sp.expand(lie_derivative(Y, sys.generator))
        if not symlang.is_identically_zero(c, sys.chart):
            out.append(c)
    return out


def _unknown_name(chart: Chart, coord: str) -> str:
    role = chart.roles[chart.index(coord)]
    if role in (Role.POSITION, Role.MULTIPLIER):
        return f"F_{coord}"
    if role in (Role.VELOCITY, Role.MULTIPLIER_VELOCITY):
        pos = dict((b, a) for a, b in chart.pairs())[coord]
        return f"G_{pos}"
    return f"X_{coord}"


def _orient(xi: Expr, chart: Chart) -> tuple[Expr, sp.Symbol | None]:
    """Normalize ``xi`` and pick the coordinate it will be solved for."""
    xi = sp.expand(xi)
    for name in chart.names:
        if name == chart.time_name:
            continue
        x = symlang.symbol(name)
        if x not in xi.free_symbols:
            continue
        a = sp.expand(sp.diff(xi, x))
        if x in a.free_symbols or a == 0:
            continue
        rest = sp.expand(xi - a * x)
        if x in rest.free_symbols:
            continue
        return symlang.tidy(xi / a), x
    return xi, None


def _depends_on_state(e: Expr, chart: Chart) -> bool:
    coords = set(chart.symbols) - {symlang.symbol(chart.time_name)}
    return bool(e.free_symbols & coords)


def constraint_algorithm(sys: PrecocontactSystem, enforce_sode: bool = True,
                         max_stages: int = DEFAULT_MAX_STAGES, reeb_tangency: bool = False) -> ConstraintLedger:
    """Run consistency and tangency stages until nothing new appears."""
    chart = sys.chart
    ledger = ConstraintLedger(chart)
    stage = 0

    def add_constraint(xi: Expr, st: int, origin: str) -> bool:
        """Reduce and record ``xi``; returns False if it is inconsistent."""
        xi = ledger.reduce(xi)
        if symlang.is_identically_zero(xi, chart):
            return True
        if not _depends_on_state(xi, chart):
            ledger.witness = xi
            return False
        xi, var = _orient(xi, chart)
        entry = LedgerEntry(xi, st, origin, var.name if var is not None else None)
        ledger.entries.append(entry)
        if var is not None:
            ledger.add_rule(var, var - xi)
        return True

    def stop(status: str, st: int) -> ConstraintLedger:
        ledger.status = status
        ledger.final_stage = st
        return _finish(sys, ledger, X)

    X = None
    primary = primary_constraints(sys)
    if primary:
        stage = 1
        for c in primary:
            if not add_constraint(c, 1, "consistency"):
                return stop("inconsistent", 1)

    # general solution on the non-characteristic block
    comps = sys._reduced_solve(sys.gamma.components())
    for name in sys.kernel_names:
        u = symlang.symbol(_unknown_name(chart, name))
        ledger.unknowns[u.name] = u
        comps[name] = u
    sode_mismatch = []
    if enforce_sode:
        for a, b in chart.pairs():
            vb = symlang.symbol(b)
            if a in sys.kernel_names:
                del ledger.unknowns[comps[a].name]
                comps[a] = vb
            else:
                diff = ledger.reduce(comps[a] - vb)
                if not symlang.is_identically_zero(diff, chart):
                    sode_mismatch.append(diff)
    X = VectorFieldExpr(chart, comps)
    for c in sode_mismatch:
        stage = max(stage, 1)
        if not add_constraint(c, stage, "sode"):
            return stop("inconsistent", stage)

    pending = list(ledger.entries)
    R_t, R_s = sys.reeb
    while pending:
        if stage >= max_stages:
            return stop("max-iterations", stage)
        nxt = stage + 1
        before = len(ledger.entries)
        for entry in pending:
            X, expr = _tangency(X, entry, ledger, chart)
            if not add_constraint(expr, nxt, "tangency"):
                return stop("inconsistent", nxt)
            if reeb_tangency:
                for R in (R_t, R_s):
                    if not add_constraint(R(entry.xi), nxt, "reeb"):
                        return stop("inconsistent", nxt)
        pending = ledger.entries[before:]
        if pending:
            stage = nxt
    return stop("finalized", stage)


def _tangency(X: VectorFieldExpr, entry: LedgerEntry, ledger: ConstraintLedger, chart: Chart):
    """Solve for unknowns appearing in ``X(xi)``.

    Returns the updated field and the reduced remainder of ``X(xi)``.
    """
    while True:
        expr = ledger.reduce(X(entry.xi))
        present = [u for n, u in ledger.unknowns.items() if n not in ledger.solved and u in expr.free_symbols]
        if not present:
            return X, expr
        order = {_coord_of(ledger, u.name): u for u in present}
        u = next(order[n] for n in chart.names if n in order)
        a = sp.expand(sp.diff(expr, u))
        rest = sp.expand(expr - a * u)
        if u in a.free_symbols or u in rest.free_symbols:
            raise NonlinearUnknownError(f"unknown {u.name} enters {symlang.to_infix(expr)} nonlinearly")
        if symlang.is_identically_zero(a, chart):
            raise NonlinearUnknownError(f"unknown {u.name} has a vanishing coefficient")
        value = symlang.tidy(-rest / a)
        coord = _coord_of(ledger, u.name)
        ledger.solved[u.name] = Solved(u.name, coord, value, entry.stage)
        X = X.map(lambda c: c.xreplace({u: value}))
        for s in ledger.solved.values():
            s.value = symlang.tidy(s.value.xreplace({u: value}))


def _coord_of(ledger: ConstraintLedger, unknown: str) -> str:
    for n in ledger.chart.names:
        if _unknown_name(ledger.chart, n) == unknown:
            return n
    raise KeyError(unknown)


def _finish(sys: PrecocontactSystem, ledger: ConstraintLedger, X: VectorFieldExpr | None) -> ConstraintLedger:
    if X is not None:
        ledger.raw_field = X
        ledger.field = X.map(ledger.reduce)
    return ledger


def reduced_equation(ledger: ConstraintLedger, coordinate: str) -> Expr:
    """The final field's component along ``coordinate`` expressed on the final constraint set."""
    return ledger.reduce(ledger.field[coordinate])


# --------------------------------------------------------------------------
# multiplier equations


@dataclass(frozen=True)
class Equation:
    kind: str  # time | action | constraint | motion
    label: str
    lhs: Expr
    rhs: Expr
    momentum: Expr | None = None
    force: Expr | None = None

    def __str__(self):
        if self.kind == "motion":
            return (f"d/dt({symlang.to_infix(self.momentum)}) - ({symlang.to_infix(self.force)})"
                    f" = {symlang.to_infix(self.rhs)}")
        return f"{self.label} = {symlang.to_infix(self.rhs)}"


def multiplier_dynamics(sys: LagrangianSystem) -> list[Equation]:
    """Coordinate equations of a holonomically augmented system."""
    if sys.base_L is None:
        raise ValueError("system was not built by holonomic_augment")
    chart = sys.chart
    t, s = sys.t, sys.s
    Lp = sys.base_L
    lam = symlang.symbols(chart.multipliers)
    q = symlang.symbols(chart.positions)
    v = symlang.symbols(chart.velocities)
    out = [Equation("time", f"{t}'", sp.Symbol(f"{t}'"), sp.Integer(1)),
           Equation("action", f"{s}'", sp.Symbol(f"{s}'"), sys.L)]
    for a, f in enumerate(sys.holonomic):
        out.append(Equation("constraint", f"f^{a + 1}", f, sp.Integer(0)))
    Ls = sp.diff(Lp, s)
    for qi, vi in zip(q, v):
        p = sp.diff(Lp, vi)
        force = sp.diff(Lp, qi) + Ls * p
        source = sp.Add(*[l * (sp.diff(f, qi) + sp.diff(f, s) * p) for l, f in zip(lam, sys.holonomic)])
        out.append(Equation("motion", qi.name, sp.Integer(0), sp.expand(source), momentum=p, force=force))
    return out
