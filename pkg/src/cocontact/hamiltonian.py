"""Cocontact structures and their Hamiltonian dynamics."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np
import sympy as sp
from sympy.polys.matrices import DomainMatrix
from sympy.polys.matrices.exceptions import DMNonInvertibleMatrixError

from . import symlang
from .exterior import (
    Chart,
    DifferentialForm,
    Probes,
    Role,
    SingularMatrixError,
    VectorFieldExpr,
    characteristic_matrix,
    compile_field,
    contract,
    exterior_derivative,
    flat_matrix,
    lu_solve,
    numeric_rank,
    null_space,
    pullback,
    wedge,
    wedge_power,
)
from .symlang import Expr

VOLUME_TOL = 1e-9
SUBMANIFOLD_TOL = 1e-9


class StructureError(ValueError):
    pass


class NotDarbouxError(StructureError):
    pass


@dataclass(frozen=True)
class Structure:
    kind: str  # "cocontact" | "precocontact" | "invalid"
    cls: int | None = None
    reason: str = ""
    witness: dict | None = None

    @property
    def ok(self) -> bool:
        return self.kind != "invalid"

    def __str__(self):
        if self.kind == "cocontact":
            return f"cocontact, class {self.cls}"
        if self.kind == "precocontact":
            return f"precocontact, class {self.cls}"
        return f"invalid: {self.reason}"


def verify_cocontact(tau: DifferentialForm, eta: DifferentialForm, probes: Probes | None = None) -> Structure:
    """Classify ``(tau, eta)`` as cocontact, precocontact(class) or invalid."""
    chart = tau.chart
    if tau.degree != 1 or eta.degree != 1 or eta.chart != chart:
        raise StructureError("tau and eta must be 1-forms on one chart")
    if not exterior_derivative(tau).is_zero():
        return Structure("invalid", reason="τ not closed")
    d_eta = exterior_derivative(eta)
    K = characteristic_matrix(tau, eta)
    if probes is None:
        probes = Probes.for_exprs(chart, [*tau.coeffs.values(), *eta.coeffs.values()])

    if chart.dim % 2 == 0 and chart.dim >= 2:
        top = wedge(wedge(tau, eta), wedge_power(d_eta, (chart.dim - 2) // 2))
        coeff = top.coeffs.get(tuple(range(chart.dim)), sp.Integer(0))
        vals = probes.evaluator([coeff])()[:, 0]
        if np.all(np.isfinite(vals)) and np.all(np.abs(vals) > VOLUME_TOL):
            return Structure("cocontact", cls=chart.dim)

    mats = probes.matrices(K)
    ranks = [numeric_rank(m) for m in mats]
    first = ranks[0]
    for k, r in enumerate(ranks):
        if r != first:
            return Structure("invalid", reason=f"class not constant ({first} vs {r})", witness=probes.point(k))
    if first % 2:
        return Structure("invalid", cls=first, reason=f"class is odd ({first})", witness=probes.point(0))
    if first < 2:
        return Structure("invalid", cls=first, reason=f"class {first} below 2", witness=probes.point(0))
    if first == chart.dim:
        # Full class but the volume form vanished at some probe.
        return Structure("invalid", cls=first, reason="top form vanishes at a probe", witness=probes.point(0))
    return Structure("precocontact", cls=first)


def solve_symbolic(M: sp.Matrix, b: Sequence[Expr]) -> list[Expr]:
    """Exact solution of ``M x = b``.

    Elimination runs in sympy's ``DomainMatrix`` which keeps intermediate
    entries normalized; plain ``Matrix.LUsolve`` swells badly on 6x6 blocks.
    """
    A = sp.Matrix.hstack(M, sp.Matrix(list(b)))
    dA = DomainMatrix.from_Matrix(A).to_field()
    n = M.cols
    try:
        x = dA[:, :n].lu_solve(dA[:, n:]).to_Matrix()
    except (DMNonInvertibleMatrixError, ZeroDivisionError) as exc:
        raise SingularMatrixError(f"flat matrix is singular: {exc}") from exc
    return [sp.cancel(c) for c in x]


class CocontactSystem:
    """A chart with a cocontact pair ``(tau, eta)`` and a Hamiltonian ``H``.

    ``kinetic`` and ``potential`` are optional: when both are given they
    define the mechanical energy used in diagnostics.
    """

    def __init__(self, chart: Chart, tau: DifferentialForm, eta: DifferentialForm, H: Expr = 0,
                 kinetic: Expr | None = None, potential: Expr | None = None, name: str = ""):
        self.chart = chart
        self.tau = tau
        self.eta = eta
        self.H = sp.sympify(H)
        self.kinetic = None if kinetic is None else sp.sympify(kinetic)
        self.potential = None if potential is None else sp.sympify(potential)
        self.name = name

    @classmethod
    def canonical(cls, n: int | Sequence[str] = 1, H: Expr = 0, **kw) -> "CocontactSystem":
        chart = Chart.canonical(n)
        return cls(chart, *canonical_forms(chart), H=H, **kw)

    @classmethod
    def from_chart(cls, chart: Chart, H: Expr = 0, **kw) -> "CocontactSystem":
        return cls(chart, *canonical_forms(chart), H=H, **kw)

    def __repr__(self):
        return f"CocontactSystem({self.chart}, H={symlang.to_infix(self.H)})"

    @cached_property
    def d_eta(self) -> DifferentialForm:
        return exterior_derivative(self.eta)

    @cached_property
    def flat(self) -> sp.Matrix:
        return flat_matrix(self.tau, self.eta)

    @cached_property
    def probes(self) -> Probes:
        exprs = [*self.tau.coeffs.values(), *self.eta.coeffs.values(), self.H]
        return Probes.for_exprs(self.chart, exprs)

    @cached_property
    def structure(self) -> Structure:
        return verify_cocontact(self.tau, self.eta, self.probes)

    def require_cocontact(self):
        if self.structure.kind != "cocontact":
            raise StructureError(
                f"{self.structure}; degenerate structures are handled by cocontact.precocontact")

    @cached_property
    def reeb(self) -> tuple[VectorFieldExpr, VectorFieldExpr]:
        return reeb_fields(self)

    @property
    def is_darboux(self) -> bool:
        try:
            _require_darboux(self)
        except NotDarbouxError:
            return False
        return True


def canonical_forms(chart: Chart) -> tuple[DifferentialForm, DifferentialForm]:
    """``tau = dt`` and ``eta = ds - p_i dq^i`` on a momentum chart."""
    tau = DifferentialForm.basis(chart, chart.time_name)
    comps = {chart.action_name: sp.Integer(1)}
    for q, p in zip(chart.positions, chart.momenta):
        comps[q] = -symlang.symbol(p)
    return tau, DifferentialForm.one_form(chart, comps)


def _require_darboux(sys: CocontactSystem):
    chart = sys.chart
    allowed = {Role.TIME, Role.POSITION, Role.MOMENTUM, Role.ACTION}
    if not chart.momenta or any(r not in allowed for r in chart.roles):
        raise NotDarbouxError(f"chart {chart} is not a Darboux chart (t, q, p, s)")
    tau0, eta0 = canonical_forms(chart)
    same = lambda a, b: all(sp.expand(c) == 0 for c in (a - b).coeffs.values())
    if not (same(sys.tau, tau0) and same(sys.eta, eta0)):
        raise NotDarbouxError("forms are not in Darboux normal form (tau = dt, eta = ds - p dq)")


def reeb_fields(sys: CocontactSystem) -> tuple[VectorFieldExpr, VectorFieldExpr]:
    """The pair ``(R_t, R_s)`` with ``flat(R_t) = tau`` and ``flat(R_s) = eta``."""
    sys.require_cocontact()
    chart = sys.chart
    if sys.is_darboux:
        return VectorFieldExpr.basis(chart, chart.time_name), VectorFieldExpr.basis(chart, chart.action_name)
    R_t = solve_symbolic(sys.flat, sys.tau.components())
    R_s = solve_symbolic(sys.flat, sys.eta.components())
    return (VectorFieldExpr(chart, dict(zip(chart.names, R_t))),
            VectorFieldExpr(chart, dict(zip(chart.names, R_s))))


def flat_map(sys: CocontactSystem, X: VectorFieldExpr) -> DifferentialForm:
    comps = sys.flat * sp.Matrix(X.components())
    return DifferentialForm.one_form(sys.chart, {n: sp.expand(c) for n, c in zip(sys.chart.names, comps)})


def _numeric_matrix(sys: CocontactSystem, M: sp.Matrix, point: Mapping[str, float],
                    bindings: symlang.Bindings | None) -> np.ndarray:
    b = bindings or symlang.Bindings({})
    values = {**b.values, **{k: v for k, v in point.items() if k not in sys.chart.names}}
    b = symlang.Bindings(values, b.externals)
    fn = symlang.compile_numeric(list(M), list(sys.chart.symbols), b)
    args = [float(point[n]) for n in sys.chart.names]
    return np.array(fn(*args), dtype=float).reshape(M.rows, M.cols)


def sharp_map(sys: CocontactSystem, alpha: DifferentialForm | Sequence[float], point: Mapping[str, float],
              bindings: symlang.Bindings | None = None) -> np.ndarray:
    """Components of ``sharp(alpha)`` at ``point`` (numeric LU solve)."""
    sys.require_cocontact()
    M = _numeric_matrix(sys, sys.flat, point, bindings)
    if isinstance(alpha, DifferentialForm):
        a = _numeric_matrix(sys, sp.Matrix(alpha.components()), point, bindings)[:, 0]
    else:
        a = np.asarray(alpha, dtype=float)
    return lu_solve(M, a)


def sharp_symbolic(sys: CocontactSystem, alpha: DifferentialForm) -> VectorFieldExpr:
    sys.require_cocontact()
    comps = solve_symbolic(sys.flat, alpha.components())
    return VectorFieldExpr(sys.chart, dict(zip(sys.chart.names, comps)))


def lambda_hat(sys: CocontactSystem, alpha: DifferentialForm) -> VectorFieldExpr:
    """``sharp(alpha) - alpha(R_s) R_s - alpha(R_t) R_t``."""
    R_t, R_s = sys.reeb
    out = sharp_symbolic(sys, alpha) - R_s.scale(contract(R_s, alpha)) - R_t.scale(contract(R_t, alpha))
    return out.map(sp.cancel)


def jacobi_bracket(sys: CocontactSystem, f: Expr, g: Expr) -> Expr:
    _require_darboux(sys)
    chart = sys.chart
    f, g = sp.sympify(f), sp.sympify(g)
    s = chart.symbol(chart.action_name)
    fs, gs = sp.diff(f, s), sp.diff(g, s)
    out = -f * gs + g * fs
    for qn, pn in zip(chart.positions, chart.momenta):
        q, p = chart.symbol(qn), chart.symbol(pn)
        fq, fp, gq, gp = sp.diff(f, q), sp.diff(f, p), sp.diff(g, q), sp.diff(g, p)
        out += fq * gp - gq * fp - p * (fp * gs - gp * fs)
    return sp.expand(out)


def hamiltonian_vector_field(sys: CocontactSystem, H: Expr | None = None) -> VectorFieldExpr:
    sys.require_cocontact()
    _require_darboux(sys)
    chart = sys.chart
    H = sys.H if H is None else sp.sympify(H)
    s = chart.symbol(chart.action_name)
    Hs = sp.diff(H, s)
    comps = {chart.time_name: sp.Integer(1)}
    s_comp = -H
    for qn, pn in zip(chart.positions, chart.momenta):
        q, p = chart.symbol(qn), chart.symbol(pn)
        Hp = sp.diff(H, p)
        comps[qn] = Hp
        comps[pn] = -(sp.diff(H, q) + p * Hs)
        s_comp += p * Hp
    comps[chart.action_name] = s_comp
    return VectorFieldExpr(chart, {k: sp.expand(v) for k, v in comps.items()})


# --------------------------------------------------------------------------
# submanifolds


@dataclass
class SubmanifoldSpec:
    """A submanifold given parametrically or implicitly.

    Parametric: ``embedding`` maps every chart coordinate to an expression in
    ``parameters`` (missing coordinates are set to 0).  Implicit:
    ``constraints`` is a list of defining functions and ``points`` a list of
    coordinate dicts lying on the zero set.
    """

    embedding: Mapping[str, Expr] | None = None
    parameters: Sequence[str] = ()
    constraints: Sequence[Expr] = ()
    points: Sequence[Mapping[str, float]] = ()
    bindings: symlang.Bindings = field(default_factory=lambda: symlang.Bindings({}))

    @property
    def parametric(self) -> bool:
        return self.embedding is not None


def _tangent_and_annihilator(sys: CocontactSystem, N: SubmanifoldSpec):
    """Yield ``(point, tangent basis (dim x k), annihilator basis (m x dim))`` per probe."""
    chart = sys.chart
    if N.parametric:
        pchart = Chart.generic(N.parameters) if N.parameters else None
        images = [sp.sympify(N.embedding.get(n, 0)) for n in chart.names]
        params = symlang.symbols(N.parameters)
        jac = sp.Matrix([[sp.diff(e, u) for u in params] for e in images]) if params else sp.zeros(chart.dim, 0)
        if pchart is not None:
            probes = Probes.for_exprs(pchart, images)
            pts = [probes.point(k) for k in range(probes.count)]
        else:
            pts = [{}]
        b = N.bindings
        for pt in pts:
            vals = {**b.values, **pt}
            sub = symlang.Bindings(vals, b.externals)
            x = {n: symlang.evaluate(e, sub) for n, e in zip(chart.names, images)}
            J = np.array([[symlang.evaluate(c, sub) for c in row] for row in jac.tolist()], dtype=float).reshape(
                chart.dim, len(params))
            ann = null_space(J.T).T if J.shape[1] else np.eye(chart.dim)
            yield x, J, ann
        return
    if not N.points:
        raise StructureError("implicit submanifold needs probe points")
    cons = [sp.sympify(c) for c in N.constraints]
    jac = sp.Matrix([[sp.diff(c, x) for x in chart.symbols] for c in cons]) if cons else sp.zeros(0, chart.dim)
    for pt in N.points:
        sub = symlang.Bindings({**N.bindings.values, **pt}, N.bindings.externals)
        for c in cons:
            v = symlang.evaluate(c, sub)
            if abs(v) > SUBMANIFOLD_TOL:
                raise StructureError(f"probe point {dict(pt)} violates {symlang.to_infix(c)} (= {v:.3e})")
        G = np.array([[symlang.evaluate(e, sub) for e in row] for row in jac.tolist()], dtype=float).reshape(
            len(cons), chart.dim)
        if cons and numeric_rank(G) < len(cons):
            raise StructureError(f"defining functions are not independent at {dict(pt)}")
        T = null_space(G) if cons else np.eye(chart.dim)
        yield dict(pt), T, G


def classify_submanifold(sys: CocontactSystem, N: SubmanifoldSpec) -> str:
    """One of ``"Legendrian"``, ``"isotropic"``, ``"coisotropic"``, ``"none"``."""
    sys.require_cocontact()
    chart = sys.chart
    n = (chart.dim - 2) // 2
    R_t, R_s = sys.reeb
    R = sp.Matrix([R_t.components(), R_s.components()])

    if N.parametric and N.parameters:
        pchart = Chart.generic(N.parameters)
        mapping = {k: sp.sympify(N.embedding.get(k, 0)) for k in chart.names}
        isotropic = (pullback(sys.tau, pchart, mapping).is_zero()
                     and pullback(sys.eta, pchart, mapping).is_zero())
    else:
        isotropic = None  # decided numerically below

    dims = set()
    coisotropic = True
    numeric_isotropic = True
    for pt, T, A in _tangent_and_annihilator(sys, N):
        x = {**N.bindings.values, **pt}
        b = symlang.Bindings({k: v for k, v in x.items() if k not in chart.names}, N.bindings.externals)
        k = numeric_rank(T) if T.size else 0
        dims.add(k)
        tau = _numeric_matrix(sys, sp.Matrix(sys.tau.components()), x, b)[:, 0]
        eta = _numeric_matrix(sys, sp.Matrix(sys.eta.components()), x, b)[:, 0]
        if T.size and (np.max(np.abs(tau @ T)) > SUBMANIFOLD_TOL or np.max(np.abs(eta @ T)) > SUBMANIFOLD_TOL):
            numeric_isotropic = False
        M = _numeric_matrix(sys, sys.flat, x, b)
        Rn = _numeric_matrix(sys, R, x, b)
        for alpha in A:
            if np.linalg.norm(alpha) < 1e-12:
                continue
            v = lu_solve(M, alpha) - (alpha @ Rn[1]) * Rn[1] - (alpha @ Rn[0]) * Rn[0]
            # v must lie in the tangent space: its component orthogonal to T vanishes.
            if T.size:
                Q, _ = np.linalg.qr(T)
                resid = v - Q @ (Q.T @ v)
            else:
                resid = v
            if np.linalg.norm(resid) > SUBMANIFOLD_TOL * max(1.0, np.linalg.norm(v)):
                coisotropic = False
    if len(dims) != 1:
        raise StructureError(f"submanifold dimension varies across probes: {sorted(dims)}")
    dim_N = dims.pop()
    if isotropic is None:
        isotropic = numeric_isotropic
    if isotropic and dim_N == n:
        return "Legendrian"
    if isotropic:
        return "isotropic"
    if coisotropic:
        return "coisotropic"
    return "none"


# --------------------------------------------------------------------------
# residuals


def field_residual(X: VectorFieldExpr, times: np.ndarray, states: np.ndarray,
                   bindings: symlang.Bindings) -> np.ndarray:
    """``x'(t) - X(x(t))`` per sample, derivatives by second-order finite differences."""
    times = np.asarray(times, dtype=float)
    states = np.asarray(states, dtype=float)
    if len(times) < 3:
        raise ValueError("residuals need at least 3 samples")
    xdot = np.gradient(states, times, axis=0, edge_order=2)
    return xdot - compile_field(X, bindings)(states)


def hamilton_residual(sys: CocontactSystem, traj) -> np.ndarray:
    """Per-sample residuals of the Hamilton equations, columns in chart order.

    The ``t`` column is the residual of ``t' = 1``; the ``q``, ``p`` and ``s``
    columns are the three coordinate equations.
    """
    return field_residual(hamiltonian_vector_field(sys), traj.times, traj.states, traj.bindings)
