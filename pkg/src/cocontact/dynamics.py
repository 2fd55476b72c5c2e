"""Numerical integration of derived fields and trajectory diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import sympy as sp
from scipy.integrate import solve_ivp

from . import symlang
from .exterior import Chart, VectorFieldExpr, compile_exprs
from .symlang import Expr

DRIFT_TOL = 1e-6
TIME_TRACK_TOL = 1e-12


class IntegrationAborted(RuntimeError):
    """Raised when the field cannot be evaluated; carries the partial trajectory."""

    def __init__(self, reason: str, trajectory: "Trajectory"):
        super().__init__(reason)
        self.reason = reason
        self.trajectory = trajectory


@dataclass
class IntegratorConfig:
    t_span: tuple[float, float]
    initial: Mapping[str, float]
    method: str = "rk4"
    dt: float = 1e-3
    atol: float = 1e-9
    rtol: float = 1e-7

    def __post_init__(self):
        t0, t1 = map(float, self.t_span)
        if not t1 > t0:
            raise ValueError(f"empty time span {self.t_span}")
        if self.method not in ("rk4", "rk45"):
            raise ValueError(f"unknown method {self.method!r}")
        if not self.dt > 0:
            raise ValueError("step must be positive")
        self.t_span = (t0, t1)


@dataclass
class Trajectory:
    chart: Chart
    times: np.ndarray
    states: np.ndarray
    bindings: symlang.Bindings
    diagnostics: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self):
        return len(self.times)

    def column(self, name: str) -> np.ndarray:
        if name in self.chart.names:
            return self.states[:, self.chart.index(name)]
        return self.diagnostics[name]

    def evaluate(self, e: Expr) -> np.ndarray:
        return compile_exprs(self.chart, [e], self.bindings)(self.states)[:, 0]

    def time_tracking_error(self) -> float:
        return float(np.max(np.abs(self.column(self.chart.time_name) - self.times)))


def initial_vector(chart: Chart, initial: Mapping[str, float]) -> np.ndarray:
    missing = [n for n in chart.names if n not in initial]
    if missing:
        raise ValueError(f"no initial value for {', '.join(missing)}")
    return np.array([float(initial[n]) for n in chart.names])


def _diagnose(field_: VectorFieldExpr, x: np.ndarray, bindings: symlang.Bindings, exc: Exception) -> str:
    """Find the offending subexpression by checked re-evaluation."""
    point = {**bindings.values, **dict(zip(field_.chart.names, x))}
    b = symlang.Bindings(point, bindings.externals)
    for name, c in field_.coeffs.items():
        try:
            symlang.evaluate(c, b)
        except symlang.DomainError as err:
            return f"d/d{name} component: {err}"
    return f"{type(exc).__name__}: {exc}"


def integrate(field_: VectorFieldExpr, cfg: IntegratorConfig, bindings: symlang.Bindings) -> Trajectory:
    chart = field_.chart
    f = symlang.compile_numeric(field_.components(), list(chart.symbols), bindings)
    x0 = initial_vector(chart, {chart.time_name: cfg.t_span[0], **cfg.initial})
    # a step can jump over a pole such as r = 0 without ever sampling it, so
    # every denominator must keep the sign it has at the initial state
    poles = _denominators(field_)
    g = symlang.compile_numeric(poles, list(chart.symbols), bindings) if poles else None

    def rhs(x):
        try:
            with np.errstate(all="raise", under="ignore"):
                out = np.array(f(*x), dtype=float)
                if g is not None:
                    crossed = np.sign(np.array(g(*x), dtype=float)) != sign0
                    if np.any(crossed):
                        bad = poles[int(np.argmax(crossed))]
                        raise _Abort(f"denominator {symlang.to_infix(bad)} crossed zero")
        except (ValueError, ZeroDivisionError, OverflowError, FloatingPointError, TypeError) as exc:
            raise _Abort(_diagnose(field_, x, bindings, exc)) from exc
        if not np.all(np.isfinite(out)):
            raise _Abort(_diagnose(field_, x, bindings, FloatingPointError("non-finite field value")))
        return out

    sign0 = None
    if g is not None:
        try:
            sign0 = np.sign(np.array(g(*x0), dtype=float))
        except (ValueError, ZeroDivisionError, OverflowError, TypeError) as exc:
            raise IntegrationAborted(f"integration aborted at t = {x0[0]:.6g}: {exc}",
                                     Trajectory(chart, x0[:1].copy(), x0[None, :], bindings)) from exc
    if cfg.method == "rk4":
        times, states, reason = _rk4(rhs, x0, cfg)
    else:
        times, states, reason = _rk45(rhs, x0, cfg)
    traj = Trajectory(chart, times, states, bindings)
    if reason:
        raise IntegrationAborted(f"integration aborted at t = {times[-1]:.6g}: {reason}", traj)
    return traj


class _Abort(Exception):
    pass


def _denominators(field_: VectorFieldExpr) -> list[Expr]:
    out = []
    for c in field_.components():
        for p in c.atoms(sp.Pow):
            base, e = p.as_base_exp()
            if e.is_negative and not base.is_number and base not in out:
                out.append(base)
    return out


def _rk4(rhs, x0, cfg):
    t0, t1 = cfg.t_span
    n = max(1, int(round((t1 - t0) / cfg.dt)))
    h = (t1 - t0) / n
    times = t0 + h * np.arange(n + 1)
    states = np.empty((n + 1, len(x0)))
    states[0] = x0
    x = x0.copy()
    comp = np.zeros_like(x)  # Kahan compensation
    for k in range(n):
        try:
            k1 = rhs(x)
            k2 = rhs(x + 0.5 * h * k1)
            k3 = rhs(x + 0.5 * h * k2)
            k4 = rhs(x + h * k3)
        except _Abort as exc:
            return times[:k + 1], states[:k + 1], str(exc)
        y = h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4) - comp
        new = x + y
        comp = (new - x) - y
        x = new
        states[k + 1] = x
    return times, states, ""


def _rk45(rhs, x0, cfg):
    last = {"t": cfg.t_span[0], "x": x0}
    reason = ""

    def fun(t, x):
        return rhs(x)

    try:
        sol = solve_ivp(fun, cfg.t_span, x0, method="RK45", atol=cfg.atol, rtol=cfg.rtol,
                        max_step=max(cfg.dt, (cfg.t_span[1] - cfg.t_span[0]) / 10))
    except _Abort as exc:
        return np.array([last["t"]]), last["x"][None, :], str(exc)
    times, states = sol.t, sol.y.T
    if sol.status != 0:
        reason = f"step underflow: {sol.message}"
    return times, states, reason


# --------------------------------------------------------------------------
# diagnostics


def cumulative_trapezoid(y: np.ndarray, t: np.ndarray, dy: np.ndarray | None = None) -> np.ndarray:
    """Running trapezoid integral; with ``dy`` the endpoint correction is added.

    On a uniform grid the corrected rule subtracts ``h^2/12 (y'(t_k) - y'(t_0))``,
    which cancels the leading error term.
    """
    out = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(t) * (y[1:] + y[:-1]))])
    if dy is not None:
        h = np.diff(t)
        if np.allclose(h, h[0], rtol=1e-9, atol=0):
            out -= h[0] ** 2 / 12.0 * (dy - dy[0])
    return out


def system_energy(system) -> tuple[str, Expr]:
    from .hamiltonian import CocontactSystem
    from .lagrangian import LagrangianSystem

    lag = getattr(system, "lagrangian", None)
    if isinstance(system, LagrangianSystem):
        return "E_L", system.energy
    if lag is not None:
        return "E_L", lag.energy
    if isinstance(system, CocontactSystem):
        return "H", system.H
    return "H", system.generator


def mechanical_energy(system) -> Expr | None:
    src = getattr(system, "lagrangian", None) or system
    kin, pot = getattr(src, "kinetic", None), getattr(src, "potential", None)
    if kin is None or pot is None:
        return None
    return kin + pot


def diagnostics(traj: Trajectory, system, field_: VectorFieldExpr) -> dict[str, np.ndarray]:
    """Energy, mechanical energy and action residual per sample.

    The action residual compares ``s(t) - s(0)`` with the integral of the
    field's ``s`` component along the samples.
    """
    chart = traj.chart
    label, energy = system_energy(system)
    Em = mechanical_energy(system)
    density = field_[chart.action_name]
    exprs = [energy, density, field_(density)]
    if Em is not None:
        exprs.append(Em)
    vals = compile_exprs(chart, exprs, traj.bindings)(traj.states)
    out = {label: vals[:, 0]}
    if Em is not None:
        out["E_m"] = vals[:, 3]
    s = traj.column(chart.action_name)
    integral = cumulative_trapezoid(vals[:, 1], traj.times, vals[:, 2])
    out["action_residual"] = np.abs(s - s[0] - integral)
    traj.diagnostics.update(out)
    return out


@dataclass
class DriftTable:
    labels: list[str]
    constraints: list[Expr]
    max_abs: list[float]
    series: np.ndarray
    tol: float = DRIFT_TOL

    @property
    def ok(self) -> bool:
        return all(d <= self.tol for d in self.max_abs)

    def __len__(self):
        return len(self.labels)

    def __str__(self):
        if not self.labels:
            return "(no constraints)"
        rows = []
        for lab, c, d in zip(self.labels, self.constraints, self.max_abs):
            flag = "ok" if d <= self.tol else "FAIL"
            rows.append(f"{lab}: max |{symlang.to_infix(c)}| = {d:.3e}  {flag}")
        return "\n".join(rows)


def constraint_drift(traj: Trajectory, ledger, tol: float = DRIFT_TOL) -> DriftTable:
    cons = list(ledger.constraints) if ledger is not None else []
    labels = [f"xi_{k}" for k in range(1, len(cons) + 1)]
    if not cons:
        return DriftTable([], [], [], np.zeros((len(traj), 0)), tol)
    series = compile_exprs(traj.chart, cons, traj.bindings)(traj.states)
    for lab, col in zip(labels, series.T):
        traj.diagnostics[lab] = col
    return DriftTable(labels, cons, [float(np.max(np.abs(c))) for c in series.T], series, tol)


def complete_initial_state(chart: Chart, initial: Mapping[str, float], ledger, bindings: symlang.Bindings,
                           t0: float = 0.0) -> dict[str, float]:
    """Fill missing coordinates from the ledger's rewrite rules.

    ``t`` defaults to ``t0`` and the action to 0.  Coordinates a rule solves
    for are computed from the remaining ones.
    """
    state = {chart.time_name: t0, chart.action_name: 0.0}
    state.update({k: float(v) for k, v in initial.items()})
    rules = {} if ledger is None else {k.name: v for k, v in ledger.rules.items()}
    pending = [n for n in chart.names if n not in state]
    while pending:
        progress = False
        for n in list(pending):
            rhs = rules.get(n)
            if rhs is None:
                continue
            needed = {s.name for s in rhs.free_symbols} & set(chart.names)
            if needed <= state.keys():
                b = symlang.Bindings({**bindings.values, **state}, bindings.externals)
                state[n] = symlang.evaluate(rhs, b)
                pending.remove(n)
                progress = True
        if not progress:
            raise ValueError(f"no initial value for {', '.join(pending)} and no constraint determines it")
    return state

