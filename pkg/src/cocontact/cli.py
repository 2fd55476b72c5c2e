"""Command-line front end: ``cocontact derive|simulate|check``."""

from __future__ import annotations

import argparse
import csv
import io
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import sympy as sp

from . import config as cfgmod
from . import symlang
from .dynamics import (
    DriftTable,
    IntegrationAborted,
    Trajectory,
    constraint_drift,
    diagnostics,
    integrate,
    system_energy,
)
from .hamiltonian import (
    CocontactSystem,
    StructureError,
    classify_submanifold,
    jacobi_bracket,
)
from .lagrangian import LagrangianSystem, NotAdmissibleError, lagrangian_reeb_fields, momentum_chart
from .precocontact import HolonomicRankError, NonlinearUnknownError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INCONSISTENT = 3
EXIT_MAX_STAGES = 4
EXIT_ABORT = 5

STATUS_EXIT = {"finalized": EXIT_OK, "inconsistent": EXIT_INCONSISTENT, "max-iterations": EXIT_MAX_STAGES}
USER_ERRORS = (cfgmod.ConfigError, NotAdmissibleError, HolonomicRankError, NonlinearUnknownError, StructureError,
               symlang.ExprSyntaxError, symlang.UnboundSymbolError)


def _infix(e) -> str:
    return symlang.to_infix(e)


def _field_lines(label: str, X) -> list[str]:
    return [f"{label}:"] + [f"  {n}' = {_infix(X[n])}" for n in X.chart.names]


# --------------------------------------------------------------------------
# derive


def run_derive(cfg: cfgmod.SystemConfig) -> tuple[str, int]:
    d = cfgmod.derive(cfg)
    sys_ = d.system
    out = [f"system {cfg.name} ({cfg.formalism}), chart ({', '.join(d.chart.names)})",
           f"structure: {d.structure}"]
    if isinstance(sys_, LagrangianSystem):
        out.append(f"L = {_infix(sys_.L)}")
        out.append(f"E_L = {_infix(sys_.energy)}")
        out.append(f"eta_L = {sys_.eta}")
        out.append(f"W = {[[_infix(c) for c in row] for row in sys_.W.tolist()]}")
        out.append(f"regularity: {sys_.regularity}")
        if d.ledger is None:
            R_t, R_s = lagrangian_reeb_fields(sys_)
            out += _field_lines("R_t", R_t) + _field_lines("R_s", R_s)
            out += _field_lines("Gamma_L", d.field)
    else:
        out.append(f"H = {_infix(sys_.H)}")
        out.append(f"tau = {sys_.tau}")
        out.append(f"eta = {sys_.eta}")
        if d.ledger is None:
            R_t, R_s = sys_.reeb
            out += _field_lines("R_t", R_t) + _field_lines("R_s", R_s)
            out += _field_lines("X_H", d.field)
    if d.ledger is not None:
        pre = d.precocontact
        out.append("characteristic distribution: " + ", ".join(f"d/d{n}" for n in pre.kernel_names))
        R_t, R_s = pre.reeb
        out += _field_lines("R_t", R_t) + _field_lines("R_s", R_s)
        out.append(d.ledger.report())
    return "\n".join(out), STATUS_EXIT[d.status]


# --------------------------------------------------------------------------
# simulate


@dataclass
class SimulationResult:
    derivation: cfgmod.Derivation
    trajectory: Trajectory
    drift: DriftTable
    energy_label: str
    aborted: str = ""

    @property
    def action_residual(self) -> float:
        r = self.trajectory.diagnostics.get("action_residual")
        return float(np.max(r)) if r is not None and len(r) else 0.0


def simulate(d: cfgmod.Derivation) -> SimulationResult:
    """Integrate a finalized derivation and attach all diagnostics."""
    if d.ledger is not None and not d.ledger.finalized:
        raise NotAdmissibleError(f"cannot simulate: constraint algorithm {d.ledger.status_text()}")
    bindings = d.gauge_bindings()
    icfg = d.integrator_config()
    aborted = ""
    try:
        traj = integrate(d.field, icfg, bindings)
    except IntegrationAborted as exc:
        traj, aborted = exc.trajectory, exc.reason
    label, _ = system_energy(d.diagnostic_system)
    with np.errstate(all="ignore"):
        diagnostics(traj, d.diagnostic_system, d.field)
        drift = constraint_drift(traj, d.ledger)
    return SimulationResult(d, traj, drift, label, aborted)


def csv_columns(res: SimulationResult) -> list[str]:
    traj = res.trajectory
    cols = list(traj.chart.names) + [res.energy_label]
    if "E_m" in traj.diagnostics:
        cols.append("E_m")
    return cols + list(res.drift.labels)


def csv_text(res: SimulationResult, stride: int = 1) -> str:
    cols = csv_columns(res)
    data = np.column_stack([res.trajectory.column(c) for c in cols])[::max(1, stride)]
    buf = io.StringIO()
    w = csv.writer(buf)  # RFC 4180: CRLF line ends, minimal quoting
    w.writerow(cols)
    for row in data:
        w.writerow(["%.12e" % x for x in row])
    return buf.getvalue()


def _gnuplot_expr(e, params) -> str:
    e = sp.sympify(e).subs({symlang.symbol(k): sp.Float(v) for k, v in params.items()})
    e = e.xreplace({r: sp.Float(r) for r in e.atoms(sp.Rational) if not r.is_Integer})
    e = e.xreplace({s: sp.Symbol(f'column("{s.name}")') for s in e.free_symbols})
    return sp.sstr(e)


def gnuplot_script(res: SimulationResult, csv_name: str) -> str:
    d = res.derivation
    cfg = d.config
    chart = d.chart
    pairs = list(zip(chart.positions, chart.velocities or chart.momenta))
    solved = {v.name for v in d.ledger.rules} if d.ledger is not None else set()
    phase = next((pq for pq in pairs if pq[0] not in solved), pairs[0])
    cart = cfg.output.get("cartesian_map")
    panels = 3 + bool(cart)
    lines = [
        f"# plots for {cfg.name}; run with: gnuplot {cfg.name}.gp",
        "set datafile separator ','",
        "set terminal pngcairo size 1200,900",
        f"set output '{cfg.name}.png'",
        f"set multiplot layout {(panels + 1) // 2},2 title '{cfg.name}'",
        "set grid",
        "",
        "set title 'state'",
        "set xlabel 't'",
        "plot " + ", ".join(f"'{csv_name}' using 't':'{q}' with lines title '{q}'" for q, _ in pairs),
        "",
        "set title 'phase portrait'",
        f"set xlabel '{phase[0]}'",
        f"set ylabel '{phase[1]}'",
        f"plot '{csv_name}' using '{phase[0]}':'{phase[1]}' with lines notitle",
        "unset ylabel",
        "",
        "set title 'energy'",
        "set xlabel 't'",
    ]
    energy = [f"'{csv_name}' using 't':'{res.energy_label}' with lines title '{res.energy_label}'"]
    if "E_m" in csv_columns(res):
        energy.append(f"'{csv_name}' using 't':'E_m' with lines title 'E_m'")
    lines.append("plot " + ", ".join(energy))
    if cart:
        names = list(cart)
        exprs = [symlang.parse(cart[k], chart, params=cfg.params) for k in names[:2]]
        gx, gy = (_gnuplot_expr(e, cfg.params) for e in exprs)
        lines += ["", "set title 'trajectory'", f"set xlabel '{names[0]}'", f"set ylabel '{names[1]}'",
                  "set size ratio -1",
                  f"plot '{csv_name}' using ({gx}):({gy}) with lines notitle"]
    lines += ["unset multiplot", ""]
    return "\n".join(lines)


def summary_text(res: SimulationResult) -> str:
    traj = res.trajectory
    out = [f"samples: {len(traj)}, t in [{traj.times[0]:g}, {traj.times[-1]:g}]",
           f"time tracking error: {traj.time_tracking_error():.3e}",
           f"max action residual: {res.action_residual:.3e}"]
    if len(res.drift):
        out.append("constraint drift:")
        out += ["  " + r for r in str(res.drift).splitlines()]
    if res.aborted:
        out.append(res.aborted)
    return "\n".join(out)


def run_simulate(cfg: cfgmod.SystemConfig, out_dir: Path, plots: bool = False, tag: str = "") -> tuple[str, int]:
    d = cfgmod.derive(cfg)
    if d.ledger is not None and not d.ledger.finalized:
        return d.ledger.status_text(), STATUS_EXIT[d.status]
    res = simulate(d)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{cfg.name}{tag}"
    csv_name = f"{stem}_trajectory.csv"
    stride = int(cfg.output.get("stride", 1))
    (out_dir / csv_name).write_bytes(csv_text(res, stride).encode())
    written = [csv_name]
    if plots:
        (out_dir / f"{stem}.gp").write_text(gnuplot_script(res, csv_name).replace(f"{cfg.name}.", f"{stem}."))
        written.append(f"{stem}.gp")
    text = summary_text(res) + "\nwrote " + ", ".join(str(out_dir / w) for w in written)
    return text, EXIT_ABORT if res.aborted else EXIT_OK


# --------------------------------------------------------------------------
# check


def bracket_table(system: CocontactSystem) -> list[tuple[str, sp.Expr]]:
    c = system.chart
    s = c.symbol(c.action_name)
    rows = []
    for q in c.positions:
        for p in c.momenta:
            rows.append((f"{{{q},{p}}}", jacobi_bracket(system, c.symbol(q), c.symbol(p))))
    rows += [(f"{{{q},{c.action_name}}}", jacobi_bracket(system, c.symbol(q), s)) for q in c.positions]
    rows += [(f"{{{p},{c.action_name}}}", jacobi_bracket(system, c.symbol(p), s)) for p in c.momenta]
    return rows


def run_check(cfg: cfgmod.SystemConfig) -> tuple[str, int]:
    try:
        d = cfgmod.derive(cfg)
    except NotAdmissibleError as exc:
        return f"structure: {str(exc).removeprefix('not admissible: ')}\n{exc}", EXIT_CONFIG
    out = [f"structure: {d.structure}"]
    if d.precocontact is not None:
        pre = d.precocontact
        out.append("characteristic distribution spanned by " + ", ".join(f"d/d{n}" for n in pre.kernel_names))
        R_t, R_s = pre.reeb
    elif isinstance(d.system, LagrangianSystem):
        R_t, R_s = lagrangian_reeb_fields(d.system)
    else:
        R_t, R_s = d.system.reeb
    out += _field_lines("R_t", R_t) + _field_lines("R_s", R_s)
    darboux, where = None, ""
    if isinstance(d.system, CocontactSystem) and d.system.is_darboux:
        darboux = d.system
    elif isinstance(d.system, LagrangianSystem) and d.precocontact is None:
        darboux, where = CocontactSystem.from_chart(momentum_chart(d.system)), " (Legendre image)"
    if darboux is not None:
        out.append(f"brackets{where}: " + ", ".join(f"{k}={_infix(v)}" for k, v in bracket_table(darboux)))
    spec = cfgmod.submanifold_from_config(cfg)
    if spec is not None:
        if not isinstance(d.system, CocontactSystem):
            raise cfgmod.ConfigError("[check].submanifold", "needs the hamiltonian formalism")
        out.append(f"submanifold: {classify_submanifold(d.system, spec)}")
    return "\n".join(out), STATUS_EXIT[d.status]


# --------------------------------------------------------------------------
# entry point


def parse_sweep(spec: str) -> tuple[str, list[float]]:
    try:
        name, rng = spec.split("=", 1)
        a, b, h = (float(x) for x in rng.split(":"))
    except ValueError:
        raise cfgmod.ConfigError("--sweep", f"expected name=start:stop:step, got {spec!r}") from None
    if h <= 0 or b < a:
        raise cfgmod.ConfigError("--sweep", "step must be positive and stop >= start")
    n = int(np.floor((b - a) / h + 1e-9))
    return name.strip(), [round(a + k * h, 12) for k in range(n + 1)]


def _sweep_job(raw: dict, name: str, value: float, out_dir: str, plots: bool) -> tuple[float, str, int]:
    try:
        cfg = cfgmod.parse_config(cfgmod.with_parameter(raw, name, value))
        text, code = run_simulate(cfg, Path(out_dir), plots, tag=f"_{name}{value:g}")
    except USER_ERRORS as exc:
        text, code = f"error: {exc}", EXIT_CONFIG
    return value, text, code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cocontact", description="Derive and simulate cocontact mechanical systems.")
    p.add_argument("command", choices=["derive", "simulate", "check"])
    p.add_argument("config", help=f"TOML file or built-in example ({', '.join(cfgmod.BUILTINS)})")
    p.add_argument("--plots", action="store_true", help="also write a gnuplot script")
    p.add_argument("--out", default=".", help="output directory (default: current)")
    p.add_argument("--gamma", type=float, help="override the gamma parameter")
    p.add_argument("--sweep", help="parameter sweep name=start:stop:step (simulate only)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out)
    try:
        raw = cfgmod.load_raw(args.config)
        if args.gamma is not None:
            raw = cfgmod.with_parameter(raw, "gamma", args.gamma)
        if args.sweep:
            if args.command != "simulate":
                raise cfgmod.ConfigError("--sweep", "only valid with simulate")
            name, values = parse_sweep(args.sweep)
            cfgmod.with_parameter(raw, name, values[0])
            with ProcessPoolExecutor() as pool:
                jobs = [pool.submit(_sweep_job, raw, name, v, str(out_dir), args.plots) for v in values]
                results = [j.result() for j in jobs]
            for value, text, code in results:
                print(f"== {name} = {value:g} (exit {code})\n{text}")
            return max(code for _, _, code in results)
        cfg = cfgmod.parse_config(raw)
        if args.command == "derive":
            text, code = run_derive(cfg)
        elif args.command == "check":
            text, code = run_check(cfg)
        else:
            text, code = run_simulate(cfg, out_dir, args.plots)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(text)
    return code


if __name__ == "__main__":
    sys.exit(main())
