"""System definition files and the derivation pipeline behind the CLI."""

from __future__ import annotations

import copy
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import sympy as sp

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import symlang
from .dynamics import IntegratorConfig, complete_initial_state
from .exterior import Chart, DifferentialForm, VectorFieldExpr
from .hamiltonian import CocontactSystem, SubmanifoldSpec, canonical_forms, hamiltonian_vector_field
from .lagrangian import LagrangianSystem, NotAdmissibleError, herglotz_field
from .precocontact import ConstraintLedger, PrecocontactSystem, constraint_algorithm, holonomic_augment

BUILTINS = ("canonical", "kepler", "oscillator", "pendulum")
SECTIONS = {"system", "parameters", "externals", "constraints", "structure", "integrator", "output", "check"}


class ConfigError(ValueError):
    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}")
        self.where = where


def builtin_path(name: str):
    return resources.files("cocontact") / "configs" / f"{name}.toml"


def load_raw(source: str | Path) -> dict:
    """Read a config file, or a built-in example by name."""
    text_source = str(source)
    if text_source in BUILTINS:
        text = builtin_path(text_source).read_text()
        where = f"<builtin {text_source}>"
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(str(path), f"no such file (built-ins: {', '.join(BUILTINS)})")
        text = path.read_text()
        where = str(path)
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(where, f"TOML error: {exc}") from exc
    raw.setdefault("_source", where)
    return raw


def with_parameter(raw: dict, name: str, value: float) -> dict:
    out = copy.deepcopy(raw)
    params = out.setdefault("parameters", {})
    if name not in params:
        raise ConfigError("[parameters]", f"no parameter named {name!r} to override")
    params[name] = value
    return out


# --------------------------------------------------------------------------
# externals


def make_external(name: str, spec: Any, where: str) -> symlang.TimeFunction:
    t = symlang.symbol("t")
    if isinstance(spec, str):
        try:
            return symlang.TimeFunction(symlang.parse(spec, ["t"]), label=spec)
        except symlang.ExprSyntaxError as exc:
            raise ConfigError(where, str(exc)) from exc
    if isinstance(spec, (int, float)):
        return symlang.TimeFunction(sp.Float(spec) + 0 * t, label=repr(spec))
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError(where, "external must be an expression string, a number or a table with 'kind'")
    kind = spec["kind"]
    get = lambda key, default=None: _number(spec.get(key, default), f"{where}.{key}")
    if kind == "const":
        expr = sp.Float(get("value")) + 0 * t
    elif kind == "sin_pulse":
        expr = get("offset", 0.0) + get("amplitude", 1.0) * sp.sin(get("omega", 1.0) * t + get("phase", 0.0))
    elif kind == "smooth_pulse":
        width = get("width", 0.25)
        expr = get("offset", 0.0) + get("amplitude", 1.0) * sp.exp(-((t - get("center", 1.0)) / width) ** 2)
    else:
        raise ConfigError(where, f"unknown external kind {kind!r} (const, sin_pulse, smooth_pulse)")
    return symlang.TimeFunction(expr, label=f"{kind}")


def _number(value, where: str) -> float:
    if value is None:
        raise ConfigError(where, "missing value")
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, str):
        try:
            e = symlang.parse(value)
            return symlang.evaluate(e, {})
        except (symlang.ExprSyntaxError, symlang.UnboundSymbolError, symlang.DomainError) as exc:
            raise ConfigError(where, f"not a constant expression: {exc}") from exc
    raise ConfigError(where, f"expected a number, got {value!r}")


# --------------------------------------------------------------------------
# config


@dataclass
class SystemConfig:
    raw: dict
    name: str
    formalism: str
    chart: Chart
    params: dict[str, float]
    externals: dict[str, symlang.TimeFunction]
    generator: sp.Expr
    kinetic: sp.Expr | None
    potential: sp.Expr | None
    holonomic: list[sp.Expr]
    multipliers: list[str]
    tau: DifferentialForm | None
    eta: DifferentialForm | None
    integrator: dict
    initial: dict[str, float]
    output: dict
    enforce_sode: bool = True
    max_stages: int = 12
    reeb_tangency: bool = False
    check: dict = field(default_factory=dict)

    @property
    def bindings(self) -> symlang.Bindings:
        return symlang.Bindings(dict(self.params), dict(self.externals))


def parse_config(raw: dict) -> SystemConfig:
    src = raw.get("_source", "<config>")
    unknown = set(raw) - SECTIONS - {"_source"}
    if unknown:
        raise ConfigError(src, f"unknown section(s) {sorted(unknown)}")
    sysd = raw.get("system")
    if not isinstance(sysd, dict):
        raise ConfigError("[system]", "section is required")
    name = str(sysd.get("name", "system"))
    formalism = sysd.get("formalism")
    if formalism not in ("lagrangian", "hamiltonian"):
        raise ConfigError("[system].formalism", "must be 'lagrangian' or 'hamiltonian'")
    positions = _names(sysd, "positions", "[system].positions")
    time = sysd.get("time", "t")
    action = sysd.get("action", "s")
    try:
        if formalism == "lagrangian":
            vel = _names(sysd, "velocities", "[system].velocities", default=[f"v_{q}" for q in positions])
            chart = Chart.tangent(positions, vel, time=time, action=action)
        else:
            mom = _names(sysd, "momenta", "[system].momenta",
                         default=["p"] if positions == ["q"] else [f"p_{q}" for q in positions])
            chart = Chart.canonical(positions, mom, time=time, action=action,
                                    gauge=_names(sysd, "gauge", "[system].gauge", default=[]))
    except ValueError as exc:
        raise ConfigError("[system]", str(exc)) from exc

    params = {k: _number(v, f"[parameters].{k}") for k, v in raw.get("parameters", {}).items()}
    externals = {k: make_external(k, v, f"[externals].{k}") for k, v in raw.get("externals", {}).items()}

    cons = raw.get("constraints", {})
    holo_text = cons.get("holonomic", [])
    if isinstance(holo_text, str):
        holo_text = [holo_text]
    multipliers = list(cons.get("multipliers", [])) or None
    full_names = list(chart.names)
    if holo_text:
        from .precocontact import default_multiplier_names
        multipliers = multipliers or default_multiplier_names(len(holo_text))
        full_names += multipliers + [f"v_{a}" for a in multipliers]

    def expr(text, where, names=None):
        if not isinstance(text, str):
            raise ConfigError(where, "expected an expression string")
        try:
            return symlang.parse(text, names or chart, params=params, externals=externals)
        except symlang.ExprSyntaxError as exc:
            raise ConfigError(where, str(exc)) from exc

    if "generator" not in sysd:
        raise ConfigError("[system].generator", "missing (the Lagrangian or Hamiltonian)")
    generator = expr(sysd["generator"], "[system].generator")
    kinetic = expr(sysd["kinetic"], "[system].kinetic") if "kinetic" in sysd else None
    potential = expr(sysd["potential"], "[system].potential") if "potential" in sysd else None
    holonomic = [expr(h, f"[constraints].holonomic[{i}]") for i, h in enumerate(holo_text)]
    if holonomic and formalism != "lagrangian":
        raise ConfigError("[constraints].holonomic", "holonomic constraints need the lagrangian formalism")

    tau = eta = None
    st = raw.get("structure", {})
    if st:
        if formalism != "hamiltonian":
            raise ConfigError("[structure]", "structure overrides apply to the hamiltonian formalism only")
        tau0, eta0 = canonical_forms(chart)
        tau = _form(st.get("tau"), chart, tau0, "[structure].tau", expr)
        eta = _form(st.get("eta"), chart, eta0, "[structure].eta", expr)

    integ = dict(raw.get("integrator", {}))
    initial_raw = integ.pop("initial", {})
    for n in initial_raw:
        if n not in full_names:
            raise ConfigError(f"[integrator.initial].{n}", "not a coordinate of the system")
    initial = {k: _number(v, f"[integrator.initial].{k}") for k, v in initial_raw.items()}
    output = dict(raw.get("output", {}))
    return SystemConfig(
        raw=raw, name=name, formalism=formalism, chart=chart, params=params, externals=externals,
        generator=generator, kinetic=kinetic, potential=potential, holonomic=holonomic,
        multipliers=multipliers or [], tau=tau, eta=eta, integrator=integ, initial=initial, output=output,
        enforce_sode=bool(cons.get("enforce_sode", formalism == "lagrangian")),
        max_stages=int(cons.get("max_stages", 12)), reeb_tangency=bool(cons.get("reeb_tangency", False)),
        check=dict(raw.get("check", {})),
    )


def _names(d: dict, key: str, where: str, default=None) -> list[str]:
    val = d.get(key, default)
    if val is None:
        raise ConfigError(where, "missing")
    if isinstance(val, str):
        val = [val]
    if not isinstance(val, list) or not all(isinstance(v, str) for v in val):
        raise ConfigError(where, "expected a list of names")
    return list(val)


def _form(spec, chart: Chart, default: DifferentialForm, where: str, expr) -> DifferentialForm:
    if spec is None:
        return default
    if not isinstance(spec, dict):
        raise ConfigError(where, "expected a table coordinate -> coefficient")
    for k in spec:
        if k not in chart.names:
            raise ConfigError(f"{where}.{k}", "not a coordinate")
    return DifferentialForm.one_form(chart, {k: expr(v, f"{where}.{k}") for k, v in spec.items()})


def load(source: str | Path, gamma: float | None = None) -> SystemConfig:
    raw = load_raw(source)
    if gamma is not None:
        raw = with_parameter(raw, "gamma", gamma)
    return parse_config(raw)


# --------------------------------------------------------------------------
# derivation


@dataclass
class Derivation:
    config: SystemConfig
    system: Any  # LagrangianSystem | CocontactSystem
    structure: Any
    field: VectorFieldExpr
    ledger: ConstraintLedger | None = None
    precocontact: PrecocontactSystem | None = None

    @property
    def chart(self) -> Chart:
        return self.ledger.chart if self.field is None else self.field.chart

    @property
    def diagnostic_system(self):
        return self.precocontact if self.precocontact is not None else self.system

    @property
    def status(self) -> str:
        return "finalized" if self.ledger is None else self.ledger.status

    def gauge_bindings(self) -> symlang.Bindings:
        """Config bindings plus zero for every coefficient the algorithm left free."""
        b = self.config.bindings
        if self.ledger is not None:
            for n in self.ledger.unknowns:
                if n not in self.ledger.solved:
                    b.values.setdefault(n, 0.0)
        return b

    def integrator_config(self) -> IntegratorConfig:
        cfg = self.config
        integ = cfg.integrator
        t0 = _number(integ.get("t_start", 0.0), "[integrator].t_start")
        t1 = _number(integ.get("t_end", 10.0), "[integrator].t_end")
        init = complete_initial_state(self.chart, cfg.initial, self.ledger, self.gauge_bindings(), t0)
        try:
            return IntegratorConfig((t0, t1), init, method=integ.get("method", "rk4"),
                                    dt=_number(integ.get("dt", 1e-3), "[integrator].dt"),
                                    atol=_number(integ.get("atol", 1e-9), "[integrator].atol"),
                                    rtol=_number(integ.get("rtol", 1e-7), "[integrator].rtol"))
        except ValueError as exc:
            raise ConfigError("[integrator]", str(exc)) from exc


def derive(cfg: SystemConfig) -> Derivation:
    """Build the system, check its structure and produce the dynamical field.

    Raises ``NotAdmissibleError`` for structures that are neither cocontact
    nor precocontact.
    """
    if cfg.formalism == "lagrangian":
        base = LagrangianSystem(cfg.chart, cfg.generator, cfg.kinetic, cfg.potential, name=cfg.name)
        system = holonomic_augment(base, cfg.holonomic, cfg.multipliers) if cfg.holonomic else base
        structure = system.structure
        if not structure.ok:
            raise NotAdmissibleError(f"not admissible: {structure.reason}")
        if structure.kind == "cocontact" and system.regularity.regular:
            return Derivation(cfg, system, structure, herglotz_field(system))
        pre = PrecocontactSystem.from_lagrangian(system)
    else:
        tau, eta = cfg.tau, cfg.eta
        if tau is None:
            tau, eta = canonical_forms(cfg.chart)
        system = CocontactSystem(cfg.chart, tau, eta, cfg.generator, cfg.kinetic, cfg.potential, name=cfg.name)
        structure = system.structure
        if not structure.ok:
            raise NotAdmissibleError(f"not admissible: {structure.reason}")
        if structure.kind == "cocontact" and system.is_darboux:
            return Derivation(cfg, system, structure, hamiltonian_vector_field(system))
        pre = PrecocontactSystem.from_cocontact(system)
    ledger = constraint_algorithm(pre, enforce_sode=cfg.enforce_sode, max_stages=cfg.max_stages,
                                  reeb_tangency=cfg.reeb_tangency)
    return Derivation(cfg, system, structure, ledger.field, ledger, pre)


def submanifold_from_config(cfg: SystemConfig) -> SubmanifoldSpec | None:
    spec = cfg.check.get("submanifold")
    if not spec:
        return None
    where = "[check].submanifold"
    params = list(spec.get("parameters", []))
    if "embedding" in spec:
        emb = {}
        for k, v in spec["embedding"].items():
            if k not in cfg.chart.names:
                raise ConfigError(f"{where}.embedding.{k}", "not a coordinate")
            try:
                emb[k] = symlang.parse(v, params, params=cfg.params)
            except symlang.ExprSyntaxError as exc:
                raise ConfigError(f"{where}.embedding.{k}", str(exc)) from exc
        return SubmanifoldSpec(embedding=emb, parameters=params, bindings=cfg.bindings)
    cons = [symlang.parse(c, cfg.chart, params=cfg.params) for c in spec.get("constraints", [])]
    points = [{k: _number(v, f"{where}.points") for k, v in p.items()} for p in spec.get("points", [])]
    return SubmanifoldSpec(constraints=cons, points=points, bindings=cfg.bindings)

