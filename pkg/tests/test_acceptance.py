"""Acceptance criteria 1-10.  Run with ``pytest tests/test_acceptance.py``; the
terminal summary prints one PASS/FAIL line per criterion."""

import time
from pathlib import Path

import numpy as np
import pytest
import sympy as sp

from cocontact import cli, config, symlang
from cocontact.dynamics import constraint_drift, diagnostics, integrate
from cocontact.exterior import Chart, VectorFieldExpr
from cocontact.hamiltonian import (
    CocontactSystem,
    flat_map,
    hamilton_residual,
    jacobi_bracket,
    reeb_fields,
    sharp_map,
    verify_cocontact,
)
from cocontact.lagrangian import LagrangianSystem, NotAdmissibleError, herglotz_residual, push_forward_legendre
from cocontact.precocontact import (
    HolonomicRankError,
    PrecocontactSystem,
    constraint_algorithm,
    holonomic_augment,
    reduced_equation,
)

from conftest import OSCILLATOR_L, PENDULUM_L, S, derive_builtin, ell, polynomial

DATA = Path(__file__).parent / "data"
criterion = pytest.mark.criterion


# --------------------------------------------------------------------------
# 1


@criterion(1, "canonical structure: verify, Reeb fields, sharp o flat = id")
def test_canonical_structure_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    for n in (1, 2, 3):
        sys_ = CocontactSystem.canonical(n)
        assert verify_cocontact(sys_.tau, sys_.eta).ok
        assert sys_.structure.cls == 2 * n + 2
        R_t, R_s = reeb_fields(sys_)
        assert R_t.equals(VectorFieldExpr.basis(sys_.chart, "t"))
        assert R_s.equals(VectorFieldExpr.basis(sys_.chart, "s"))
        for _ in range(20):
            point = dict(zip(sys_.chart.names, rng.uniform(-2, 2, sys_.chart.dim)))
            X = rng.normal(size=sys_.chart.dim)
            Xf = VectorFieldExpr(sys_.chart, dict(zip(sys_.chart.names, map(sp.Float, X))))
            assert np.max(np.abs(sharp_map(sys_, flat_map(sys_, Xf), point) - X)) <= 1e-9
    assert time.perf_counter() - start < 5


# --------------------------------------------------------------------------
# 2

CAN = CocontactSystem.canonical(1)
q, p, s = (S(n) for n in ("q", "p", "s"))


@criterion(2, "Jacobi bracket: table and Jacobi identity on 50 triples")
def test_bracket_table():
    assert jacobi_bracket(CAN, q, p) == 1
    assert jacobi_bracket(CAN, q, s) == -q
    assert jacobi_bracket(CAN, p, s) == -2 * p


@criterion(2, "Jacobi bracket: table and Jacobi identity on 50 triples")
def test_jacobi_identity_random_triples():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    br = lambda a, b: jacobi_bracket(CAN, a, b)
    failures = 0
    for _ in range(50):
        f, g, h = (polynomial(rng.integers(-3, 4, 15).tolist(), ["q", "p", "s", "t"]) for _ in range(3))
        jacobiator = br(f, br(g, h)) + br(g, br(h, f)) + br(h, br(f, g))
        failures += not symlang.is_identically_zero(jacobiator)
    assert time.perf_counter() - start < 30
    assert failures == 0, f"Jacobi identity fails on {failures} of 50 triples"


# --------------------------------------------------------------------------
# 3

OSC_H = "p^2/(2*m) + (k/2)*q^2 - q*f(t) + (gamma/m)*s"


def oscillator_hamiltonian():
    raw = config.load_raw("oscillator")
    raw["system"] = {"name": "oscillator_h", "formalism": "hamiltonian", "positions": ["q"],
                     "momenta": ["p"], "generator": OSC_H}
    raw["integrator"]["initial"] = {"q": 0.0, "p": 0.0}
    return config.derive(config.parse_config(raw))


@criterion(3, "oscillator: Legendre equivalence and Herglotz/Hamilton residuals")
def test_oscillator_legendre_equivalence():
    lag, ham = derive_builtin("oscillator"), oscillator_hamiltonian()
    pushed = push_forward_legendre(lag.system, lag.field)
    rng = np.random.default_rng(3)
    ext = lag.config.bindings.externals
    for _ in range(20):
        pt = dict(zip(lag.chart.names, rng.uniform(-2, 2, 4)))
        pars = {"m": rng.uniform(0.5, 2), "k": rng.uniform(0.5, 2), "gamma": rng.uniform(0, 1)}
        b = symlang.Bindings({**pars, **pt}, ext)
        bh = symlang.Bindings({**pars, **pt, "p": pars["m"] * pt["v"]}, ext)
        for name in ham.chart.names:
            want = symlang.evaluate(ham.field[name], bh)
            assert abs(symlang.evaluate(pushed[name], b) - want) <= 1e-9 * max(1, abs(want))


@criterion(3, "oscillator: Legendre equivalence and Herglotz/Hamilton residuals")
def test_oscillator_both_integrate():
    lag, ham = derive_builtin("oscillator"), oscillator_hamiltonian()
    for d in (lag, ham):
        cfg = d.integrator_config()
        assert (cfg.method, cfg.dt, cfg.t_span) == ("rk4", 1e-3, (0.0, 10.0))
    tl = integrate(lag.field, lag.integrator_config(), lag.config.bindings)
    th = integrate(ham.field, ham.integrator_config(), ham.config.bindings)
    assert np.max(np.abs(herglotz_residual(lag.system, tl))) <= 1e-5
    assert np.max(np.abs(hamilton_residual(ham.system, th))) <= 1e-5
    assert np.max(np.abs(tl.column("q") - th.column("q"))) <= 1e-9


# --------------------------------------------------------------------------
# 4


def conservative(dt):
    d = derive_builtin("oscillator", parameters={"gamma": 0.0}, externals={"f": 0.0},
                       initial={"q": 1.0, "v": 0.0}, integrator={"dt": dt})
    return d, integrate(d.field, d.integrator_config(), d.config.bindings)


@criterion(4, "conservative limit: cos t, constant E_L, order-4 convergence")
def test_conservative_limit():
    d, traj = conservative(1e-3)
    assert traj.times[-1] == pytest.approx(10.0)
    assert np.max(np.abs(traj.column("q") - np.cos(traj.times))) <= 1e-8
    assert np.ptp(diagnostics(traj, d.system, d.field)["E_L"]) <= 1e-8
    errs = [np.max(np.abs(tr.column("q") - np.cos(tr.times))) for _, tr in (conservative(0.02), conservative(0.01))]
    assert 14 <= errs[0] / errs[1] <= 18


# --------------------------------------------------------------------------
# 5


@criterion(5, "Kepler: p_phi decays as exp(-gamma t)")
def test_kepler_dissipation_law():
    start = time.perf_counter()
    for gamma in (0.1, 0.5):
        d = derive_builtin("kepler", parameters={"gamma": gamma})
        traj = integrate(d.field, d.integrator_config(), d.config.bindings)
        assert traj.times[-1] == pytest.approx(10.0)
        p0 = traj.column("p_phi")[0]
        assert np.max(np.abs(traj.column("p_phi") - p0 * np.exp(-gamma * traj.times))) <= 1e-6
    assert time.perf_counter() - start < 10


# --------------------------------------------------------------------------
# 6 and 7

BASE = Chart.tangent(["r", "theta"], ["v_r", "v_theta"])
r, th, vr, vth, lam, vlam = (S(n) for n in ("r", "theta", "v_r", "v_theta", "lam", "v_lam"))
m, g, gam, t = S("m"), S("g"), S("gamma"), S("t")


def pendulum_ledger(L=PENDULUM_L, length=None):
    base = LagrangianSystem(BASE, symlang.parse(L, BASE, {"m", "g", "gamma", "l0"}))
    aug = holonomic_augment(base, [r - (ell() if length is None else length)], ["lam"])
    return constraint_algorithm(PrecocontactSystem.from_lagrangian(aug), enforce_sode=True)


def first_principles_xi():
    """Radial equation of motion on r = ell, v_r = ell', and its derivative along the flow."""
    on = {r: ell(), vr: ell(1)}
    xi3 = (m * r * vth**2 - m * g * (1 - sp.cos(th)) + lam - gam * m * vr - m * ell(2)).subs(on)
    acc = (-(2 * m * r * vr * vth + m * g * r * sp.sin(th) + gam * m * r**2 * vth) / (m * r**2)).subs(on)
    xi4 = sp.diff(xi3, t) + vth * sp.diff(xi3, th) + acc * sp.diff(xi3, vth) + vlam * sp.diff(xi3, lam)
    return xi3, xi4


@criterion(6, "pendulum ledger: four stages, xi_1..xi_4, G_r = ell'', finalized")
def test_pendulum_ledger():
    ledger = pendulum_ledger()
    assert [e.stage for e in ledger.entries] == [1, 2, 3, 4]
    xi1, xi2, xi3, xi4 = ledger.constraints
    assert symlang.is_identically_zero(xi1 - (r - ell()))
    assert symlang.is_identically_zero(xi2 - (vr - ell(1)))
    o3, o4 = first_principles_xi()
    assert symlang.is_identically_zero(xi3 - o3)
    assert symlang.is_identically_zero(xi4 - o4)
    assert symlang.is_identically_zero(ledger.field["v_r"] - ell(2))
    assert ledger.status == "finalized" and ledger.final_stage == 4


@criterion(7, "pendulum reduced ODE and its constant-length and undamped limits")
def test_pendulum_reduced_equation():
    want = -gam * vth - 2 * ell(1) / ell() * vth - g / ell() * sp.sin(th)
    assert symlang.is_identically_zero(reduced_equation(pendulum_ledger(), "v_theta") - want)
    l0 = S("l0")
    fixed = reduced_equation(pendulum_ledger(length=l0), "v_theta")
    assert symlang.is_identically_zero(fixed - (-gam * vth - g / l0 * sp.sin(th)))
    undamped = reduced_equation(pendulum_ledger(PENDULUM_L.replace(" - gamma*s", "")), "v_theta")
    assert symlang.is_identically_zero(undamped - want.subs(gam, 0))


# --------------------------------------------------------------------------
# 8


@criterion(8, "pendulum simulation: drift, action residual, damping, energy plateau")
@pytest.mark.parametrize("gamma", [0.5, 0.75])
def test_pendulum_simulation(gamma):
    d = derive_builtin("pendulum", parameters={"gamma": gamma})
    cfg = d.integrator_config()
    assert cfg.t_span == (0.0, 20.0)
    assert cfg.initial["theta"] == pytest.approx(np.pi / 4) and cfg.initial["v_theta"] == 0
    res = cli.simulate(d)
    assert not res.aborted
    assert max(res.drift.max_abs) <= 1e-6
    assert res.action_residual <= 1e-6
    traj = res.trajectory
    quarter = traj.times[-1] / 4
    first, last = traj.times <= quarter, traj.times >= 3 * quarter
    theta, Em = np.abs(traj.column("theta")), traj.column("E_m")
    assert Em[last].min() > 0
    ratio = theta[last].max() / theta[first].max()
    assert ratio < 0.25, f"last/first quarter amplitude ratio {ratio:.3f}"


# --------------------------------------------------------------------------
# 9


@criterion(9, "negative controls: odd class, rank-deficient constraints, bad initial data")
def test_odd_class_rejected():
    with pytest.raises(NotAdmissibleError, match=r"class is odd \(3\)"):
        config.derive(config.load(DATA / "odd_class.toml"))


@criterion(9, "negative controls: odd class, rank-deficient constraints, bad initial data")
def test_rank_deficient_rejected():
    x, y = S("x"), S("y")
    chart = Chart.tangent(["x", "y"], ["v_x", "v_y"])
    base = LagrangianSystem(chart, (S("v_x") ** 2 + S("v_y") ** 2) / 2)
    with pytest.raises(HolonomicRankError):
        holonomic_augment(base, [x - y, 2 * x - 2 * y], ["l1", "l2"])


@criterion(9, "negative controls: odd class, rank-deficient constraints, bad initial data")
def test_inconsistent_initial_data_drift():
    offset = 0.1
    d = derive_builtin("pendulum", initial={"theta": "pi/4", "v_theta": 0, "r": 1 + offset},
                       integrator={"t_end": 1.0})
    traj = integrate(d.field, d.integrator_config(), d.config.bindings)
    table = constraint_drift(traj, d.ledger)
    assert not table.ok
    assert table.max_abs[0] == pytest.approx(offset, rel=1e-9)


# --------------------------------------------------------------------------
# 10


@criterion(10, "determinism: byte-identical CSVs for every built-in example")
@pytest.mark.parametrize("name", sorted(config.BUILTINS))
def test_byte_identical_csv(tmp_path, name):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        _, code = cli.run_simulate(config.load(name), out)
        assert code == 0
    f = f"{name}_trajectory.csv"
    assert (a / f).read_bytes() == (b / f).read_bytes()
