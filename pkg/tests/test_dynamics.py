import math

import numpy as np
import pytest

from cocontact import symlang
from cocontact.cli import simulate
from cocontact.dynamics import (
    IntegrationAborted,
    IntegratorConfig,
    constraint_drift,
    cumulative_trapezoid,
    diagnostics,
    integrate,
)
from cocontact.exterior import Chart, VectorFieldExpr
from cocontact.hamiltonian import hamilton_residual
from cocontact.lagrangian import herglotz_residual

from conftest import S, derive_builtin

CONSERVATIVE = dict(parameters={"gamma": 0.0}, externals={"f": 0.0}, initial={"q": 1.0, "v": 0.0})


def conservative_run(dt):
    d = derive_builtin("oscillator", integrator={"dt": dt}, **CONSERVATIVE)
    return d, integrate(d.field, d.integrator_config(), d.config.bindings)


def test_conservative_oscillator_matches_cosine():
    _, traj = conservative_run(1e-3)
    assert np.max(np.abs(traj.column("q") - np.cos(traj.times))) <= 1e-8
    assert traj.time_tracking_error() <= 1e-12


def test_rk4_order_four():
    errs = []
    for dt in (0.02, 0.01):
        _, traj = conservative_run(dt)
        errs.append(np.max(np.abs(traj.column("q") - np.cos(traj.times))))
    assert 14 <= errs[0] / errs[1] <= 18


def test_conservative_energy_constant():
    d, traj = conservative_run(1e-3)
    diag = diagnostics(traj, d.system, d.field)
    assert np.ptp(diag["E_L"]) <= 1e-8
    assert np.max(diag["action_residual"]) <= 1e-6


@pytest.mark.parametrize("gamma", [0.1, 0.5])
def test_kepler_angular_momentum_decay(gamma):
    d = derive_builtin("kepler", parameters={"gamma": gamma})
    traj = integrate(d.field, d.integrator_config(), d.config.bindings)
    p0 = traj.column("p_phi")[0]
    assert np.max(np.abs(traj.column("p_phi") - p0 * np.exp(-gamma * traj.times))) <= 1e-6
    assert np.max(np.abs(hamilton_residual(d.system, traj))) <= 1e-5


def test_kepler_rk45_agrees_with_rk4():
    d = derive_builtin("kepler", integrator={"method": "rk45"})
    traj = integrate(d.field, d.integrator_config(), d.config.bindings)
    assert traj.times[-1] == pytest.approx(10.0)
    assert np.max(np.abs(traj.column("p_phi") - np.exp(-0.1 * traj.times))) <= 1e-6


def test_damped_oscillator_energy_story():
    d = derive_builtin("oscillator", integrator={"t_end": 20.0})
    res = simulate(d)
    traj = res.trajectory
    E, Em = traj.column("E_L"), traj.column("E_m")
    after = traj.times >= 2.0
    assert np.all(np.diff(E[after]) <= 0)
    gap = (Em - E)[np.abs(Em - E) > 1e-12]
    assert np.count_nonzero(np.sign(gap[1:]) != np.sign(gap[:-1])) >= 10
    assert res.action_residual <= 1e-6
    assert np.max(np.abs(herglotz_residual(d.system, traj))) <= 1e-5


def test_mechanical_energy_optional():
    chart = Chart.canonical(1)
    from cocontact.hamiltonian import CocontactSystem, hamiltonian_vector_field

    sys_ = CocontactSystem.from_chart(chart, S("p") ** 2 / 2)
    X = hamiltonian_vector_field(sys_)
    traj = integrate(X, IntegratorConfig((0, 1), {"q": 0, "p": 1, "s": 0}), symlang.Bindings({}))
    diag = diagnostics(traj, sys_, X)
    assert set(diag) == {"H", "action_residual"}


def test_pendulum_consistent_drift_small():
    d = derive_builtin("pendulum", integrator={"t_end": 10.0})
    res = simulate(d)
    assert res.drift.ok and len(res.drift) == 4
    assert max(res.drift.max_abs) <= 1e-6


def test_pendulum_inconsistent_start_detected():
    d = derive_builtin("pendulum", integrator={"t_end": 1.0}, initial={"theta": "pi/4", "v_theta": 0, "r": 1.1})
    res = simulate(d)
    xi1 = np.abs(res.trajectory.column("xi_1"))
    assert xi1[0] == pytest.approx(0.1, abs=1e-12)
    assert not res.drift.ok


def test_unconstrained_drift_table_empty():
    d, traj = conservative_run(1e-2)
    table = constraint_drift(traj, d.ledger)
    assert len(table) == 0 and table.ok


def test_abort_keeps_last_good_state():
    d = derive_builtin("kepler", parameters={"k": -1.0, "gamma": 0.0}, initial={"r": 1, "phi": 0, "p_r": 0, "p_phi": 0})
    with pytest.raises(IntegrationAborted) as err:
        integrate(d.field, d.integrator_config(), d.config.bindings)
    partial = err.value.trajectory
    assert 0 < partial.times[-1] < 10
    assert np.all(partial.column("r") > 0)
    assert "r" in err.value.reason


def test_abort_on_domain_error():
    chart = Chart.canonical(1)
    X = VectorFieldExpr(chart, {"t": 1, "q": -1, "s": symlang.parse("log(q)", chart)})
    with pytest.raises(IntegrationAborted, match="log"):
        integrate(X, IntegratorConfig((0, 2), {"q": 1, "p": 0, "s": 0}), symlang.Bindings({}))


def test_integrator_config_validation():
    with pytest.raises(ValueError):
        IntegratorConfig((1, 1), {})
    with pytest.raises(ValueError):
        IntegratorConfig((0, 1), {}, dt=0)
    with pytest.raises(ValueError):
        IntegratorConfig((0, 1), {}, method="euler")


def test_corrected_trapezoid_exactness():
    t = np.linspace(0, 2, 201)
    y, dy = np.cos(3 * t), -3 * np.sin(3 * t)
    exact = np.sin(3 * t) / 3
    plain = np.max(np.abs(cumulative_trapezoid(y, t) - exact))
    corrected = np.max(np.abs(cumulative_trapezoid(y, t, dy) - exact))
    assert corrected < plain / 100


def test_complete_initial_state_from_ledger():
    d = derive_builtin("pendulum")
    init = d.integrator_config().initial
    assert init["r"] == pytest.approx(1.0)
    assert init["v_r"] == pytest.approx(0.2 * math.pi)
    b = d.config.bindings.merged(init)
    for xi in d.ledger.constraints:
        assert abs(symlang.evaluate(xi, b)) <= 1e-12
