import csv
import io
import re
from pathlib import Path

import pytest

from cocontact import cli

DATA = Path(__file__).parent / "data"


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_derive_oscillator_regular(capsys):
    code, out, _ = run(capsys, "derive", "oscillator")
    assert code == 0
    assert "regularity: regular" in out
    assert "Gamma_L:" in out
    assert "v' = f(t)/m - gamma*v/m - k*q/m" in out


def test_derive_pendulum_ledger(capsys):
    code, out, _ = run(capsys, "derive", "pendulum")
    assert code == 0
    for k in range(1, 5):
        assert f"xi_{k} stage {k}" in out
    assert "xi_1 stage 1 (consistency): r - ell(t) = 0" in out
    assert "xi_2 stage 2 (tangency): v_r - ell'(t) = 0" in out
    assert "final field:" in out


@pytest.mark.parametrize("name, code, needle", [
    ("odd_class", 2, "not admissible: class is odd (3)"),
    ("rank_deficient", 2, "rank"),
    ("bad_syntax", 2, "[system].generator: expected ')', found 'end of input' at offset 10"),
    ("gauge_inconsistent", 3, "inconsistent"),
    ("max_stages", 4, "max"),
    ("gauge_finalized", 0, "finalized"),
])
def test_derive_exit_codes(capsys, name, code, needle):
    got, out, err = run(capsys, "derive", DATA / f"{name}.toml")
    assert got == code
    assert needle in (out + err).lower()


def test_missing_file_is_config_error(capsys, tmp_path):
    code, _, err = run(capsys, "derive", tmp_path / "nope.toml")
    assert code == 2 and "error" in err


def test_check_canonical(capsys):
    code, out, _ = run(capsys, "check", "canonical")
    assert code == 0
    assert "cocontact, class 4" in out
    assert "brackets: {q,p}=1, {q,s}=-q, {p,s}=-2*p" in out
    assert "Legendrian" in out


def test_check_pendulum_precocontact(capsys):
    code, out, _ = run(capsys, "check", "pendulum")
    assert code == 0
    assert "precocontact, class 6" in out
    assert "d/dlam, d/dv_lam" in out


def test_check_tau_not_closed(capsys):
    code, out, err = run(capsys, "check", DATA / "tau_not_closed.toml")
    assert code == 2
    assert "not closed" in out + err


def test_check_odd_class(capsys):
    code, out, _ = run(capsys, "check", DATA / "odd_class.toml")
    assert code == 2 and "class is odd (3)" in out


def test_simulate_writes_csv_and_script(capsys, tmp_path):
    code, out, _ = run(capsys, "simulate", "pendulum", "--out", tmp_path, "--plots")
    assert code == 0
    raw = (tmp_path / "pendulum_trajectory.csv").read_bytes()
    assert b"\r\n" in raw and b"\n" not in raw.replace(b"\r\n", b"")
    rows = list(csv.reader(io.StringIO(raw.decode())))
    header = rows[0]
    assert header[0] == "t" and header[-4:] == ["xi_1", "xi_2", "xi_3", "xi_4"]
    assert "E_L" in header and "E_m" in header
    num = re.compile(r"^-?\d\.\d{12}e[+-]\d{2,3}$")
    assert all(num.match(x) for x in rows[1])
    script = (tmp_path / "pendulum.gp").read_text()
    assert "pendulum_trajectory.csv" in script and str(tmp_path) not in script
    assert "'theta':'v_theta'" in script and "'t':'E_m'" in script
    assert 'column("r")*sin(column("theta"))' in script
    assert "xi_1" in out


def test_simulate_gamma_override(capsys, tmp_path):
    code, _, _ = run(capsys, "simulate", "canonical", "--gamma", "0.5", "--out", tmp_path)
    assert code == 0
    assert (tmp_path / "canonical_trajectory.csv").exists()


def test_simulate_abort_exit_five(capsys, tmp_path):
    code, out, _ = run(capsys, "simulate", DATA / "kepler_collision.toml", "--out", tmp_path)
    assert code == 5
    assert "crossed zero" in out
    rows = list(csv.reader(open(tmp_path / "kepler_collision_trajectory.csv", newline="")))
    assert len(rows) > 2
    assert 1.0 < float(rows[-1][0]) < 1.2


@pytest.mark.parametrize("name", ["oscillator", "kepler", "canonical"])
def test_builtin_csv_deterministic(capsys, tmp_path, name):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "simulate", name, "--out", a)[0] == 0
    assert run(capsys, "simulate", name, "--out", b)[0] == 0
    f = f"{name}_trajectory.csv"
    assert (a / f).read_bytes() == (b / f).read_bytes()


def test_parse_sweep_inclusive():
    name, values = cli.parse_sweep("gamma=0.1:0.9:0.1")
    assert name == "gamma" and len(values) == 9
    assert values[0] == 0.1 and values[-1] == 0.9
    with pytest.raises(Exception):
        cli.parse_sweep("gamma=1:0:0.1")


def test_sweep_fans_out(capsys, tmp_path):
    code, out, _ = run(capsys, "simulate", "kepler", "--sweep", "gamma=0.1:0.5:0.2", "--out", tmp_path)
    assert code == 0
    assert out.count("== gamma") == 3
    assert {p.name for p in tmp_path.iterdir()} == {
        "kepler_gamma0.1_trajectory.csv", "kepler_gamma0.3_trajectory.csv", "kepler_gamma0.5_trajectory.csv"}


def test_sweep_requires_simulate(capsys):
    code, _, err = run(capsys, "derive", "kepler", "--sweep", "gamma=0.1:0.2:0.1")
    assert code == 2 and "simulate" in err
