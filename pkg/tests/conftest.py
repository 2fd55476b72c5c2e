import sympy as sp
from hypothesis import HealthCheck, settings

from cocontact import symlang
from cocontact.exterior import Chart

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

PENDULUM_L = "(1/2)*m*(v_r^2 + r^2*v_theta^2) - m*g*r*(1 - cos(theta)) - gamma*s"
OSCILLATOR_L = "(1/2)*m*v^2 - (k/2)*q^2 + q*f(t) - (gamma/m)*s"


def S(name):
    return symlang.symbol(name)


def ell(order=0):
    return symlang.external("ell", "t", order)


def canonical_chart(n=1):
    return Chart.canonical(n)


def polynomial(draw_coeffs, names, degree=2):
    """Polynomial with the given integer coefficients over monomials of ``names`` up to ``degree``."""
    syms = [S(n) for n in names]
    monos = sorted(sp.itermonomials(syms, degree), key=sp.default_sort_key)
    return sp.Add(*[c * m for c, m in zip(draw_coeffs, monos)])


def derive_builtin(name, parameters=None, externals=None, initial=None, integrator=None, constraints=None):
    """Derivation of a built-in example with selected config entries replaced."""
    from cocontact import config

    raw = config.load_raw(name)
    for section, new in (("parameters", parameters), ("externals", externals), ("constraints", constraints)):
        if new:
            raw.setdefault(section, {}).update(new)
    integ = raw.setdefault("integrator", {})
    if integrator:
        integ.update(integrator)
    if initial is not None:
        integ["initial"] = dict(initial)
    return config.derive(config.parse_config(raw))


# --------------------------------------------------------------------------
# acceptance report: one line per criterion, printed in the terminal summary

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion a test belongs to")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when not in ("setup", "call"):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "failed": [], "ran": 0})
    if call.excinfo is not None:
        entry["failed"].append(item.name)
    elif call.when == "call":
        entry["ran"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        verdict = "FAIL" if e["failed"] or not e["ran"] else "PASS"
        line = f"criterion {n:2d} {verdict}  {e['title']}"
        if e["failed"]:
            line += f"  (failed: {', '.join(e['failed'])})"
        terminalreporter.write_line(line)
