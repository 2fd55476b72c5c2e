"""Variable-length pendulum: the constraint algorithm turns one holonomic
condition into four constraints, then the final field is integrated and the
constraints are monitored along the way."""

from cocontact import config, symlang
from cocontact.cli import simulate
from cocontact.precocontact import reduced_equation

d = config.derive(config.load("pendulum"))
print(d.ledger.report())
print()
print("theta'' =", symlang.to_infix(reduced_equation(d.ledger, "v_theta")))

for gamma in (0.5, 0.75):
    res = simulate(config.derive(config.load("pendulum", gamma=gamma)))
    Em = res.trajectory.column("E_m")
    print(f"\ngamma = {gamma}: final E_m = {Em[-1]:.4f}")
    print(res.drift)
