"""Damped oscillator kicked by a pulse: derive the Herglotz field, integrate it,
and watch the energy drain away once the pulse has passed."""

import numpy as np

from cocontact import config
from cocontact.cli import simulate

d = config.derive(config.load("oscillator"))
print("Herglotz field:")
for name in d.chart.names:
    print(f"  {name}' = {d.field[name]}")

res = simulate(d)
traj = res.trajectory
E = traj.column("E_L")
for t_mark in (0.0, 1.0, 2.0, 5.0, 10.0):
    k = int(np.argmin(np.abs(traj.times - t_mark)))
    print(f"t = {t_mark:4.1f}  q = {traj.column('q')[k]: .6f}  E_L = {E[k]: .6f}")
print(f"action residual {res.action_residual:.2e}")
