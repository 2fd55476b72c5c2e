"""Central force with growing mass and friction: the angular momentum decays
exponentially whatever the orbit does."""

import numpy as np

from cocontact import config
from cocontact.dynamics import integrate

for gamma in (0.1, 0.5):
    d = config.derive(config.load("kepler", gamma=gamma))
    traj = integrate(d.field, d.integrator_config(), d.config.bindings)
    err = np.abs(traj.column("p_phi") - np.exp(-gamma * traj.times))
    print(f"gamma = {gamma}: r(10) = {traj.column('r')[-1]:.4f}, max |p_phi - e^(-gamma t)| = {err.max():.2e}")
