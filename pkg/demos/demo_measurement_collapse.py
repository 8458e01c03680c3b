"""
Measurement as continuous collapse
==================================

A qubit is watched through the observable ``diag(0, 1)``.  Each trajectory
drifts to one eigenstate; the fraction landing on ``|0>`` matches the
initial population, while the ensemble mean decays like the master equation.
"""

import numpy as np

from qdiff import ExperimentSpec, fit_decoherence_rate, run_ensemble
from qdiff.experiments import default_initial_pure

# %%
# Start in a superposition with populations 0.3 and 0.7 and integrate until
# most trajectories have reached an endpoint.
spec = ExperimentSpec("DENSITY_NONLINEAR", "SINGLE_OBSERVABLE", default_initial_pure([0.3, 0.7]),
                      eigenvalues=(0, 1), dt=1e-3, t_max=10.0, trajectories=2000, seed=1)
res = run_ensemble(spec)
born = res.born()
print("outcome frequencies:", np.round(born.frequencies, 3), "+-", np.round(born.stderr, 3))
print("unresolved trajectories:", born.n_unresolved)

# %%
# One trajectory, sampled on the record grid: the population of |0> wanders
# and then sticks.
p0 = res.diagonals[0, :, 0]
for t, p in zip(res.times[::4], p0[::4]):
    print(f"t = {t:5.2f}  p0 = {p:.4f}")

# %%
# Coherence of the ensemble mean decays at rate (l_0 - l_1)^2 = 1.
spec = spec.replace(initial_state=default_initial_pure([0.5, 0.5]), t_max=3.0,
                    stop_at_endpoint=False, n_record=30)
res = run_ensemble(spec)
fit = fit_decoherence_rate(res.times, res.rho[:, :, 0, 1])
print(f"fitted decoherence rate {fit.rate:.3f} +- {fit.stderr:.3f}")
