"""
Linear trajectories with importance weights
===========================================

The linear equation never renormalizes; its trace ``w`` is a weight.  The
plain mean of the unnormalized state follows the master equation, and the
weighted frequencies of the normalized endpoints reproduce the nonlinear
statistics.
"""

import numpy as np

from qdiff import ExperimentSpec, compare_with_reference, run_ensemble
from qdiff.experiments import default_initial_pure

# %%
# Without stopping, the mean of R is compared entrywise with the RK4 solution
# of the master equation.  The allowance is four standard errors plus the known
# first-order Euler bias.
spec = ExperimentSpec("LINEAR_WEIGHTED", "SINGLE_OBSERVABLE", default_initial_pure([0.3, 0.7]),
                      eigenvalues=(0, 1), dt=1e-3, t_max=1.0, trajectories=2000, seed=3,
                      stop_at_endpoint=False)
res = run_ensemble(spec)
cmp = compare_with_reference(res, unnormalized=True)
print(f"worst deviation / allowance = {cmp.max_ratio:.2f}")
print("mean weight at the last grid point:", np.round(res.weight_stats.mean[-1], 4),
      "+-", np.round(res.weight_stats.stderr[-1], 4))

# %%
# Run to collapse and compare weighted outcome frequencies with the nonlinear
# engine.  The effective sample size shows how much the weights cost.
spec = spec.replace(t_max=10.0, stop_at_endpoint=True)
born = run_ensemble(spec).born()
print("weighted frequencies:", np.round(born.frequencies, 3), "+-", np.round(born.stderr, 3))
print(f"effective sample size {born.effective_sample_size:.0f} of {spec.trajectories}")
