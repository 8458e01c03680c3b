"""Quantum state diffusion: nonlinear trajectories and their linear, weighted twin.

The package integrates the diffusion equations for state vectors and density
matrices, a linear propagator whose trace acts as an importance weight, and
the deterministic master equation they average to.  Measurement scenarios,
ensemble statistics and a small command-line front end sit on top.
"""

from .engines import (
    Engine,
    StepError,
    StepRecord,
    StepSizeWarning,
    WeightUnderflowError,
    density_increment,
    iterate_trajectory,
    normalize,
    step_density_nonlinear,
    step_linear,
    step_propagator,
    step_state_vector,
    weighted_step_differential,
)
from .ensemble import (
    EnsembleResult,
    LowEffectiveSampleWarning,
    batch_means_se,
    compare_engines,
    compare_with_reference,
    convergence_report,
    effective_sample_size,
    run_ensemble,
    weighted_mean_state,
)
from .experiments import (
    ExperimentSpec,
    LindbladMode,
    MeasurementOutcome,
    check_martingale,
    estimate_born_frequencies,
    fit_decoherence_rate,
    run_measurement_trajectory,
    simulate_batch,
)
from .lindblad import evolve_euler, evolve_mean, lindblad_generator
from .noise import NoiseIncrements, NoiseStream, increment_block, sample_increments
from .operators import (
    DimensionError,
    LindbladSet,
    StateError,
    UnnormalizedState,
    build_observable,
    build_projector_set,
    check_density_matrix,
    pure_density,
)

__version__ = "0.1.0"
