"""Self-exciting opinion dynamics toolkit.

Simulates populations of scalar opinions that revert toward their initial
positions, diffuse, and kick each other at Poisson event times; solves the
matching mean-field density equations; and measures agreement between the
layers in Wasserstein-1 distance. See the README for the experiment CLI.
"""

from .metrics import (
    DegenerateInput,
    EmpiricalMeasure,
    Moments,
    RateFit,
    fit_rate,
    moments,
    wasserstein1,
    wasserstein1_density,
    wasserstein1_vs_density,
)
from .model import (
    Atoms,
    BoundedConfidence,
    InitialDistribution,
    InteractionKernel,
    LinearDifference,
    ModelParams,
    NeighborValue,
    SeededStream,
    Uniform,
)
from .particles import (
    AnalyticLinear,
    AnalyticSlant,
    CouplingRow,
    FrozenEmpirical,
    IncompatibleDrift,
    NoConvergenceWarning,
    NonFiniteState,
    ParticleSystem,
    PicardResult,
    ProcessKind,
    SimConfig,
    TrajectoryRecord,
    coupling_experiment,
    picard_pool_iterate,
    run_trajectory,
    step_interacting,
    step_intermediate,
    step_mckean_particles,
)
from .pde import (
    BFamilyDensity,
    CflViolation,
    DegenerateParams,
    DomainOverflow,
    Grid1D,
    PdeConfig,
    aggregate,
    dirac_contraction_map,
    drift_field,
    evolve,
    fp_step,
    slant_contraction_atoms,
    slant_fixed_point,
    slant_fixed_point_alt,
    slant_mean,
    steady_state_mixture,
    steady_state_slant,
)

__version__ = "0.1.0"
