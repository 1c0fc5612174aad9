"""Mean-field particle systems on finite spaces: exact Feynman-Kac flows,
seeded particle simulation, Gaussian-limit rate functions and
moderate-deviation diagnostics."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .measures import (
    MarkovKernel,
    Observable,
    ProbabilityMeasure,
    SignedMeasure,
    StateSpace,
    adjoint_kernel,
    b_constant,
    dobrushin_coefficient,
    kernel_apply_fn,
    kernel_apply_measure,
    kernel_compose,
    oscillation,
    oscillation_coefficient,
    random_kernel,
    random_probability,
    total_variation,
)
from .flow import (
    FeynmanKacModel,
    FirstOrderOperator,
    FKConstants,
    FlowTrajectory,
    exact_flow,
    first_order_d,
    fk_constants,
    load_model,
    mckean_kernel,
    phi_semigroup,
    phi_step,
    psi_transform,
    selection_kernel,
    semigroup_d,
    two_state_example,
)
from .streams import RngSpec
from .particles import (
    Accumulator,
    ParticleEnsemble,
    ReplicationBatch,
    SamplingMcKean,
    SimulationRun,
    field_V,
    field_W,
    init_particles,
    martingale_bracket,
    remainder_R,
    replicate,
    replicate_experiment,
    simulate,
    step,
    write_field_samples,
)
from .analysis import (
    CovarianceMatrix,
    LaplaceResult,
    RateEvaluation,
    Report,
    SpeedSchedule,
    bracket_drift_check,
    cov_V,
    cov_W,
    covariance_matrix,
    laplace_estimate,
    laplace_from_samples,
    mdp_sweep,
    rate_I_measure,
    rate_J,
    rate_quadratic,
    rate_variational_numeric,
    remainder_tail_check,
    variance_form,
)
from .empirical import (
    DeltaClass,
    FunctionClass,
    class_sup_norm,
    covering_number,
    delta_class,
    entropy_integral,
    equicontinuity_sweep,
    orlicz_estimate,
    uniform_covering_number,
)
