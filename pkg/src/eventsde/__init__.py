"""Event SDEs: simulation with state-dependent jumps, exact pathwise gradients,
stochastic spiking networks and signature-kernel training."""

from .errors import (
    ApproximationWarning,
    AssumptionWarning,
    BracketError,
    CapacityError,
    ConfigError,
    ConvergenceError,
    EventSDEError,
    ModelError,
    NonDifferentiableError,
    NumericalError,
    OptimizerError,
    StepSizeError,
    TrainingError,
    TransversalityError,
)
from .events import EventSolution, EventSpec, apply_transition, event_sde_solve, locate_event
from .rng import ConstantStream, SequenceStream, UniformStream, derive_seed
from .sde_core import (
    BrownianDriver,
    PathSegment,
    VectorFields,
    sample_driver,
    solve_segment,
    stratonovich_step,
    zero_driver,
)
from .sensitivity import (
    AssumptionReport,
    SensitivityState,
    check_assumptions,
    event_time_gradient,
    finite_difference_oracle,
    forward_sensitivity,
    transition_gradient,
    variational_segment,
)
from .signature import (
    KernelConfig,
    TruncatedSignature,
    chen_product,
    marcus_interpolate,
    mmd_permutation_test,
    mmd_unbiased,
    robust_normalize,
    signature_kernel,
    spikes_to_path,
    truncated_signature,
)

__version__ = "0.1.0"
