"""invlqr: explain feedback controllers via inverse linear-quadratic control.

Recovers the state/input cost weights a black-box controller implicitly
optimizes from observed closed-loop trajectories, given (or estimating) the
linear dynamics.
"""

from .control import (
    CostWeights,
    GainSchedule,
    NmpcController,
    NmpcOptions,
    ReferenceSignal,
    StaticFeedbackPolicy,
    equilibrium_input,
    lqr_closed_loop,
    mpc_policy_lti,
    nmpc_step,
    riccati_solve,
)
from .data_io import (
    ControllerConfig,
    Dataset,
    DatasetMeta,
    ExperimentConfig,
    SamplingConfig,
    generate_dataset,
    load_config,
    load_dataset,
    sample_initial_conditions,
    save_config,
    save_dataset,
    to_deviation_coordinates,
)
from .errors import (
    ConditioningError,
    ConfigError,
    DimensionError,
    DivergenceError,
    IdentifiabilityError,
    InvlqrError,
    ParseError,
    SolverError,
    ValidationError,
)
from .ioc import (
    AdjointSequence,
    IocConfig,
    IocResult,
    ioc_objective,
    normalize_weights,
    pmp_boundary_solve,
    reconstruct_pmp_trajectory,
    solve_ioc,
)
from .systems import (
    LinearPlant,
    LinearSystem,
    OperatingPoint,
    PendulumParams,
    PendulumPlant,
    Trajectory,
    estimate_linear_system,
    lti_step,
    pendulum_linearize,
    pendulum_step,
    second_order_plant,
    simulate_closed_loop,
)

__version__ = "0.1.0"
