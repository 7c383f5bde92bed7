"""Monte Carlo toolkit for the stochastic maximum principle of discounted
infinite-horizon control problems with dissipative (monotone) dynamics."""

__version__ = "0.1.0"

from .adjoint import (
    AdjointSolution,
    IdentityReport,
    apriori_contraction_check,
    check_duality_yp,
    check_duality_zp,
    solve_first_adjoint,
    truncation_cauchy,
)
from .controls import ConstantControl, ControlLaw, FunctionFeedback, LinearFeedback, SpikeControl
from .errors import (
    ConfigParseError,
    EmptyControlGrid,
    InsufficientInnerPaths,
    InsufficientPaths,
    InvalidParams,
    NewtonDivergence,
    NonFiniteCoefficient,
    NonFiniteRegression,
    NonFiniteState,
    SingularDesignMatrix,
    SMPError,
    SpikeOutsideHorizon,
    UnknownModel,
)
from .models import (
    BUILTIN_MODELS,
    ControlModel,
    ControlSet,
    MonotonicityReport,
    builtin_model,
    probe_joint_monotonicity,
    recommend_discount,
    riccati_gain,
)
from .regression import RegressionBasis
from .sde import PathBundle, TimeGrid, estimate_cost, moment_envelope, simulate_state
from .second_adjoint import (
    SecondAdjointEstimate,
    check_P_properties,
    check_spike_duality,
    check_Y_dynamics,
    estimate_P,
    hessian_H,
    spike_duality_ladder,
)
from .smp import SMPReport, argmax_h, check_smp, hamiltonian, h_function
from .variation import SpikeSpec, VariationBundle, estimate_expansion_orders, expand_cost, simulate_variations
