"""Dynamic stochastic block models with Markov group memberships.

Simulation, variational EM inference for zero-inflated emission families,
ICL / elbow model selection and clustering evaluation.
"""

from dynsbm.errors import (
    BudgetExceeded,
    DegenerateFit,
    DimensionMismatch,
    DomainError,
    DynSBMError,
    EmptyOverlap,
    InvalidParams,
    NotErgodic,
    UnknownPreset,
    UnsupportedFamily,
    UnsupportedValue,
)
from dynsbm.model_core import (
    ABSENT,
    DynamicNetwork,
    ModelParams,
    SufficientStats,
    VariationalState,
    recompute_marginals,
    stationary_distribution,
    validate_network,
)
from dynsbm.emissions import (
    Bernoulli,
    EmissionFamily,
    FiniteSpace,
    GaussianHomoscedastic,
    TruncatedPoisson,
    icl_penalty,
    log_density,
    psi,
    psi_inverse,
)
from dynsbm.vem import (
    FitConfig,
    FitResult,
    complete_log_likelihood,
    compute_elbo,
    fit,
    map_classification,
)
from dynsbm.initialization import InitConfig, concat_matrix, kmeans_init
from dynsbm.selection import SelectionResult, elbow_curve, icl_score, select_q
from dynsbm.simulation import ScenarioPreset, preset_scenario, simulate
from dynsbm.evaluation import (
    ari,
    averaged_ari,
    global_ari,
    group_fluxes,
    per_time_ari,
    pi_mse,
)

__version__ = "0.1.0"
