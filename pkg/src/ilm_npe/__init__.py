"""Neural posterior estimation and data-augmented MCMC for spatial
individual-level epidemic models."""

__version__ = "0.1.0"

from ._errors import (  # noqa: E402
    ConfigError,
    IlmError,
    InvalidPopulationError,
    InvalidTrajectoryError,
    NumericalError,
    OutOfDistributionWarning,
    SingularDistanceError,
)
from .epidemic import (  # noqa: E402
    NEVER,
    ObservationBatch,
    ObservedEpidemic,
    ParameterVector,
    Scenario,
    Trajectory,
    observe,
    simulate_seir,
    simulate_sir,
)
from .population import Population, generate_clustered, generate_uniform, knn_graph  # noqa: E402
from .priors import PriorSpec, log_prior, sample_prior  # noqa: E402

__all__ = [
    "__version__",
    "ConfigError",
    "IlmError",
    "InvalidPopulationError",
    "InvalidTrajectoryError",
    "NumericalError",
    "OutOfDistributionWarning",
    "SingularDistanceError",
    "NEVER",
    "ObservationBatch",
    "ObservedEpidemic",
    "ParameterVector",
    "Scenario",
    "Trajectory",
    "observe",
    "simulate_seir",
    "simulate_sir",
    "Population",
    "generate_clustered",
    "generate_uniform",
    "knn_graph",
    "PriorSpec",
    "log_prior",
    "sample_prior",
]
