"""Cross-task feature distillation with inverted projectors, at desk scale."""
from .exceptions import (
    BoundsError,
    ConfigError,
    ContractError,
    DegeneracyError,
    DomainError,
    FrozenError,
    MissingInputError,
    NumericError,
    ShapeError,
    XtkdError,
)
from .linalg import SvdResult, effective_rank, svd, truncated_reconstruct
from .estimators import DistilledMLPRegressor, SpectralMLPRegressor

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "svd",
    "SvdResult",
    "effective_rank",
    "truncated_reconstruct",
    "SpectralMLPRegressor",
    "DistilledMLPRegressor",
    "XtkdError",
    "ShapeError",
    "DomainError",
    "ContractError",
    "BoundsError",
    "MissingInputError",
    "FrozenError",
    "DegeneracyError",
    "NumericError",
    "ConfigError",
]
