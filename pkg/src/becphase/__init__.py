"""Hybrid Wigner / positive-P phase-space simulation of double-well BEC interferometry."""

from .errors import (BecPhaseError, ConfigurationError, DivergenceError, InternalConsistencyError,
                     NumericError, UndefinedVisibilityError)

__version__ = "0.1.0"

__all__ = ["BecPhaseError", "ConfigurationError", "DivergenceError", "InternalConsistencyError",
           "NumericError", "UndefinedVisibilityError", "__version__"]
