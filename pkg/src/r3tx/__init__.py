"""Role-aware video captioning transformer on a small numpy autodiff core."""

from .errors import (ConfigError, ContractError, DimensionError, FormatError, NumericError,
                     OOVError, R3Error, RangeError, ValidationError)
from .model import R3Config, R3Transformer

__version__ = "0.1.0"

__all__ = ["R3Config", "R3Transformer", "R3Error", "ConfigError", "ContractError",
           "DimensionError", "FormatError", "NumericError", "OOVError", "RangeError",
           "ValidationError", "__version__"]
