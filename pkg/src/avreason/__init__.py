"""Interleaved text/latent reasoning over synchronized audio-visual streams, in numpy."""

from .errors import (AvReasonError, CapacityError, ContractError, DataError, FormatError, NumericError,
                     ShapeError)

__version__ = "0.1.0"

__all__ = ["AvReasonError", "CapacityError", "ContractError", "DataError", "FormatError", "NumericError",
           "ShapeError", "__version__"]
