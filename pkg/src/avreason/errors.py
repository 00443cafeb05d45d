"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class AvReasonError(Exception):
    exit_code = 2


class ShapeError(AvReasonError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(AvReasonError, ValueError):
    """A precondition of an operation was violated by the caller."""


class DataError(AvReasonError, ValueError):
    """Input data is malformed or does not resolve."""


class FormatError(AvReasonError, ValueError):
    """A checkpoint or dataset file is corrupt or has the wrong version."""


class CapacityError(AvReasonError, RuntimeError):
    """A sequence would exceed the model's maximum length."""


class NumericError(AvReasonError, ArithmeticError):
    """A NaN or infinity appeared where finite values were required."""

    exit_code = 3
