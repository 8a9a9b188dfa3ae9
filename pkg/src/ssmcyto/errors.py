"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: contract/shape/configuration problems
exit 1, I/O and file-format problems exit 2.
"""


class SsmCytoError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SsmCytoError):
    """Operand dimensions do not satisfy an operation's contract."""


class ConfigError(SsmCytoError):
    """A configuration value violates its documented constraints."""


class ContractError(SsmCytoError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class EvaluationError(SsmCytoError):
    """A function produced non-finite output where finite values are required."""


class FormatError(SsmCytoError):
    """A persisted file does not parse as the declared format."""
