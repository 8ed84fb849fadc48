"""Exception types shared across the package."""


class AdaRankError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(AdaRankError, ValueError):
    """Operand shapes do not conform."""


class InputError(AdaRankError, ValueError):
    """Input data is malformed (out-of-range labels, non-finite values, ...)."""


class ContractError(AdaRankError, RuntimeError):
    """A call violated an operation's precondition."""


class ConfigurationError(AdaRankError, ValueError):
    """Invalid hyperparameters or configuration combination."""


class TrainingAborted(AdaRankError, RuntimeError):
    """Training hit a non-finite loss."""


class UnsupportedModeError(AdaRankError, ValueError):
    """The requested export or operation needs a mode this run did not use."""
