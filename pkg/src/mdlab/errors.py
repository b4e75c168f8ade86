"""Exception hierarchy shared by every mdlab module."""


class MDLError(Exception):
    """Base class for all library errors."""


class DimensionError(MDLError, ValueError):
    """Tensor shapes do not conform to an operation's rules."""


class ContractError(MDLError, RuntimeError):
    """A caller broke a documented pre/post condition."""


class NumericalError(MDLError, FloatingPointError):
    """An operation on finite inputs produced NaN or Inf."""


class ConfigError(MDLError, ValueError):
    """Invalid configuration or specification."""


class DataError(MDLError, ValueError):
    """Dataset content violates a precondition (empty domain, bad labels...)."""


class FrozenGroupError(ContractError):
    """Attempt to update a parameter group that is frozen."""


class UndefinedMetricError(MDLError, ValueError):
    """A metric is undefined for the given input (e.g. AUC with one class)."""
