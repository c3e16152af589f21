class CamalError(Exception):
    """
    Base class for every error raised by the localization pipeline
    """


class DataValidationError(CamalError, ValueError):
    """
    Input values, labels or ratios violate a documented precondition
    """


class ShapeError(CamalError, ValueError):
    """
    Array length or channel count does not match what the operation expects
    """


class StateError(CamalError, RuntimeError):
    """
    An operation was called before the state it depends on exists
    (missing forward cache, untracked batch-norm statistics)
    """


class ConfigurationError(CamalError, ValueError):
    """
    A layer or engine was configured with values it cannot run with
    """
