"""Exception types shared across the package."""


class OsteoNetError(Exception):
    """Base class for all package errors."""


class InvalidInput(OsteoNetError, ValueError):
    pass


class EmptyMask(OsteoNetError, ValueError):
    pass


class NotFitted(OsteoNetError, RuntimeError):
    pass


class ShapeError(OsteoNetError, ValueError):
    pass


class PatientIdError(OsteoNetError, ValueError):
    """A tile path did not match the patient-id pattern."""


class InfeasibleSplit(OsteoNetError, RuntimeError):
    pass


class DegenerateClassCounts(OsteoNetError, ValueError):
    pass


class UndefinedMetric(OsteoNetError, ValueError):
    pass


class ConfigError(OsteoNetError, ValueError):
    pass


class NonFiniteLoss(OsteoNetError, FloatingPointError):
    pass


class IncompatibleCheckpoint(OsteoNetError, RuntimeError):
    pass
