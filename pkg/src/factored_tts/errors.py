"""Exception hierarchy shared by every module."""


class FactoredTTSError(Exception):
    """Base class for all package errors."""


class InvalidFactorIndex(FactoredTTSError, IndexError):
    pass


class InvalidPlacement(FactoredTTSError, ValueError):
    pass


class InvalidTopology(FactoredTTSError, ValueError):
    pass


class ShapeError(FactoredTTSError, ValueError):
    pass


class InvalidState(FactoredTTSError, RuntimeError):
    pass


class NumericalError(FactoredTTSError, ArithmeticError):
    """Non-finite values or an ill-posed linear system.

    ``epoch`` is set when the failure happened inside a training loop.
    """

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class DegenerateDimension(FactoredTTSError, ValueError):
    pass


class DegenerateVariance(FactoredTTSError, ValueError):
    pass


class EmptyInput(FactoredTTSError, ValueError):
    pass


class InsufficientVoicedFrames(FactoredTTSError, ValueError):
    pass


class InvalidConfig(FactoredTTSError, ValueError):
    pass


class ReportError(FactoredTTSError, ValueError):
    pass
