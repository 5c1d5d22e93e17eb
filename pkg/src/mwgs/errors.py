"""Exception hierarchy shared by every stage of the pipeline."""


class MWGSError(Exception):
    """Base class for all package errors."""


class InvalidParameter(MWGSError, ValueError):
    pass


class InvalidShape(MWGSError, ValueError):
    pass


class InvalidConfig(MWGSError, ValueError):
    pass


class InvalidGeometry(MWGSError, ValueError):
    pass


class InvalidState(MWGSError, RuntimeError):
    pass


class NumericalDegeneracy(MWGSError, ArithmeticError):
    pass


class BehindCamera(MWGSError, ValueError):
    """Raised when a point lies on or behind the near plane."""


class MissingEntry(MWGSError, KeyError):
    pass


class TrainingDivergence(MWGSError, RuntimeError):
    """Non-finite loss or gradient during optimization."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
