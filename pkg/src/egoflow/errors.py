"""Exception hierarchy shared by every pipeline stage."""


class EgoFlowError(Exception):
    """Base class; the CLI maps subclasses to exit codes via ``exit_code``."""

    exit_code = 1


class EmptyInput(EgoFlowError, ValueError):
    exit_code = 2


class InvalidTimestamps(EgoFlowError, ValueError):
    exit_code = 3


class DimensionMismatch(EgoFlowError, ValueError):
    exit_code = 3


class InsufficientFrames(EgoFlowError, ValueError):
    exit_code = 2


class InvalidWindow(EgoFlowError, ValueError):
    exit_code = 3


class ShapeError(EgoFlowError, ValueError):
    exit_code = 3


class LabelError(EgoFlowError, ValueError):
    exit_code = 3


class DatasetError(EgoFlowError, ValueError):
    exit_code = 2


class NormalizationError(EgoFlowError, ValueError):
    exit_code = 4


class FormatError(EgoFlowError, ValueError):
    exit_code = 3


class SplitError(EgoFlowError, ValueError):
    exit_code = 2


class NumericError(EgoFlowError, ArithmeticError):
    exit_code = 4
