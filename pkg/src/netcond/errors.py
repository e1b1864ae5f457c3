"""Exception hierarchy shared by every netcond module."""


class NetcondError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(NetcondError, ValueError):
    pass


class NumericOverflowError(NetcondError, ArithmeticError):
    """A non-finite value appeared during evaluation."""

    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class ModelParseError(NetcondError, ValueError):
    """The model file could not be parsed. ``where`` names the line or field."""

    def __init__(self, message, where=None):
        super().__init__(f"{where}: {message}" if where else message)
        self.where = where


class ModelValidationError(NetcondError, ValueError):
    """A layer violates a structural invariant."""

    def __init__(self, message, layer_index=None):
        prefix = f"layer {layer_index}: " if layer_index is not None else ""
        super().__init__(prefix + message)
        self.layer_index = layer_index


class DegenerateOutputError(NetcondError, ArithmeticError):
    """The network output has zero norm, so relative output error is undefined."""


class DegenerateGradientError(NetcondError, ArithmeticError):
    """Every candidate direction has zero gradient."""


class EmptyResultError(NetcondError):
    """Every input was skipped."""


class TrainingDivergedError(NetcondError, ArithmeticError):
    pass
