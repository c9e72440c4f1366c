"""Exception hierarchy. Every error carries a short category used by the CLI exit message."""


class IPMOError(Exception):
    category = "error"


class InvalidParameterError(IPMOError, ValueError):
    category = "invalid-parameter"


class ShapeError(IPMOError, ValueError):
    category = "shape-error"


class NumericError(IPMOError, ArithmeticError):
    category = "numeric-error"


class PreconditionError(IPMOError, ValueError):
    category = "precondition-error"


class DivergenceError(NumericError):
    category = "divergence-error"


class OracleError(IPMOError, RuntimeError):
    category = "oracle-error"


class DegenerateInstanceError(IPMOError, ValueError):
    category = "degenerate-instance"


class InsufficientDataError(IPMOError, ValueError):
    category = "insufficient-data"


class TrainingError(IPMOError, RuntimeError):
    category = "training-error"

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class LoadError(IPMOError, ValueError):
    category = "load-error"

    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.column = column
