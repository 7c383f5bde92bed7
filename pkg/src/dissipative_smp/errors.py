"""Exception types raised across the package.

Every error carries enough context in its message to locate the failing
stage; the CLI turns them into a failure manifest and a nonzero exit.
"""


class SMPError(Exception):
    """Base class for all package errors."""


class NonFiniteCoefficient(SMPError):
    """A drift or diffusion evaluation returned NaN or inf."""


class UnknownModel(SMPError):
    """The requested builtin model name is not registered."""


class InvalidParams(SMPError, ValueError):
    """Model, grid or experiment parameters are out of range."""


class NewtonDivergence(SMPError):
    """The implicit drift solve did not converge."""


class NonFiniteState(SMPError):
    """A simulated state or linear SDE solution became non-finite."""


class SpikeOutsideHorizon(SMPError):
    """The spike interval is not contained in the time grid."""


class InsufficientPaths(SMPError):
    """Monte Carlo standard errors exceed the estimated signal."""


class SingularDesignMatrix(SMPError):
    """A regression design matrix is rank deficient."""


class NonFiniteRegression(SMPError):
    """A regression produced non-finite coefficients or fitted values."""


class InsufficientInnerPaths(SMPError):
    """Nested conditioning needs at least two inner paths per outer path."""


class EmptyControlGrid(SMPError):
    """The control grid used by the SMP check has no points."""


class ConfigParseError(SMPError):
    """The experiment config could not be parsed or validated.

    Attributes
    ----------
    field : str or None
        Dotted path of the offending field.
    line : int or None
        1-based line number in the config file, when known.
    """

    def __init__(self, message, field=None, line=None):
        location = []
        if line is not None:
            location.append(f"line {line}")
        if field is not None:
            location.append(f"field '{field}'")
        prefix = f"[{', '.join(location)}] " if location else ""
        super().__init__(prefix + message)
        self.field = field
        self.line = line
