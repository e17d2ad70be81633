"""Exception hierarchy shared by every xmaf module."""


class XmafError(Exception):
    """Base class for all library errors."""


class DimensionError(XmafError, ValueError):
    pass


class NumericInputError(XmafError, ValueError):
    pass


class ContractError(XmafError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(XmafError, ValueError):
    pass


class AlignmentError(XmafError, ValueError):
    pass


class AnnotationError(XmafError, ValueError):
    pass


class ResampleRequiredError(XmafError, ValueError):
    pass


class DegenerateLossError(XmafError, ArithmeticError):
    """Raised when a training target has zero variance, so CCC is undefined."""


class DivergenceError(XmafError, ArithmeticError):
    pass


class OracleError(XmafError):
    """The function handed to a gradient check is not deterministic."""


class InfinityGuardError(XmafError, ValueError):
    pass


class LoadError(XmafError, IOError):
    pass


class BadMagicError(LoadError):
    pass


class VersionError(LoadError):
    pass


class TruncationError(LoadError):
    pass
