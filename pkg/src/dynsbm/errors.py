"""Exception hierarchy."""


class DynSBMError(Exception):
    """Base class for all package errors."""


class InvalidParams(DynSBMError, ValueError):
    pass


class NotErgodic(DynSBMError, ValueError):
    pass


class UnsupportedValue(DynSBMError, ValueError):
    """An observation lies outside the support of the emission family."""


class UnsupportedFamily(DynSBMError, ValueError):
    pass


class DomainError(DynSBMError, ValueError):
    pass


class EmptyOverlap(DynSBMError, ValueError):
    pass


class DimensionMismatch(DynSBMError, ValueError):
    pass


class UnknownPreset(DynSBMError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown preset"


class BudgetExceeded(DynSBMError, RuntimeError):
    pass


class DegenerateFit(DynSBMError, RuntimeError):
    """All restarts ended with fewer occupied groups than requested.

    The best (degenerate) result is kept on ``self.result`` so callers that
    can live with it do not have to refit.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result
