"""Exception hierarchy shared by all modules."""


class QTMError(Exception):
    """Base class for every error raised by :mod:`qtmq`."""


class PreconditionError(QTMError, ValueError):
    """An argument violates the documented contract of an operation."""


class PoleError(QTMError, ZeroDivisionError):
    """A spectral parameter sits on (or within tolerance of) a pole."""


class SingularError(QTMError, ArithmeticError):
    pass


class InvalidCutoff(PreconditionError):
    pass


class SizeError(QTMError, MemoryError):
    """A dense construction would exceed the configured size budget."""


class RegimeError(PreconditionError):
    """Parameters fall outside the regime where a construction is defined."""


class ConvergenceError(QTMError, ArithmeticError):
    pass


class DegenerateError(QTMError, ArithmeticError):
    """A polynomial loses degree (leading coefficient numerically zero)."""


class RootCoincidence(QTMError, ArithmeticError):
    pass


class SeriesPole(QTMError, ZeroDivisionError):
    pass


class NoConvergence(QTMError, ArithmeticError):
    def __init__(self, message, partial=None, failures=0):
        super().__init__(message)
        self.partial = partial or []
        self.failures = failures


class UnmatchedLargest(QTMError):
    """The largest-modulus eigenvalue is not reproduced by any solution.

    This is a reportable finding rather than a crash; the CLI maps it to
    exit code 2.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class FitUnstable(QTMError, ArithmeticError):
    pass


class PowerIterationStall(ConvergenceError):
    pass


class DividedPowerOverflow(QTMError, OverflowError):
    """Divided-power norms blew up, usually a wrong ``ellprime``."""
