"""Exception hierarchy shared by every module."""


class GABError(Exception):
    """Base class for all package errors."""


class SpecValidationError(GABError, ValueError):
    def __init__(self, report):
        self.report = report
        super().__init__("invalid model spec: " + "; ".join(report.failures()))


class DomainError(GABError, ValueError):
    """A probability update left [0, 1]."""


class DegenerateMean(GABError, ArithmeticError):
    """Stationarity denominators are not positive, so no finite mean exists."""


class UnsupportedFamily(GABError, NotImplementedError):
    pass


class NoConvergence(GABError, RuntimeError):
    def __init__(self, message, iterations=None):
        self.iterations = iterations
        super().__init__(message if iterations is None else f"{message} (iterations={iterations})")


# the eigenvalue routine reports its failure under this name
NonConvergence = NoConvergence


class SingularInformation(GABError, ArithmeticError):
    def __init__(self, min_eigenvalue):
        self.min_eigenvalue = min_eigenvalue
        super().__init__(f"information matrix is singular (smallest eigenvalue {min_eigenvalue:.3e})")


class ShapeMismatch(GABError, ValueError):
    pass


class RankDeficient(GABError, ArithmeticError):
    pass


class EmptyWindow(GABError, ValueError):
    pass


class DataError(GABError, ValueError):
    """Malformed input file; message carries the row/column location."""
