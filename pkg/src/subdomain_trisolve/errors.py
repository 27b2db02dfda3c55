class SubdomainSolveError(Exception):
    """Base exception for all failures raised by this package."""

    pass


class ConfigError(SubdomainSolveError):
    """Invalid configuration value or unreadable configuration file."""

    pass


class DimensionMismatchError(SubdomainSolveError):
    """Operand shapes do not agree."""

    pass


class MatrixFormatError(SubdomainSolveError):
    """A CSR/BSR container violates its structural invariants."""

    pass


class GridError(SubdomainSolveError):
    """Invalid grid dimensions or index overflow."""

    pass


class MatrixMarketError(SubdomainSolveError):
    """Base class for Matrix Market parse failures."""

    pass


class MalformedHeaderError(MatrixMarketError):
    pass


class UnsupportedFieldError(MatrixMarketError):
    pass


class IndexOutOfBoundsError(MatrixMarketError):
    pass


class PartitionError(SubdomainSolveError):
    """Partition labels or tile shapes are unusable."""

    pass


class DecompositionViolationError(SubdomainSolveError):
    """A matrix entry couples two different subdomains."""

    pass


class ScratchCapacityError(SubdomainSolveError):
    """A subdomain does not fit in the per-subdomain scratch buffer."""

    pass


class RowError(SubdomainSolveError):
    """Failure attributable to one matrix row."""

    def __init__(self, row: int, message: str):
        self.row = row
        super().__init__(f"{message} (row {row})")


class ZeroDiagonalError(RowError):
    def __init__(self, row: int):
        super().__init__(row, "Zero diagonal in triangular factor")


class FactorizationError(RowError):
    pass


class MissingDiagonalError(FactorizationError):
    def __init__(self, row: int):
        super().__init__(row, "Structurally missing diagonal entry")


class ZeroPivotError(FactorizationError):
    def __init__(self, row: int):
        super().__init__(row, "Pivot below the configured floor")


class SingularPivotBlockError(FactorizationError):
    def __init__(self, row: int):
        super().__init__(row, "Singular 3x3 pivot block")


class SolverError(SubdomainSolveError):
    """Krylov solve did not converge. Carries the partial report and iterate."""

    def __init__(self, message: str, report=None, x=None):
        self.report = report
        self.x = x
        super().__init__(message)


class BreakdownError(SolverError):
    def __init__(self, reason: str, report=None, x=None):
        self.reason = reason
        super().__init__(f"BiCGSTAB breakdown: {reason}", report=report, x=x)


class MaxIterationsError(SolverError):
    def __init__(self, max_iter: int, report=None, x=None):
        self.max_iter = max_iter
        super().__init__(
            f"Convergence not achieved in {max_iter} iterations.", report=report, x=x
        )
