"""Exception hierarchy.

Every estimator failure derives from ``EstimationError`` so the Monte Carlo
driver and the CLI can count or report failures per method without
swallowing programming errors.
"""


class EstimationError(Exception):
    pass


class ConvergenceError(EstimationError):
    """Iterative solver hit its iteration cap.

    ``last`` carries the final iterate and ``max_score`` the largest
    absolute residual of the equation being solved.
    """

    def __init__(self, message, last=None, max_score=float("nan")):
        super().__init__(message)
        self.last = last
        self.max_score = max_score


class RankDeficientError(EstimationError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class SeparationError(EstimationError):
    pass


class CalibrationError(EstimationError):
    pass


class OracleUnavailableError(EstimationError):
    pass


class DataError(EstimationError):
    """Input data cannot support the requested estimator."""


class DesignError(ValueError):
    """Invalid design metadata (strata/PSU layout, cycles)."""


class StudyAbort(RuntimeError):
    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = dict(failures or {})
