"""Calibration of second-phase survey weights on influence functions.

Weighted logistic regression for two-phase samples nested in complex
(stratified, multistage, PPS) designs, with Taylor-linearization variances
and a Monte Carlo harness for design-based simulation studies.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    CalibrationError,
    ConvergenceError,
    DataError,
    DesignError,
    EstimationError,
    OracleUnavailableError,
    RankDeficientError,
    SeparationError,
    StudyAbort,
)
