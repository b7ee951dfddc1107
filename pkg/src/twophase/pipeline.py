"""Estimators of logistic coefficients from two-phase samples.

``estimate_calib_influence`` is the three-step procedure: predict x2 on all
of s1, fit the outcome model on s1 with the prediction in place of x2, then
calibrate the s2 weights to the weighted s1 on that fit's score
contributions and refit on s2 with the calibrated weights. The remaining
functions are the comparators (direct s2, calibration to population totals
of covariates, plug-in imputation, and the s1 oracle).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import linalg

from . import calib, wlogit
from .calib import CalibrationProblem, Distance
from .datamodel import TwoPhaseDataset, design_frame
from .errors import DataError, OracleUnavailableError, RankDeficientError
from .varest import StackedSystem, VarianceEstimate, variance_calibrated, variance_direct
from .wlogit import ModelSpec

ORACLE_COLUMN = "x2_oracle"


class Method(str, Enum):
    DIRECT_S2 = "DirectS2"
    CALIB_FP = "CalibFP"
    CALIB_INFLUENCE = "CalibInfluence"
    DIRECT_S1_ORACLE = "DirectS1Oracle"
    IMPUTATION = "Imputation"


class PredictorMode(str, Enum):
    PASSTHROUGH = "passthrough"
    LINEAR_IN_S2 = "linear"


@dataclass(frozen=True)
class PredictorSpec:
    """How x2* is produced on s1.

    PASSTHROUGH copies one named column; LINEAR_IN_S2 regresses x2 on
    (1, columns...) by weighted least squares over s2 with combined weights.
    """

    mode: PredictorMode
    columns: tuple

    @classmethod
    def passthrough(cls, name):
        return cls(PredictorMode.PASSTHROUGH, (name,))

    @classmethod
    def linear(cls, *names):
        return cls(PredictorMode.LINEAR_IN_S2, tuple(names))


@dataclass(frozen=True, eq=False)
class Prediction:
    values: np.ndarray
    r2: float
    coef: np.ndarray | None = None


@dataclass(eq=False)
class EstimatorOutput:
    method: Method
    beta: np.ndarray
    covariance: np.ndarray | None
    df: int
    names: tuple
    diagnostics: dict = field(default_factory=dict)
    fit: wlogit.LogisticFit | None = None
    label: str = ""

    @property
    def variance(self) -> np.ndarray:
        if self.covariance is None:
            return np.full(len(self.beta), np.nan)
        return np.diag(self.covariance)


def _weighted_r2(x, xhat, w) -> float:
    mx = np.sum(w * x) / w.sum()
    mh = np.sum(w * xhat) / w.sum()
    cov = np.sum(w * (x - mx) * (xhat - mh))
    vx = np.sum(w * (x - mx) ** 2)
    vh = np.sum(w * (xhat - mh) ** 2)
    if vx == 0 or vh == 0:
        return float("nan")
    return float(cov**2 / (vx * vh))


def predict_x2(dataset: TwoPhaseDataset, spec: PredictorSpec) -> Prediction:
    ds = dataset
    s2 = ds.in_s2
    w = ds.w[s2]
    x2 = ds.x2[s2]
    if spec.mode is PredictorMode.PASSTHROUGH:
        (name,) = spec.columns
        values = np.array(ds.column(name), dtype=float)
        if not np.all(np.isfinite(values)):
            raise DataError(f"predictor column {name!r} has missing values")
        r2 = _weighted_r2(x2, values[s2], w) if s2.any() else float("nan")
        return Prediction(values, r2)

    regressors = np.column_stack([np.ones(ds.n)] + [ds.column(c) for c in spec.columns])
    if ds.n2 <= regressors.shape[1]:
        raise DataError(f"need more than {regressors.shape[1]} second-phase units for the prediction model")
    if np.ptp(x2) == 0:
        raise RankDeficientError("x2 has zero variance on s2; prediction model is degenerate", ("x2",))
    wlogit.check_rank(regressors[s2], ("(Intercept)", *spec.columns))
    sw = np.sqrt(w)
    coef = linalg.lstsq(regressors[s2] * sw[:, None], x2 * sw)[0]
    values = regressors @ coef
    return Prediction(values, _weighted_r2(x2, values[s2], w), coef)


def _fit(design, y, weights, n_scale, names, allow_negative=False):
    return wlogit.fit(design, y, weights, n_scale, names=names, allow_negative=allow_negative)


def _require_s2(ds):
    if ds.n2 == 0:
        raise DataError("empty second phase")


def _maybe_frame(ds, variance):
    return design_frame(ds) if variance else None


def estimate_direct_s2(dataset, model: ModelSpec, variance=True) -> EstimatorOutput:
    ds = dataset.canonical()
    _require_s2(ds)
    model.check(ds)
    rows = np.flatnonzero(ds.in_s2)
    X = model.design(ds, ds.x2, rows)
    names = model.names()
    f = _fit(X, ds.y[rows], ds.w[rows], ds.n_scale, names)
    cov, df = None, None
    if variance:
        frame = design_frame(ds)
        v = variance_direct(f, ds, frame, rows)
        cov, df = v.covariance, v.df
    return EstimatorOutput(Method.DIRECT_S2, f.beta, cov, df, names, {"n2": len(rows)}, f)


def oracle_x2(ds: TwoPhaseDataset) -> np.ndarray:
    if ORACLE_COLUMN in ds.aux and np.all(np.isfinite(ds.aux[ORACLE_COLUMN])):
        return ds.aux[ORACLE_COLUMN]
    if np.all(np.isfinite(ds.x2)):
        return ds.x2
    raise OracleUnavailableError("oracle unavailable: x2 is missing outside the second phase")


def estimate_direct_s1(oracle_dataset, model: ModelSpec, variance=True) -> EstimatorOutput:
    ds = oracle_dataset.canonical()
    model.check(ds)
    x2 = oracle_x2(ds)
    X = model.design(ds, x2)
    names = model.names()
    f = _fit(X, ds.y, ds.w1, ds.n_scale, names)
    cov, df = None, None
    if variance:
        frame = design_frame(ds)
        v = variance_direct(f, ds, frame)
        cov, df = v.covariance, v.df
    return EstimatorOutput(Method.DIRECT_S1_ORACLE, f.beta, cov, df, names, {"n1": ds.n}, f)


def estimate_imputation(dataset, model: ModelSpec, spec: PredictorSpec, variance=True) -> EstimatorOutput:
    """Single deterministic imputation: x2 where observed, x2* elsewhere, fit on s1 with w1.

    The variance treats imputed values as fixed (no term for estimated
    prediction coefficients).
    """
    ds = dataset.canonical()
    model.check(ds)
    observed = ds.in_s2 & np.isfinite(ds.x2)
    if not observed.any():
        raise DataError("no observed x2")
    pred = predict_x2(ds, spec)
    x2 = np.where(observed, ds.x2, pred.values)
    X = model.design(ds, x2)
    names = model.names()
    f = _fit(X, ds.y, ds.w1, ds.n_scale, names)
    cov, df = None, None
    if variance:
        frame = design_frame(ds)
        v = variance_direct(f, ds, frame)
        cov, df = v.covariance, v.df
    return EstimatorOutput(Method.IMPUTATION, f.beta, cov, df, names,
                           {"prediction_r2": pred.r2}, f)


def estimate_calib_fp(dataset, model: ModelSpec, aux_columns, fp_totals,
                      distance=Distance.CHISQ, variance=True) -> EstimatorOutput:
    """Calibrate s2 to known population totals of (1, aux_columns...), then fit.

    ``fp_totals`` is ordered as (N, total of each aux column).
    """
    ds = dataset.canonical()
    _require_s2(ds)
    model.check(ds)
    rows = np.flatnonzero(ds.in_s2)
    V = np.column_stack([np.ones(ds.n)] + [ds.column(c) for c in aux_columns])
    problem = CalibrationProblem.to_totals(V[rows], ds.w[rows], fp_totals, ds.n_scale, distance)
    cal = calib.solve(problem)
    X = model.design(ds, ds.x2, rows)
    names = model.names()
    f = _fit(X, ds.y[rows], cal.calibrated_weights, ds.n_scale, names, allow_negative=True)
    diag = {
        "calibration_residual": cal.constraint_residual,
        "negative_weight_count": cal.negative_weight_count,
    }
    cov, df = None, None
    if variance:
        frame = design_frame(ds)
        system = StackedSystem(
            design=model.design(ds, np.nan_to_num(ds.x2)), y=ds.y, w1=ds.w1, w=ds.w,
            in_s2=ds.in_s2, n_scale=ds.n_scale, distance=Distance(distance),
            aux=V, totals=np.asarray(fp_totals, dtype=float),
        )
        v = variance_calibrated(system, np.concatenate([f.beta, cal.eta]), frame)
        cov, df = v.covariance, v.df
    return EstimatorOutput(Method.CALIB_FP, f.beta, cov, df, names, diag, f)


def estimate_calib_influence(dataset, model: ModelSpec, spec: PredictorSpec,
                             distance=Distance.CHISQ, *, auxiliary="score",
                             stack_proxy=True, floor=None, variance=True) -> EstimatorOutput:
    """Calibrate on influence functions of the proxy fit, then refit on s2.

    ``auxiliary="score"`` calibrates on h_i = (y_i - p*_i) x*_i;
    ``"influence"`` on the influence functions themselves. Both give the
    same chi-square factors since one is a fixed linear map of the other.
    """
    ds = dataset.canonical()
    _require_s2(ds)
    model.check(ds)
    distance = Distance(distance)
    N = ds.n_scale
    names = model.names()

    pred = predict_x2(ds, spec)
    Xs = model.design(ds, pred.values)
    proxy = _fit(Xs, ds.y, ds.w1, N, names)
    h = proxy.scores
    if auxiliary == "score":
        v = h
    elif auxiliary == "influence":
        v = proxy.influence
    else:
        raise ValueError(f"unknown auxiliary {auxiliary!r}")

    problem = CalibrationProblem.two_phase(v, ds.in_s2, ds.w1, ds.w, N, distance)
    cal = calib.solve(problem, floor=floor)

    rows = np.flatnonzero(ds.in_s2)
    X = model.design(ds, ds.x2, rows)
    f = _fit(X, ds.y[rows], cal.calibrated_weights, N, names, allow_negative=True)

    w_cal = cal.calibrated_weights
    score_residual = np.max(np.abs((w_cal @ h[rows] - ds.w1 @ h) / N))
    diag = {
        "calibration_residual": cal.constraint_residual,
        "score_constraint_residual": float(score_residual),
        "negative_weight_count": cal.negative_weight_count,
        "prediction_r2": pred.r2,
        "proxy_beta": proxy.beta,
        "eta": cal.eta,
        "factors": cal.factors,
    }
    cov, df = None, None
    if variance:
        frame = design_frame(ds)
        system = StackedSystem(
            design=model.design(ds, np.nan_to_num(ds.x2)), y=ds.y, w1=ds.w1, w=ds.w,
            in_s2=ds.in_s2, n_scale=N, distance=distance,
            proxy_design=Xs, beta_star_hat=proxy.beta, stack_proxy=stack_proxy,
        )
        eta_h = cal.eta if auxiliary == "score" else _eta_on_scores(proxy, cal.eta)
        theta = np.concatenate([f.beta, eta_h] + ([proxy.beta] if stack_proxy else []))
        v = variance_calibrated(system, theta, frame)
        cov, df = v.covariance, v.df
    return EstimatorOutput(Method.CALIB_INFLUENCE, f.beta, cov, df, names, diag, f)


def _eta_on_scores(proxy, eta_infl):
    # influence_i = M h_i with M = -(N U*_beta)^-1, so v'eta = h'(M' eta)
    M = linalg.inv(-proxy.score_jacobian * proxy.n_scale)
    return M.T @ eta_infl
