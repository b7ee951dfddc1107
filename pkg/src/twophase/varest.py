"""Taylor-linearization variances under stratified multistage designs.

Ultimate-cluster estimator: per-unit linearized contributions are summed to
phase-1 PSU totals and their between-PSU spread within strata estimates the
variance of the estimating-equation totals (with-replacement approximation,
no finite-population correction). Second-phase sampling nests inside the
phase-1 PSUs, so PSU totals carry both phases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats
from scipy.special import expit

from .calib import Distance
from .datamodel import DesignFrame
from .errors import DesignError, EstimationError


@dataclass(frozen=True, eq=False)
class VarianceEstimate:
    covariance: np.ndarray
    df: int
    psu_counts: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


def psu_total_covariance(contrib: np.ndarray, frame: DesignFrame) -> np.ndarray:
    """B = sum_h m_h/(m_h-1) sum_j (t_hj - tbar_h)(t_hj - tbar_h)'."""
    contrib = np.asarray(contrib, dtype=float)
    if contrib.ndim == 1:
        contrib = contrib[:, None]
    totals = np.zeros((frame.total_psus, contrib.shape[1]))
    np.add.at(totals, frame.row_psu, contrib)
    B = np.zeros((contrib.shape[1],) * 2)
    for h, (label, _, m) in enumerate(frame.strata):
        if m < 2:
            raise DesignError(f"stratum {label!r} has a single PSU; variance not estimable")
        t = totals[frame.psu_stratum == h]
        d = t - t.mean(axis=0)
        B += m / (m - 1) * (d.T @ d)
    return B


def _sandwich(A, B, p):
    try:
        lu = linalg.lu_factor(A)
    except (linalg.LinAlgError, ValueError):
        raise EstimationError("singular linearization Jacobian") from None
    if not np.all(np.isfinite(lu[0])) or np.min(np.abs(np.diag(lu[0]))) == 0:
        raise EstimationError("singular linearization Jacobian")
    Ainv = linalg.lu_solve(lu, np.eye(A.shape[0]))
    V = (Ainv @ B @ Ainv.T)[:p, :p]
    return _psd_checked(V)


def _psd_checked(V):
    V = (V + V.T) / 2
    eig = linalg.eigvalsh(V)
    if eig.min() < -1e-12 * max(np.trace(V), 1e-300):
        raise EstimationError(f"covariance not positive semidefinite (min eigenvalue {eig.min():.3g})")
    return V


def variance_direct(fit, dataset, frame: DesignFrame, rows=None) -> VarianceEstimate:
    """Sandwich U_beta^-1 B U_beta^-T for a weighted logistic fit.

    ``rows`` gives the dataset positions of the fitted units (default: all
    rows). Units of s1 outside the fit contribute zero but their PSUs still
    count toward m_h.
    """
    if rows is None:
        rows = np.arange(dataset.n)
    rows = np.asarray(rows)
    if rows.dtype == bool:
        rows = np.flatnonzero(rows)
    if len(rows) != len(fit.y):
        raise ValueError("rows do not match the fitted units")
    contrib = np.zeros((dataset.n, len(fit.beta)))
    contrib[rows] = fit.weights[:, None] * fit.scores / fit.n_scale
    B = psu_total_covariance(contrib, frame)
    cov = _sandwich(fit.score_jacobian, B, len(fit.beta))
    return VarianceEstimate(cov, frame.df, frame.psu_counts)


@dataclass(eq=False)
class StackedSystem:
    """Joint estimating equations for a calibration-weighted logistic fit.

    Parameters theta = (beta, eta[, beta_star]); every total is divided by
    ``n_scale``. Per s1 unit i the stacked contribution is

      [ d2_i F_i w_i s_i(beta) ;
        d2_i F_i w_i v_i - w1_i v_i      (two-phase target)
        d2_i F_i w_i v_i                 (fixed totals; target subtracted once) ;
        w1_i h_i(beta_star) ]

    with F_i = F(v_i' eta). When ``proxy_design`` is given, v_i is the proxy
    score h_i(beta_star) = (y_i - p*_i) x*_i; otherwise v_i is the fixed
    ``aux`` row. ``stack_proxy=False`` freezes v_i at ``beta_star_hat``
    (plug-in variant).
    """

    design: np.ndarray
    y: np.ndarray
    w1: np.ndarray
    w: np.ndarray
    in_s2: np.ndarray
    n_scale: float
    distance: Distance = Distance.CHISQ
    aux: np.ndarray | None = None
    proxy_design: np.ndarray | None = None
    beta_star_hat: np.ndarray | None = None
    totals: np.ndarray | None = None
    stack_proxy: bool = True

    def __post_init__(self):
        self.in_s2 = np.asarray(self.in_s2, dtype=bool)
        self.d2w = np.where(self.in_s2, np.nan_to_num(self.w), 0.0)
        self.design = np.where(self.in_s2[:, None], np.nan_to_num(self.design), 0.0)
        if self.proxy_design is None and self.aux is None:
            raise ValueError("need either aux or proxy_design")
        if self.proxy_design is not None and not self.stack_proxy:
            self.aux = self._proxy_score(self.beta_star_hat)[0]
        self.p = self.design.shape[1]
        self.k = (self.aux if self.aux is not None and not self._stacked_proxy
                  else self.proxy_design).shape[1]
        self.ps = self.proxy_design.shape[1] if self._stacked_proxy else 0

    @property
    def _stacked_proxy(self) -> bool:
        return self.proxy_design is not None and self.stack_proxy

    @property
    def dim(self) -> int:
        return self.p + self.k + self.ps

    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        beta = theta[: self.p]
        eta = theta[self.p: self.p + self.k]
        bstar = theta[self.p + self.k:] if self.ps else None
        return beta, eta, bstar

    def _proxy_score(self, bstar):
        ps = expit(self.proxy_design @ bstar)
        return (self.y - ps)[:, None] * self.proxy_design, ps

    def _aux(self, bstar):
        if self._stacked_proxy:
            return self._proxy_score(bstar)
        return self.aux, None

    def contributions(self, theta) -> np.ndarray:
        beta, eta, bstar = self.split(theta)
        v, _ = self._aux(bstar)
        u = v @ eta
        F = self.distance.factor(u)
        p = expit(self.design @ beta)
        s = (self.y - p)[:, None] * self.design
        parts = [(self.d2w * F)[:, None] * s]
        cal = (self.d2w * F)[:, None] * v
        if self.totals is None:
            cal = cal - self.w1[:, None] * v
        parts.append(cal)
        if self.ps:
            parts.append(self.w1[:, None] * v)
        return np.hstack(parts) / self.n_scale

    def stacked_totals(self, theta) -> np.ndarray:
        tot = self.contributions(theta).sum(axis=0)
        if self.totals is not None:
            tot[self.p: self.p + self.k] -= self.totals / self.n_scale
        return tot

    def jacobian(self, theta) -> np.ndarray:
        beta, eta, bstar = self.split(theta)
        v, pstar = self._aux(bstar)
        u = v @ eta
        F = self.distance.factor(u)
        dF = self.distance.factor_derivative(u)
        p = expit(self.design @ beta)
        X = self.design
        r = self.y - p
        s = r[:, None] * X
        dw = self.d2w
        P, K, S = self.p, self.k, self.ps
        A = np.zeros((self.dim, self.dim))
        A[:P, :P] = -(X * (dw * F * p * (1 - p))[:, None]).T @ X
        A[:P, P:P + K] = (s * (dw * dF)[:, None]).T @ v
        A[P:P + K, P:P + K] = (v * (dw * dF)[:, None]).T @ v
        if S:
            Xs = self.proxy_design
            g = pstar * (1 - pstar)
            # dv_i/dbeta* = -g_i x*_i x*_i' ;  dF_i/dbeta* = -dF_i g_i (x*_i' eta) x*_i
            xe = Xs @ eta
            c = dF * g * xe
            A[:P, P + K:] = -(s * (dw * c)[:, None]).T @ Xs
            coef = dw * F - self.w1
            A[P:P + K, P + K:] = (-(v * (dw * c)[:, None]).T @ Xs
                                  - (Xs * (coef * g)[:, None]).T @ Xs)
            A[P + K:, P + K:] = -(Xs * (self.w1 * g)[:, None]).T @ Xs
        return A / self.n_scale

    def variance(self, theta, frame: DesignFrame) -> np.ndarray:
        B = psu_total_covariance(self.contributions(theta), frame)
        return _sandwich(self.jacobian(theta), B, self.p)


def variance_calibrated(system: StackedSystem, theta, frame: DesignFrame) -> VarianceEstimate:
    """Top-left block of A^-1 B A^-T for the stacked calibration system."""
    return VarianceEstimate(system.variance(theta, frame), frame.df, frame.psu_counts)


def t_multiplier(df, level=0.95) -> float:
    return float(stats.t.ppf(0.5 + level / 2, df))


def wald_ci(beta, variance, df, level=0.95) -> np.ndarray:
    """beta_j -/+ t_{df,1-alpha/2} SE_j; ``variance`` may be a matrix or its diagonal."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if df < 1:
        raise ValueError("df must be >= 1")
    beta = np.asarray(beta, dtype=float)
    var = np.asarray(variance, dtype=float)
    if var.ndim == 2:
        var = np.diag(var)
    half = t_multiplier(df, level) * np.sqrt(var)
    return np.column_stack([beta - half, beta + half])
