"""Design-weighted logistic regression.

Solves U(beta) = N^-1 sum_i w_i (y_i - p_i) x_i = 0 by Newton-Raphson with
step-halving on the weighted deviance, and returns per-unit influence
functions d(beta_hat)/d(w_i).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import expit, log_expit, logit

from .errors import ConvergenceError, DataError, RankDeficientError, SeparationError

MAX_CONDITION = 1e12


@dataclass(frozen=True, eq=False)
class LogisticFit:
    beta: np.ndarray
    score_jacobian: np.ndarray
    fitted_p: np.ndarray
    influence: np.ndarray
    converged: bool
    iterations: int
    max_score: float
    design: np.ndarray = field(repr=False, default=None)
    y: np.ndarray = field(repr=False, default=None)
    weights: np.ndarray = field(repr=False, default=None)
    n_scale: float = 1.0
    names: tuple = ()
    deviance_path: tuple = ()

    @property
    def scores(self) -> np.ndarray:
        """Unweighted per-unit score contributions (y_i - p_i) x_i."""
        return (self.y - self.fitted_p)[:, None] * self.design


@dataclass(frozen=True)
class ModelSpec:
    """Which columns enter the design row (1, x_i^T).

    ``covariates`` name first-phase columns; ``include_x2`` appends the
    second-phase covariate; ``interactions`` are pairs of names (``"x2"``
    allowed) whose product is appended in order.
    """

    covariates: tuple = ("x1_1", "x1_2")
    include_x2: bool = True
    interactions: tuple = (("x2", "x1_2"),)

    def names(self) -> tuple:
        out = ["(Intercept)", *self.covariates]
        if self.include_x2:
            out.append("x2")
        out += [f"{a}:{b}" for a, b in self.interactions]
        return tuple(out)

    @property
    def n_coef(self) -> int:
        return len(self.names())

    def check(self, dataset) -> None:
        for name in self.covariates:
            if not dataset.has_column(name):
                raise KeyError(f"model covariate {name!r} not in dataset")
        for pair in self.interactions:
            for name in pair:
                if name != "x2" and not dataset.has_column(name):
                    raise KeyError(f"interaction term {name!r} not in dataset")

    def design(self, dataset, x2: np.ndarray, rows=None) -> np.ndarray:
        """Design matrix using ``x2`` (full-length) for the second-phase column."""
        idx = slice(None) if rows is None else rows

        def col(name):
            return (x2 if name == "x2" else dataset.column(name))[idx]

        cols = [np.ones(dataset.n)[idx]]
        cols += [col(c) for c in self.covariates]
        if self.include_x2:
            cols.append(x2[idx])
        cols += [col(a) * col(b) for a, b in self.interactions]
        return np.column_stack(cols)


def score_at(beta, design_rows, y, weights, n_scale) -> np.ndarray:
    p = expit(design_rows @ beta)
    return design_rows.T @ (weights * (y - p)) / n_scale


def loglik(beta, design_rows, y, weights, n_scale=1.0) -> float:
    """Weighted Bernoulli log-likelihood divided by ``n_scale``."""
    eta = design_rows @ beta
    return float(np.sum(weights * (y * log_expit(eta) + (1 - y) * log_expit(-eta))) / n_scale)


def information(design_rows, p, weights, n_scale) -> np.ndarray:
    """-dU/dbeta = N^-1 sum w p (1-p) x x^T."""
    return (design_rows * (weights * p * (1 - p))[:, None]).T @ design_rows / n_scale


def check_rank(design_rows, names=()) -> None:
    """Raise RankDeficientError if the column-scaled design is ill-conditioned."""
    scale = np.abs(design_rows).max(axis=0)
    if np.any(scale == 0):
        bad = [j for j in np.flatnonzero(scale == 0)]
        raise RankDeficientError("all-zero design column(s)", _name(bad, names))
    xs = design_rows / scale
    sv, vt = linalg.svd(xs, full_matrices=False)[1:]
    if sv[-1] == 0 or (sv[0] / sv[-1]) ** 2 > MAX_CONDITION:
        null = vt[-1]
        bad = [j for j in np.flatnonzero(np.abs(null) > 1e-3 * np.abs(null).max())]
        raise RankDeficientError(
            f"design is rank deficient; collinear columns {_name(bad, names)}", _name(bad, names)
        )


def _name(idx, names):
    return [names[j] if j < len(names) else f"col{j}" for j in idx]


def fit(design_rows, y, weights, n_scale=None, *, tol=1e-10, max_iter=50,
        beta_bound=30.0, names=(), check=True, allow_negative=False) -> LogisticFit:
    """Solve the weighted score equation.

    Convergence is declared when max|U(beta)| <= tol * (sum(w) / n_scale),
    i.e. relative to the weighted mean scale of the score.

    ``allow_negative`` admits a few negative weights (linear calibration can
    produce them); the fit still needs a positive-definite information matrix
    and a positive weight total.
    """
    X = np.asarray(design_rows, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(weights, dtype=float)
    n, k = X.shape
    if n_scale is None:
        n_scale = float(w.sum())
    if n < k:
        raise DataError(f"{n} units for {k} coefficients")
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite value in design matrix")
    if not np.all(np.isfinite(w)):
        raise DataError("non-finite weight")
    if allow_negative:
        if w.sum() <= 0:
            raise DataError("weights must have a positive total")
    elif not np.all(w > 0):
        raise DataError("weights must be positive")
    ybar = float(np.sum(w * y) / np.sum(w))
    if ybar <= 0 or ybar >= 1:
        raise DataError("both outcome classes must be present")
    if check:
        check_rank(X, names)

    beta = np.zeros(k)
    beta[0] = np.clip(logit(ybar), -5, 5)
    threshold = tol * float(w.sum()) / n_scale

    def deviance(b):
        return -2 * loglik(b, X, y, w)

    dev = deviance(beta)
    path = [dev]
    p = expit(X @ beta)
    U = X.T @ (w * (y - p)) / n_scale
    it = 0
    while np.max(np.abs(U)) > threshold:
        if it >= max_iter:
            raise ConvergenceError(
                f"no convergence after {max_iter} iterations (max|score|={np.max(np.abs(U)):.3g})",
                last=beta, max_score=float(np.max(np.abs(U))),
            )
        it += 1
        info = information(X, p, w, n_scale)
        try:
            step = linalg.solve(info, U, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            raise RankDeficientError("information matrix is singular", names) from None
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            dev_c = deviance(cand)
            if dev_c <= dev * (1 + 1e-15) + 1e-300:
                break
            t *= 0.5
        else:
            # deviance flat to machine precision along the Newton direction
            cand = beta + step
            dev_c = deviance(cand)
        beta, dev = cand, dev_c
        path.append(dev)
        if np.max(np.abs(beta)) > beta_bound:
            raise SeparationError(
                f"|beta| exceeded {beta_bound}; outcome appears separated by the covariates"
            )
        p = expit(X @ beta)
        U = X.T @ (w * (y - p)) / n_scale

    # one undamped step from inside the tolerance costs little and takes the
    # score down to rounding level, which the exact identities downstream need
    try:
        polish = beta + linalg.solve(information(X, p, w, n_scale), U, assume_a="pos")
        p_pol = expit(X @ polish)
        U_pol = X.T @ (w * (y - p_pol)) / n_scale
        if np.max(np.abs(U_pol)) < np.max(np.abs(U)):
            beta, p, U = polish, p_pol, U_pol
    except (linalg.LinAlgError, ValueError):
        pass
    if np.all(np.abs(y - p) < 1e-6):
        raise SeparationError("fitted probabilities reproduce every outcome; the data are separated")

    jac = -information(X, p, w, n_scale)
    infl = _influence(X, y, p, w, jac, n_scale)
    return LogisticFit(
        beta=beta,
        score_jacobian=jac,
        fitted_p=p,
        influence=infl,
        converged=True,
        iterations=it,
        max_score=float(np.max(np.abs(U))),
        design=X,
        y=y,
        weights=w,
        n_scale=float(n_scale),
        names=tuple(names),
        deviance_path=tuple(path),
    )


def _influence(X, y, p, w, jac, n_scale):
    s = (y - p)[:, None] * X
    try:
        cho = linalg.cho_factor(-jac)
    except linalg.LinAlgError:
        raise RankDeficientError("score Jacobian is singular") from None
    # d(beta_hat)/d(w_i) = -U_beta^{-1} s_i / N
    return linalg.cho_solve(cho, s.T).T / n_scale


def influence(fit_: LogisticFit, weights=None, n_scale=None) -> np.ndarray:
    """Per-unit influence d(beta_hat)/d(w_i) at the fit.

    With new ``weights``/``n_scale`` the Jacobian is re-evaluated at the
    same coefficients.
    """
    if weights is None and n_scale is None:
        return fit_.influence
    w = fit_.weights if weights is None else np.asarray(weights, dtype=float)
    n_scale = fit_.n_scale if n_scale is None else n_scale
    jac = -information(fit_.design, fit_.fitted_p, w, n_scale)
    return _influence(fit_.design, fit_.y, fit_.fitted_p, w, jac, n_scale)
