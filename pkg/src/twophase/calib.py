"""Calibration of second-phase weights.

Finds eta with  N^-1 { sum_{s2} F(v_i' eta) w_i v_i - target } = 0, where the
target is either the s1-weighted total sum_{s1} w1_i v_i or a vector of
known population totals. Chi-square distance gives F(u) = 1 + u and a
closed-form eta; the exponential (raking) distance F(u) = exp(u) is solved
by Newton iteration.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import linalg

from .errors import CalibrationError, ConvergenceError

MAX_CONDITION = 1e12


class Distance(str, Enum):
    CHISQ = "chisq"
    EXPONENTIAL = "exp"

    def factor(self, u):
        return 1.0 + u if self is Distance.CHISQ else np.exp(u)

    def factor_derivative(self, u):
        return np.ones_like(u) if self is Distance.CHISQ else np.exp(u)


@dataclass(frozen=True, eq=False)
class CalibrationProblem:
    v_s2: np.ndarray
    w: np.ndarray
    target: np.ndarray
    n_scale: float
    distance: Distance = Distance.CHISQ

    @classmethod
    def two_phase(cls, v_s1, in_s2, w1, w, n_scale, distance=Distance.CHISQ):
        """Calibrate s2 (combined weights ``w``) to the w1-weighted s1 totals.

        ``w`` may be full-length (NaN outside s2) or already restricted to s2.
        """
        v_s1 = np.asarray(v_s1, dtype=float)
        if v_s1.ndim == 1:
            v_s1 = v_s1[:, None]
        in_s2 = np.asarray(in_s2, dtype=bool)
        w = np.asarray(w, dtype=float)
        if len(w) == len(in_s2):
            w = w[in_s2]
        target = np.asarray(w1, dtype=float) @ v_s1
        return cls(v_s1[in_s2], w, target, float(n_scale), Distance(distance))

    @classmethod
    def to_totals(cls, v_s2, w, totals, n_scale, distance=Distance.CHISQ):
        v_s2 = np.asarray(v_s2, dtype=float)
        if v_s2.ndim == 1:
            v_s2 = v_s2[:, None]
        return cls(v_s2, np.asarray(w, dtype=float), np.asarray(totals, dtype=float),
                   float(n_scale), Distance(distance))

    @property
    def k(self) -> int:
        return self.v_s2.shape[1]

    def residual(self, eta) -> np.ndarray:
        """Q(eta)."""
        F = self.distance.factor(self.v_s2 @ eta)
        return ((F * self.w) @ self.v_s2 - self.target) / self.n_scale

    def residual_tolerance(self) -> float:
        return 1e-8 * (1.0 + np.max(np.abs(self.target)) / self.n_scale)


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    eta: np.ndarray
    factors: np.ndarray
    calibrated_weights: np.ndarray
    constraint_residual: float
    negative_weight_count: int
    solver_iterations: int
    floored: int = 0


def _scaled(problem):
    scale = np.abs(problem.v_s2).max(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return problem.v_s2 / scale, problem.target / scale, scale


def _check_gram(gram, scale):
    sv, vecs = linalg.eigh(gram)
    if sv[0] <= 0 or sv[-1] / sv[0] > MAX_CONDITION:
        direction = vecs[:, 0] / scale
        direction /= np.abs(direction).max()
        raise CalibrationError(
            "calibration Gram matrix is singular or ill-conditioned "
            f"(condition {sv[-1] / max(sv[0], 1e-300):.3g}); "
            f"offending auxiliary direction {np.round(direction, 6).tolist()}"
        )


def _result(problem, eta, iterations, floor):
    F = problem.distance.factor(problem.v_s2 @ eta)
    floored = 0
    if floor is not None:
        floored = int(np.sum(F < floor))
        F = np.maximum(F, floor)
    wt = F * problem.w
    resid = float(np.max(np.abs((wt @ problem.v_s2 - problem.target) / problem.n_scale)))
    return CalibrationResult(
        eta=eta,
        factors=F,
        calibrated_weights=wt,
        constraint_residual=resid,
        negative_weight_count=int(np.sum(wt < 0)),
        solver_iterations=iterations,
        floored=floored,
    )


def _precheck(problem):
    n2, k = problem.v_s2.shape
    if k < 1:
        raise CalibrationError("need at least one auxiliary variable")
    if n2 == 0:
        raise CalibrationError("empty second phase")
    if k > n2:
        raise CalibrationError(f"{k} auxiliaries but only {n2} second-phase units")
    if not np.all(np.isfinite(problem.v_s2)):
        raise CalibrationError("non-finite auxiliary value")


def solve_chisq(problem: CalibrationProblem, floor=None) -> CalibrationResult:
    """Closed-form chi-square calibration.

    eta solves G eta = target - sum_{s2} w v with G = sum_{s2} w v v'.
    Columns are rescaled to unit max-abs first; factors are invariant to
    that rescaling. ``floor`` clips factors from below (breaks the
    constraint, reported through ``constraint_residual``).
    """
    _precheck(problem)
    v, target, scale = _scaled(problem)
    gram = (v * problem.w[:, None]).T @ v
    _check_gram(gram, scale)
    eta_s = linalg.solve(gram, target - problem.w @ v, assume_a="pos")
    return _result(problem, eta_s / scale, 0, floor)


def solve_newton(problem: CalibrationProblem, *, tol=1e-10, max_iter=100, floor=None) -> CalibrationResult:
    """Newton solve of Q(eta) = 0 for any supported distance, starting at 0."""
    _precheck(problem)
    v, target, scale = _scaled(problem)
    w = problem.w
    dist = problem.distance
    N = problem.n_scale
    _check_gram((v * w[:, None]).T @ v, scale)

    def Q(e):
        return ((dist.factor(v @ e) * w) @ v - target) / N

    threshold = tol * (1.0 + np.max(np.abs(target)) / N)
    eta = np.zeros(problem.k)
    q = Q(eta)
    it = 0
    while np.max(np.abs(q)) > threshold:
        if it >= max_iter:
            raise ConvergenceError(
                f"calibration did not converge in {max_iter} iterations",
                last=eta / scale, max_score=float(np.max(np.abs(q))),
            )
        it += 1
        jac = (v * (dist.factor_derivative(v @ eta) * w)[:, None]).T @ v / N
        try:
            step = linalg.solve(jac, -q, assume_a="pos")
        except linalg.LinAlgError:
            raise CalibrationError("singular calibration Jacobian") from None
        t, norm0 = 1.0, np.linalg.norm(q)
        for _ in range(50):
            cand = eta + t * step
            qc = Q(cand)
            if np.all(np.isfinite(qc)) and np.linalg.norm(qc) < norm0:
                break
            t *= 0.5
        else:
            raise CalibrationError("calibration line search failed; targets may be unreachable")
        eta, q = cand, qc
    return _result(problem, eta / scale, it, floor)


def solve(problem: CalibrationProblem, floor=None) -> CalibrationResult:
    if problem.distance is Distance.CHISQ:
        return solve_chisq(problem, floor=floor)
    return solve_newton(problem, floor=floor)


def linear_map_factor_invariance_check(problem: CalibrationProblem, M, atol=1e-9) -> bool:
    """True when chi-square factors from auxiliaries M v_i equal those from v_i."""
    M = np.asarray(M, dtype=float)
    mapped = CalibrationProblem(
        problem.v_s2 @ M.T, problem.w, M @ problem.target, problem.n_scale, Distance.CHISQ
    )
    base = solve_chisq(
        CalibrationProblem(problem.v_s2, problem.w, problem.target, problem.n_scale, Distance.CHISQ)
    )
    return bool(np.allclose(solve_chisq(mapped).factors, base.factors, rtol=0, atol=atol))
