import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg

from twophase.calib import (
    CalibrationProblem, Distance, linear_map_factor_invariance_check, solve, solve_chisq, solve_newton,
)
from twophase.errors import CalibrationError


def random_problem(seed, n1=40, n2=15, k=3, distance=Distance.CHISQ):
    rng = np.random.default_rng(seed)
    v = np.column_stack([np.ones(n1), rng.normal(size=(n1, k - 1))])
    in_s2 = np.zeros(n1, dtype=bool)
    in_s2[rng.choice(n1, n2, replace=False)] = True
    w1 = rng.uniform(1, 4, size=n1)
    w = w1[in_s2] * n1 / n2
    return CalibrationProblem.two_phase(v, in_s2, w1, w, w1.sum(), distance)


def toy3():
    v = np.array([[1.0, 0.5], [1.0, -1.0], [1.0, 2.0]])
    w = np.array([2.0, 3.0, 1.5])
    target = np.array([7.0, 1.2])
    return CalibrationProblem.to_totals(v, w, target, 10.0)


def grid_constrained_oracle(problem):
    """Minimize sum w (F-1)^2 / 2 over the feasible line of a 3-unit, 2-constraint problem."""
    A = (problem.v_s2 * problem.w[:, None]).T
    F0 = linalg.lstsq(A, problem.target)[0]
    d = linalg.null_space(A)[:, 0]

    def objective(t):
        F = F0 + t[:, None] * d
        return np.sum(problem.w * (F - 1) ** 2, axis=1) / 2

    center, half = 0.0, 50.0
    while half > 1e-13:
        t = np.linspace(center - half, center + half, 201)
        center = t[np.argmin(objective(t))]
        half *= 0.05
    F = F0 + center * d
    eta = linalg.lstsq(problem.v_s2, F - 1)[0]
    return F, eta


def test_toy_matches_constrained_optimum():
    p = toy3()
    res = solve_chisq(p)
    F, eta = grid_constrained_oracle(p)
    np.testing.assert_allclose(res.factors, F, atol=1e-8)
    np.testing.assert_allclose(res.eta, eta, atol=1e-8)
    assert res.constraint_residual <= p.residual_tolerance()


def test_constant_auxiliary_is_ratio_adjustment():
    p = random_problem(1, k=1)
    ratio = p.target[0] / p.w.sum()
    np.testing.assert_allclose(solve_chisq(p).factors, ratio, rtol=1e-12)
    # Newton stops at the 1e-10 residual tolerance
    expo = solve_newton(CalibrationProblem(p.v_s2, p.w, p.target, p.n_scale, Distance.EXPONENTIAL))
    np.testing.assert_allclose(expo.factors, ratio, rtol=1e-9)


def test_already_calibrated_gives_unit_factors():
    rng = np.random.default_rng(2)
    v = np.column_stack([np.ones(10), rng.normal(size=10)])
    w = rng.uniform(1, 2, size=10)
    res = solve_chisq(CalibrationProblem.to_totals(v, w, w @ v, 15.0))
    np.testing.assert_allclose(res.eta, 0, atol=1e-14)
    np.testing.assert_allclose(res.factors, 1, atol=1e-14)


def test_s2_equal_s1_gives_unit_factors():
    rng = np.random.default_rng(3)
    v = rng.normal(size=(25, 3))
    w1 = rng.uniform(1, 3, size=25)
    p = CalibrationProblem.two_phase(v, np.ones(25, bool), w1, w1, w1.sum())
    np.testing.assert_allclose(solve_chisq(p).factors, 1, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_newton_equals_closed_form_under_chisq(seed):
    p = random_problem(seed)
    a, b = solve_chisq(p), solve_newton(p)
    np.testing.assert_allclose(a.eta, b.eta, atol=1e-10)


def test_exponential_toy_positive_factors_and_exact_constraint():
    p = toy3()
    res = solve_newton(CalibrationProblem(p.v_s2, p.w, p.target, p.n_scale, Distance.EXPONENTIAL))
    assert np.all(res.factors > 0)
    assert res.constraint_residual <= 1e-10


def test_factor_invariance_identity_scale_and_random_maps():
    p = random_problem(4)
    assert linear_map_factor_invariance_check(p, np.eye(3))
    assert linear_map_factor_invariance_check(p, 2 * np.eye(3))
    rng = np.random.default_rng(5)
    for _ in range(20):
        M = rng.normal(size=(3, 3)) + 3 * np.eye(3)
        assert linear_map_factor_invariance_check(p, M)


def test_ill_conditioned_gram_is_reported():
    rng = np.random.default_rng(6)
    x = rng.normal(size=12)
    v = np.column_stack([np.ones(12), x, 2 * x + 1])
    with pytest.raises(CalibrationError, match="offending auxiliary direction"):
        solve_chisq(CalibrationProblem.to_totals(v, np.ones(12), [12.0, 0.0, 12.0], 12.0))


def test_more_auxiliaries_than_units():
    with pytest.raises(CalibrationError):
        solve(CalibrationProblem.to_totals(np.ones((2, 3)), np.ones(2), np.ones(3), 1.0))


def test_negative_weights_counted_and_floor():
    v = np.column_stack([np.ones(6), np.arange(6.0)])
    p = CalibrationProblem.to_totals(v, np.ones(6), [6.0, 40.0], 6.0)
    res = solve_chisq(p)
    assert res.negative_weight_count > 0
    floored = solve_chisq(p, floor=0.1)
    assert floored.floored == res.negative_weight_count
    assert np.all(floored.factors >= 0.1)
    assert floored.constraint_residual > res.constraint_residual


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000), k=st.integers(1, 4))
def test_constraint_satisfied(seed, k):
    p = random_problem(seed, k=k)
    for dist in Distance:
        prob = CalibrationProblem(p.v_s2, p.w, p.target, p.n_scale, dist)
        res = solve(prob)
        assert res.constraint_residual <= prob.residual_tolerance()
        if dist is Distance.EXPONENTIAL:
            assert np.all(res.factors > 0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000), n2=st.integers(3, 6))
def test_chisq_solution_minimizes_distance(seed, n2):
    rng = np.random.default_rng(seed)
    k = 2
    v = np.column_stack([np.ones(n2), rng.normal(size=n2)])
    w = rng.uniform(1, 3, size=n2)
    target = w @ v * rng.uniform(0.8, 1.2, size=k)
    p = CalibrationProblem.to_totals(v, w, target, 10.0)
    res = solve_chisq(p)
    null = linalg.null_space((v * w[:, None]).T)
    if null.size == 0:
        return
    base = np.sum(w * (res.factors - 1) ** 2) / 2
    for _ in range(20):
        F = res.factors + null @ rng.normal(scale=0.3, size=null.shape[1])
        assert np.sum(w * (F - 1) ** 2) / 2 >= base - 1e-12
