import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit, logit

from twophase.errors import ConvergenceError, DataError, RankDeficientError, SeparationError
from twophase.wlogit import ModelSpec, fit, influence, loglik, score_at

from conftest import make_dataset


def corpus(n=20, seed=3):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=n), rng.normal(size=n)])
    y = (rng.random(n) < expit(X @ [0.2, 0.8, -0.6])).astype(float)
    w = rng.uniform(0.5, 3.0, size=n)
    return X, y, w


def grid_oracle(X, y, w, lo=-6.0, hi=6.0, points=101, tol=1e-9):
    """Maximize the weighted log-likelihood of a 2-parameter model by zooming grids."""
    center = np.zeros(2)
    half = (hi - lo) / 2
    while half > tol:
        a = np.linspace(center[0] - half, center[0] + half, points)
        b = np.linspace(center[1] - half, center[1] + half, points)
        A, B = np.meshgrid(a, b, indexing="ij")
        eta = A[..., None] * X[:, 0] + B[..., None] * X[:, 1]
        ll = np.sum(w * (y * eta - np.logaddexp(0, eta)), axis=-1)
        i, j = np.unravel_index(np.argmax(ll), ll.shape)
        center = np.array([a[i], b[j]])
        half *= 4 / (points - 1)
    return center


def test_six_unit_grid_oracle():
    x = np.array([-1.0, 0.0, 1.0, 2.0, 0.5, -0.5])
    y = np.array([0, 1, 0, 1, 1, 0], dtype=float)
    w = np.array([1.0, 2.0, 1.5, 0.5, 1.0, 3.0])
    X = np.column_stack([np.ones(6), x])
    f = fit(X, y, w)
    np.testing.assert_allclose(f.beta, grid_oracle(X, y, w), atol=1e-6)


def test_intercept_only_truth_when_y_orthogonal_to_x():
    # within each outcome class the covariate sums to zero, so the slope score vanishes
    x = np.array([-1.0, 1.0, -2.0, 2.0, -1.0, 1.0, 3.0, -3.0])
    y = np.array([1, 1, 0, 0, 0, 0, 1, 1], dtype=float)
    X = np.column_stack([np.ones(8), x])
    f = fit(X, y, np.ones(8))
    np.testing.assert_allclose(f.beta, [logit(y.mean()), 0.0], atol=1e-8)


def test_score_zero_at_fit_and_at_beta_zero():
    X, y, w = corpus()
    f = fit(X, y, w, n_scale=50.0)
    assert np.max(np.abs(score_at(f.beta, X, y, w, 50.0))) <= 1e-10
    expected = X.T @ (w * (y - 0.5)) / 50.0
    np.testing.assert_allclose(score_at(np.zeros(3), X, y, w, 50.0), expected, rtol=1e-14)


def test_score_is_loglik_gradient():
    X, y, w = corpus()
    beta = np.array([0.1, -0.3, 0.4])
    h = 1e-6
    fd = np.array([(loglik(beta + h * e, X, y, w, 7.0) - loglik(beta - h * e, X, y, w, 7.0)) / (2 * h)
                   for e in np.eye(3)])
    np.testing.assert_allclose(score_at(beta, X, y, w, 7.0), fd, atol=1e-7)


def test_influence_matches_finite_difference():
    X, y, w = corpus()
    f = fit(X, y, w)
    worst = 0.0
    for i in range(len(y)):
        h = 1e-5 * w[i]
        wp, wm = w.copy(), w.copy()
        wp[i] += h
        wm[i] -= h
        fd = (fit(X, y, wp).beta - fit(X, y, wm).beta) / (2 * h)
        worst = max(worst, np.max(np.abs(f.influence[i] - fd)) / np.max(np.abs(f.influence[i])))
    assert worst <= 1e-4


def test_influence_proportional_to_score_contribution():
    X, y, w = corpus()
    f = fit(X, y, w, n_scale=40.0)
    M = np.linalg.inv(-f.score_jacobian) / 40.0
    np.testing.assert_allclose(f.influence, f.scores @ M.T, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(influence(f), f.influence)


def test_weighted_influence_sums_to_zero():
    X, y, w = corpus()
    f = fit(X, y, w)
    assert np.max(np.abs(w @ f.influence)) <= 1e-10


def test_duplicating_units_and_halving_weights():
    X, y, w = corpus()
    f = fit(X, y, w)
    g = fit(np.vstack([X, X]), np.concatenate([y, y]), np.concatenate([w, w]) / 2)
    np.testing.assert_allclose(g.beta, f.beta, atol=1e-10)
    np.testing.assert_allclose(g.influence[: len(y)], f.influence, rtol=1e-8)
    np.testing.assert_allclose(g.influence[len(y):], f.influence, rtol=1e-8)


def test_score_jacobian_symmetric_negative_definite():
    X, y, w = corpus()
    J = fit(X, y, w).score_jacobian
    np.testing.assert_allclose(J, J.T)
    assert np.all(np.linalg.eigvalsh(J) < 0)


def test_deviance_never_increases():
    X, y, w = corpus(n=60, seed=9)
    f = fit(X * 3, y, w)
    path = np.array(f.deviance_path)
    assert len(path) >= 3
    assert np.all(np.diff(path) <= 1e-12 * path[0])


def test_nonconvergence_reports_last_iterate():
    X, y, w = corpus()
    with pytest.raises(ConvergenceError) as info:
        fit(X, y, w, max_iter=1)
    assert info.value.last is not None and info.value.max_score > 0


def test_rank_deficient_design_names_columns():
    X, y, w = corpus()
    Xd = np.column_stack([X, 2 * X[:, 1]])
    with pytest.raises(RankDeficientError) as info:
        fit(Xd, y, w, names=("a", "b", "c", "b2"))
    assert set(info.value.columns) >= {"b", "b2"}


def test_separation_detected():
    x = np.array([-3.0, -2.0, -1.0, 1.0, 2.0, 3.0])
    y = (x > 0).astype(float)
    with pytest.raises(SeparationError):
        fit(np.column_stack([np.ones(6), x]), y, np.ones(6))


def test_input_errors():
    X, y, w = corpus()
    with pytest.raises(DataError, match="outcome"):
        fit(X, np.zeros_like(y), w)
    with pytest.raises(DataError, match="positive"):
        fit(X, y, -w)
    with pytest.raises(DataError):
        fit(X[:2], y[:2], w[:2])


def test_negative_weights_admitted_on_request():
    X, y, w = corpus(n=80)
    w2 = w.copy()
    w2[0] = -0.2
    f = fit(X, y, w2, allow_negative=True)
    assert np.max(np.abs(score_at(f.beta, X, y, w2, w2.sum()))) <= 1e-9


def test_model_spec_design():
    ds = make_dataset()
    spec = ModelSpec()
    assert spec.names() == ("(Intercept)", "x1_1", "x1_2", "x2", "x2:x1_2")
    x2 = ds.aux["x2_oracle"]
    X = spec.design(ds, x2)
    np.testing.assert_allclose(X[:, 4], x2 * ds.x1[:, 1])
    with pytest.raises(KeyError):
        ModelSpec(covariates=("nope",)).check(ds)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(0.01, 100.0))
def test_root_invariant_to_weight_scale(seed, c):
    X, y, w = corpus(n=40, seed=seed)
    f = fit(X, y, w)
    g = fit(X, y, c * w)
    np.testing.assert_allclose(g.beta, f.beta, atol=1e-10)
    np.testing.assert_allclose(g.influence * (c * w).sum(), f.influence * w.sum(), rtol=1e-7, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_weighted_influence_sum_zero_property(seed):
    X, y, w = corpus(n=40, seed=seed)
    f = fit(X, y, w, n_scale=1000.0)
    assert np.max(np.abs(w @ f.influence)) <= 1e-10
