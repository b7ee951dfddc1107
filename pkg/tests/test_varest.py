import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from scipy.special import expit

from twophase import pipeline, simgen
from twophase.calib import Distance
from twophase.datamodel import TwoPhaseDataset, design_frame
from twophase.errors import DesignError
from twophase.pipeline import PredictorSpec
from twophase.varest import (
    StackedSystem, psu_total_covariance, t_multiplier, variance_direct, wald_ci,
)
from twophase.wlogit import ModelSpec, fit

from conftest import TINY_PLAN, make_dataset

MODEL = ModelSpec()
STAR = PredictorSpec.passthrough("x2_star")


def test_psu_total_covariance_matches_groupby_oracle():
    ds = make_dataset()
    frame = design_frame(ds)
    contrib = np.random.default_rng(0).normal(size=(ds.n, 3))
    df = pd.DataFrame(contrib, columns=list("abc"))
    df["h"], df["j"] = ds.stratum, ds.psu
    expected = np.zeros((3, 3))
    for _, g in df.groupby("h"):
        t = g.groupby("j")[["a", "b", "c"]].sum().to_numpy()
        d = t - t.mean(axis=0)
        expected += len(t) / (len(t) - 1) * d.T @ d
    np.testing.assert_allclose(psu_total_covariance(contrib, frame), expected, rtol=1e-12)


def test_single_psu_stratum_is_an_error():
    ds = make_dataset(n_psu=2)
    psu = np.where(ds.stratum == "h0", "p0", ds.psu)
    ds = ds._replace(psu=psu)
    with pytest.raises(DesignError, match="single PSU"):
        pipeline.estimate_direct_s2(ds, MODEL)


def test_srs_of_single_unit_psus_matches_classical_sandwich():
    rng = np.random.default_rng(1)
    n = 500
    x = rng.normal(size=n)
    X = np.column_stack([np.ones(n), x])
    y = (rng.random(n) < expit(-0.5 + x)).astype(float)
    w = np.full(n, 40.0)
    ds = TwoPhaseDataset(unit_id=[f"u{i:03d}" for i in range(n)], stratum=np.full(n, "1"),
                         psu=[f"p{i:03d}" for i in range(n)], w1=w, in_s2=np.ones(n, bool),
                         w2=np.ones(n), y=y, x1=x[:, None], x2=np.zeros(n))
    f = fit(X, y, w)
    V = variance_direct(f, ds, design_frame(ds)).covariance
    p = expit(X @ f.beta)
    info = (X * (w * p * (1 - p))[:, None]).T @ X
    meat = (X * ((w * (y - p)) ** 2)[:, None]).T @ X
    classical = np.linalg.inv(info) @ meat @ np.linalg.inv(info)
    np.testing.assert_allclose(np.diag(V), np.diag(classical), rtol=0.02)


def test_calibrated_reduces_to_direct_when_factors_are_one():
    ds = make_dataset()
    full = ds._replace(in_s2=np.ones(ds.n, bool), w2=np.ones(ds.n), x2=ds.aux["x2_oracle"])
    cal = pipeline.estimate_calib_influence(full, MODEL, STAR)
    direct = pipeline.estimate_direct_s2(full, MODEL)
    np.testing.assert_allclose(cal.diagnostics["factors"], 1.0, atol=1e-12)
    np.testing.assert_allclose(cal.covariance, direct.covariance, rtol=1e-9, atol=1e-14)


def _system(ds, kind):
    ds = ds.canonical()
    X = MODEL.design(ds, np.nan_to_num(ds.x2))
    if kind == "fixed_totals":
        V = np.column_stack([np.ones(ds.n), ds.x1, ds.z])
        totals = ds.w1 @ V * 1.03
        return StackedSystem(design=X, y=ds.y, w1=ds.w1, w=ds.w, in_s2=ds.in_s2, n_scale=ds.n_scale,
                             aux=V, totals=totals), V.shape[1], 0
    Xs = MODEL.design(ds, ds.aux["x2_star"])
    return StackedSystem(design=X, y=ds.y, w1=ds.w1, w=ds.w, in_s2=ds.in_s2, n_scale=ds.n_scale,
                         distance=Distance(kind), proxy_design=Xs,
                         beta_star_hat=np.zeros(5), stack_proxy=True), 5, 5


@pytest.mark.parametrize("kind", ["chisq", "exp", "fixed_totals"])
def test_stacked_jacobian_matches_finite_differences(kind):
    system, k, s = _system(make_dataset(), kind)
    rng = np.random.default_rng(2)
    theta = np.concatenate([[-1, 0.6, 0.8, 0.4, 0.2], rng.normal(scale=1e-3 if kind != "fixed_totals" else 1e-2,
                                                                  size=k), [-0.9, 0.5, 0.7, 0.5, 0.1][:s]])
    A = system.jacobian(theta)
    fd = np.empty_like(A)
    for j in range(len(theta)):
        h = 1e-6 * max(1.0, abs(theta[j]))
        e = np.zeros(len(theta))
        e[j] = h
        fd[:, j] = (system.stacked_totals(theta + e) - system.stacked_totals(theta - e)) / (2 * h)
    scale = np.abs(fd).max()
    assert np.max(np.abs(A - fd)) / scale <= 1e-5


def test_covariances_symmetric_psd():
    ds = make_dataset()
    for out in (pipeline.estimate_direct_s2(ds, MODEL), pipeline.estimate_calib_influence(ds, MODEL, STAR),
                pipeline.estimate_imputation(ds, MODEL, STAR)):
        V = out.covariance
        np.testing.assert_array_equal(V, V.T)
        assert np.linalg.eigvalsh(V).min() >= -1e-12 * np.trace(V)
        assert out.df == 3 * 4 - 3


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_within_psu_permutation_leaves_variance_bit_identical(seed):
    ds = make_dataset()
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(idx) for idx in np.split(np.arange(ds.n), ds.n // 30)])
    shuffled = ds.take(order)
    for run in (lambda d: pipeline.estimate_direct_s2(d, MODEL),
                lambda d: pipeline.estimate_calib_influence(d, MODEL, STAR)):
        a, b = run(ds), run(shuffled)
        np.testing.assert_array_equal(a.covariance, b.covariance)
        np.testing.assert_array_equal(a.beta, b.beta)


def test_t_multipliers():
    assert t_multiplier(10) == pytest.approx(2.228, abs=1e-3)
    assert t_multiplier(10) == pytest.approx(stats.t.isf(0.025, 10), rel=1e-12)
    assert t_multiplier(10**7) == pytest.approx(1.96, abs=1e-3)


def test_wald_ci():
    beta = np.array([0.5, -1.0])
    ci = wald_ci(beta, np.array([0.0, 0.04]), 10)
    np.testing.assert_array_equal(ci[0], [0.5, 0.5])
    np.testing.assert_allclose(ci[1], [-1 - 0.2 * t_multiplier(10), -1 + 0.2 * t_multiplier(10)])
    with pytest.raises(ValueError):
        wald_ci(beta, np.ones(2), 0)
    with pytest.raises(ValueError):
        wald_ci(beta, np.ones(2), 5, level=1.0)


def test_type2_frame_has_more_df_than_type1(tiny_fp):
    t1 = simgen.sample_type1(tiny_fp, 600, 1 / 3, 5, TINY_PLAN)
    t2 = simgen.sample_type2(tiny_fp, 3, 1, 200, 5, simgen.SamplingPlan(a1=20, a2=2))
    assert abs(t1.n - t2.n) <= 0.1 * t1.n
    assert design_frame(t2).df > design_frame(t1).df
