"""Finite-population generation and two-phase PPS cluster sampling.

Population layout: units are sorted by z1 and cut into ``n_stage1``
stage-1 clusters, each cut into ``n_stage2`` stage-2 clusters of equal
size. Sorting on z1 makes the measures of size sum(exp(c * z1)) differ
between clusters, which is what produces unequal first-phase weights.

First phase (one cycle): ``a1`` PPS-with-replacement draws of stage-1
clusters, ``a2`` PPS-WR draws of stage-2 clusters inside each, then a
simple random sample of units inside each drawn stage-2 cluster. Each
stage-1 draw is its own PSU. Weights are Hansen-Hurwitz expansion factors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .datamodel import DesignType, Phase2StrataRule, TwoPhaseDataset, combine_cycles
from .errors import DesignError

BETA_TRUE = (-3.0, 0.7, 0.9, 0.5, 0.3)
COEF_NAMES = ("b0", "b11", "b12", "b2", "b22")
PREDICTOR_COLUMNS = {"X2*": "x2_star", "X2**": "x2_2star", "X2***": "x2_3star"}


def rho_z2_for(rho_x11_x2: float, eps_sd: float = 0.5) -> float:
    """rho(X11, Z2) giving the requested population rho(X11, X2).

    corr(X11, X2) = 1.5 rho / sqrt(0.25 + 2.25 + eps_sd^2).
    """
    return rho_x11_x2 * np.sqrt(2.5 + eps_sd**2) / 1.5


def replicate_seed(base_seed: int, index: int) -> np.random.SeedSequence:
    """Seed stream for replicate ``index``: SeedSequence(base_seed, spawn_key=(index,))."""
    return np.random.SeedSequence(base_seed, spawn_key=(int(index),))


@dataclass(frozen=True)
class FpConfig:
    n: int = 200_000
    rho_x11_z2: float = rho_z2_for(0.09)
    eps_sd: float = 0.5
    beta_true: tuple = BETA_TRUE
    n_stage1: int = 400
    n_stage2: int = 10
    mos_coefficient: float = 0.2
    seed: int = 20231101

    @property
    def units_per_stage2(self) -> int:
        return self.n // (self.n_stage1 * self.n_stage2)

    def check(self):
        if self.n_stage1 < 1 or self.n_stage2 < 1 or self.n % (self.n_stage1 * self.n_stage2):
            raise DesignError(
                f"cluster geometry {self.n_stage1} x {self.n_stage2} does not divide N={self.n}"
            )
        if not 0 <= self.rho_x11_z2 < 1:
            raise DesignError("rho_x11_z2 must lie in [0, 1)")
        if len(self.beta_true) != 5:
            raise DesignError("beta_true needs 5 entries (b0, b11, b12, b2, b22)")


@dataclass(frozen=True, eq=False)
class FinitePopulation:
    config: FpConfig
    x11: np.ndarray
    x12: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    eps: np.ndarray
    x2: np.ndarray
    x2_star: np.ndarray
    x2_2star: np.ndarray
    x2_3star: np.ndarray
    z2_tilde: np.ndarray
    y: np.ndarray
    stage1: np.ndarray
    stage2: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return len(self.y)

    def predictor(self, label: str) -> np.ndarray:
        return getattr(self, PREDICTOR_COLUMNS[label])

    def totals(self) -> np.ndarray:
        """Population totals of (1, x1_1, x1_2, z_1, z_2)."""
        return np.array([self.n, self.x11.sum(), self.x12.sum(), self.z1.sum(), self.z2.sum()])

    def layout(self):
        """Member index arrays and measures of size for the cluster hierarchy."""
        if "layout" not in self._cache:
            cfg = self.config
            order = np.argsort(self.stage2, kind="stable")
            M = cfg.units_per_stage2
            members = order.reshape(cfg.n_stage1 * cfg.n_stage2, M)
            mos_unit = np.exp(cfg.mos_coefficient * self.z1)
            mos2 = mos_unit[members].sum(axis=1)
            mos1 = mos2.reshape(cfg.n_stage1, cfg.n_stage2).sum(axis=1)
            self._cache["layout"] = (members, mos2, mos1)
        return self._cache["layout"]

    def census_beta(self) -> np.ndarray:
        """Unweighted logistic fit on the whole population (the design-based target)."""
        if "census" not in self._cache:
            from . import wlogit

            X = np.column_stack([np.ones(self.n), self.x11, self.x12, self.x2, self.x2 * self.x12])
            self._cache["census"] = wlogit.fit(X, self.y, np.ones(self.n), check=False).beta
        return self._cache["census"]


def generate_fp(config: FpConfig = FpConfig()) -> FinitePopulation:
    config.check()
    rng = np.random.default_rng(config.seed)
    n = config.n
    z1 = rng.standard_normal(n)
    r = config.rho_x11_z2
    x11 = rng.standard_normal(n)
    z2 = r * x11 + np.sqrt(1 - r * r) * rng.standard_normal(n)
    x12 = (rng.random(n) < 0.3).astype(float)
    eps = rng.normal(0.0, config.eps_sd, n)
    x2 = 1 + 0.5 * z1 + 1.5 * z2 + eps
    q40, q60 = np.quantile(z2, [0.4, 0.6])
    z2_tilde = 1.0 + (z2 > q40) + (z2 > q60)
    b0, b11, b12, b2, b22 = config.beta_true
    p = expit(b0 + b11 * x11 + b12 * x12 + b2 * x2 + b22 * x2 * x12)
    y = (rng.random(n) < p).astype(float)

    rank = np.empty(n, dtype=np.int64)
    rank[np.argsort(z1, kind="stable")] = np.arange(n)
    M = config.units_per_stage2
    stage2 = rank // M
    stage1 = stage2 // config.n_stage2
    return FinitePopulation(
        config=config,
        x11=x11, x12=x12, z1=z1, z2=z2, eps=eps, x2=x2,
        x2_star=1 + 0.5 * z1 + 1.5 * z2,
        x2_2star=-1.9 + 0.5 * z1 + 1.45 * z2_tilde,
        x2_3star=1 + 0.5 * z1,
        z2_tilde=z2_tilde, y=y, stage1=stage1, stage2=stage2,
    )


@dataclass(frozen=True)
class SamplingPlan:
    a1: int = 50
    a2: int = 2


def _first_phase(fp: FinitePopulation, n: int, rng, plan: SamplingPlan):
    """One cycle's cluster sample: (fp_index, psu_draw, weight), duplicates merged within PSU."""
    cfg = fp.config
    members, mos2, mos1 = fp.layout()
    M = cfg.units_per_stage2
    draws = plan.a1 * plan.a2
    if n < draws:
        raise DesignError(f"sample size {n} smaller than the {draws} stage-2 draws")
    base, extra = divmod(n, draws)
    if base + (extra > 0) > M:
        raise DesignError(f"sample size {n} needs more than {M} units per stage-2 cluster")
    p1 = mos1 / mos1.sum()
    g = rng.choice(cfg.n_stage1, size=plan.a1, replace=True, p=p1)
    idx, psu, wt = [], [], []
    slot = 0
    for d, cluster in enumerate(g):
        ssu = cluster * cfg.n_stage2 + np.arange(cfg.n_stage2)
        p2 = mos2[ssu] / mos2[ssu].sum()
        picks = rng.choice(cfg.n_stage2, size=plan.a2, replace=True, p=p2)
        for k in picks:
            m = base + (slot < extra)
            slot += 1
            units = members[ssu[k], rng.permutation(M)[:m]]
            w = 1.0 / (plan.a1 * p1[cluster]) / (plan.a2 * p2[k]) * (M / m)
            idx.append(units)
            psu.append(np.full(m, d))
            wt.append(np.full(m, w))
    idx = np.concatenate(idx)
    psu = np.concatenate(psu)
    wt = np.concatenate(wt)
    # a unit drawn twice inside one PSU draw enters once with the summed weight
    key = psu.astype(np.int64) * fp.n + idx
    uniq, inv = np.unique(key, return_inverse=True)
    wsum = np.bincount(inv.ravel(), weights=wt, minlength=len(uniq))
    return uniq % fp.n, uniq // fp.n, wsum


def _dataset(fp, idx, psu, w1, in_s2, w2, stratum="1", cycle=None, prefix=""):
    n = len(idx)
    return TwoPhaseDataset(
        unit_id=[f"{prefix}d{d:03d}u{i}" for d, i in zip(psu, idx)],
        stratum=np.full(n, stratum),
        psu=[f"{d + 1:03d}" for d in psu],
        cycle=None if cycle is None else np.full(n, cycle),
        w1=w1,
        in_s2=in_s2,
        w2=w2,
        y=fp.y[idx],
        x1=np.column_stack([fp.x11[idx], fp.x12[idx]]),
        x2=np.where(in_s2, fp.x2[idx], np.nan),
        z=np.column_stack([fp.z1[idx], fp.z2[idx]]),
        x1_names=("x1_1", "x1_2"),
        z_names=("z_1", "z_2"),
        aux={
            "x2_oracle": fp.x2[idx],
            "x2_star": fp.x2_star[idx],
            "x2_2star": fp.x2_2star[idx],
            "x2_3star": fp.x2_3star[idx],
        },
        design_type=DesignType.TYPE_I,
        phase2_strata_rule=Phase2StrataRule.PHASE1_PSU_AS_STRATUM,
        fp_size=fp.n,
    )


def sample_type1(fp: FinitePopulation, n1: int, f2: float, seed, plan: SamplingPlan = SamplingPlan(),
                 phase2: str = "within_psu") -> TwoPhaseDataset:
    """Type I two-phase sample.

    Phase 2 is a simple random sample without replacement inside each
    phase-1 PSU (``phase2="within_psu"``) taking round(f2 * n_psu) units
    (at least one), or a single SRS of s1 (``phase2="srs"``); w2 is the
    inverse realised sampling fraction.
    """
    if not 0 < f2 <= 1:
        raise DesignError("f2 must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    idx, psu, w1 = _first_phase(fp, n1, rng, plan)
    n = len(idx)
    in_s2 = np.zeros(n, dtype=bool)
    w2 = np.full(n, np.nan)
    if phase2 == "within_psu":
        groups = [np.flatnonzero(psu == d) for d in np.unique(psu)]
    elif phase2 == "srs":
        groups = [np.arange(n)]
    else:
        raise ValueError(f"unknown phase-2 mechanism {phase2!r}")
    for rows in groups:
        k = max(1, int(np.floor(f2 * len(rows) + 0.5)))
        chosen = rows[rng.permutation(len(rows))[:k]]
        in_s2[chosen] = True
        w2[chosen] = len(rows) / k
    return _dataset(fp, idx, psu, w1, in_s2, w2)


def sample_type2(fp: FinitePopulation, C: int, B: int, n_per_cycle: int, seed,
                 plan: SamplingPlan = SamplingPlan()) -> TwoPhaseDataset:
    """Type II sample: C independent cycle samples, the first B carry x2."""
    if not C >= B >= 1:
        raise DesignError("need C >= B >= 1")
    rng = np.random.default_rng(seed)
    cycles = []
    for c in range(1, C + 1):
        idx, psu, wc = _first_phase(fp, n_per_cycle, rng, plan)
        n = len(idx)
        ds = _dataset(fp, idx, psu, wc, np.zeros(n, dtype=bool), np.full(n, np.nan))
        ds = ds._replace(x2=fp.x2[idx])
        cycles.append((str(c), ds))
    return combine_cycles(cycles, C, [str(c) for c in range(1, B + 1)])


def fp_dataset(fp: FinitePopulation) -> TwoPhaseDataset:
    """The whole population as a dataset (weights 1, x2 observed everywhere)."""
    n = fp.n
    idx = np.arange(n)
    ds = _dataset(fp, idx, fp.stage1, np.ones(n), np.ones(n, dtype=bool), np.ones(n))
    return ds


def with_fp_overrides(config: FpConfig, **overrides) -> FpConfig:
    return replace(config, **overrides)
