import numpy as np
import pytest
from scipy.special import expit

from twophase import simgen
from twophase.datamodel import TwoPhaseDataset

TRUE_BETA = np.array([-1.0, 0.7, 0.9, 0.5, 0.3])


def make_dataset(seed=0, n_strata=3, n_psu=4, per_psu=30, f2=0.5, fp_size=None):
    """Small stratified two-phase sample with the simulation's covariate layout.

    Phase 2 is SRS without replacement inside each PSU, so w2 = n_psu / k.
    ``x2_oracle`` and ``x2_star`` are kept as aux columns.
    """
    rng = np.random.default_rng(seed)
    n = n_strata * n_psu * per_psu
    stratum = np.repeat([f"h{h}" for h in range(n_strata)], n_psu * per_psu)
    psu = np.tile(np.repeat([f"p{j}" for j in range(n_psu)], per_psu), n_strata)
    x11 = rng.normal(size=n)
    x12 = (rng.random(n) < 0.3).astype(float)
    z1, z2 = rng.normal(size=(2, n))
    x2 = 1 + 0.5 * z1 + 1.5 * z2 + rng.normal(scale=0.5, size=n)
    eta = TRUE_BETA @ np.vstack([np.ones(n), x11, x12, x2, x2 * x12])
    y = (rng.random(n) < expit(eta)).astype(float)
    w1 = rng.uniform(5, 20, size=n)
    in_s2 = np.zeros(n, dtype=bool)
    w2 = np.full(n, np.nan)
    k = max(1, int(round(f2 * per_psu)))
    for start in range(0, n, per_psu):
        pick = start + rng.choice(per_psu, size=k, replace=False)
        in_s2[pick] = True
        w2[pick] = per_psu / k
    return TwoPhaseDataset(
        unit_id=[f"u{i:04d}" for i in range(n)],
        stratum=stratum,
        psu=psu,
        w1=w1,
        in_s2=in_s2,
        w2=w2,
        y=y,
        x1=np.column_stack([x11, x12]),
        x2=np.where(in_s2, x2, np.nan),
        z=np.column_stack([z1, z2]),
        aux={"x2_oracle": x2, "x2_star": 1 + 0.5 * z1 + 1.5 * z2},
        fp_size=fp_size,
    )


@pytest.fixture
def dataset():
    return make_dataset()


# Small population and design used wherever the real sampler is exercised
# without paying for desk-scale sizes.
TINY_FP = simgen.FpConfig(n=20_000, n_stage1=100, n_stage2=10, seed=11)
TINY_PLAN = simgen.SamplingPlan(a1=20, a2=2)


@pytest.fixture(scope="session")
def tiny_fp():
    return simgen.generate_fp(TINY_FP)


# -- acceptance reporting ------------------------------------------------------------

ACCEPTANCE_LINES = []


def record(criterion, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: s.split()[1]):
            terminalreporter.write_line(line)
