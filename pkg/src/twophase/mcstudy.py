"""Monte Carlo replication of two-phase designs.

A study generates one finite population, draws R independent two-phase
samples (replicate r uses ``simgen.replicate_seed(seed, r)``), runs every
requested estimator on each sample and summarizes bias, empirical and
estimated variance, and MSE per method and coefficient.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd

from . import pipeline, simgen
from .calib import Distance
from .datamodel import DesignType
from .errors import EstimationError, StudyAbort
from .pipeline import PredictorSpec
from .wlogit import ModelSpec

log = logging.getLogger(__name__)

ALL_METHODS = (
    "Direct.s2", "Calib.FP", "Calib.X2*", "Calib.X2**", "Calib.X2***",
    "Direct.s1", "Imp.X2*", "Imp.X2**", "Imp.X2***",
)
MAX_FAILURE_RATE = 0.05
GAIN_DEFINITION = "EmpVar(Direct.s2) / EmpVar(method), per coefficient"
MODEL = ModelSpec(covariates=("x1_1", "x1_2"), include_x2=True, interactions=(("x2", "x1_2"),))
FP_AUX = ("x1_1", "x1_2", "z_1", "z_2")


@dataclass(frozen=True)
class StudyConfig:
    fp: simgen.FpConfig = field(default_factory=simgen.FpConfig)
    design: DesignType = DesignType.TYPE_I
    n1: int = 2000
    f2: float = 1 / 3
    C: int | None = None
    B: int = 1
    n_per_cycle: int | None = None
    replicates: int = 500
    methods: tuple = ALL_METHODS
    seed: int = 1
    a1: int = 50
    a2: int = 2
    phase2: str = "within_psu"
    regenerate_fp: bool = False
    stack_proxy: bool = True
    variance: bool = True
    bias_target: str = "truth"
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "design", DesignType(self.design))
        object.__setattr__(self, "methods", tuple(self.methods))

    def check(self):
        if self.replicates < 2:
            raise ValueError("need at least 2 replicates")
        if not self.methods:
            raise ValueError("no methods requested")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown method(s): {unknown}")
        if self.bias_target not in ("truth", "census"):
            raise ValueError("bias_target must be 'truth' or 'census'")
        self.fp.check()

    def cycles(self):
        """(C, B, n per cycle) for Type II; C defaults to round(1/f2)."""
        C = self.C if self.C is not None else int(round(1 / self.f2))
        n = self.n_per_cycle if self.n_per_cycle is not None else self.n1 // C
        return C, self.B, n

    def to_dict(self) -> dict:
        d = asdict(self)
        d["design"] = self.design.value
        d["methods"] = list(self.methods)
        d["fp"]["beta_true"] = list(self.fp.beta_true)
        d.pop("threads")
        return d


# -- method registry ----------------------------------------------------------

def _calib(label):
    spec = PredictorSpec.passthrough(simgen.PREDICTOR_COLUMNS[label])

    def run(ds, fp, cfg):
        return pipeline.estimate_calib_influence(ds, MODEL, spec, Distance.CHISQ,
                                                 stack_proxy=cfg.stack_proxy, variance=cfg.variance)
    return run


def _imp(label):
    spec = PredictorSpec.passthrough(simgen.PREDICTOR_COLUMNS[label])

    def run(ds, fp, cfg):
        return pipeline.estimate_imputation(ds, MODEL, spec, variance=cfg.variance)
    return run


METHODS = {
    "Direct.s2": lambda ds, fp, cfg: pipeline.estimate_direct_s2(ds, MODEL, variance=cfg.variance),
    "Calib.FP": lambda ds, fp, cfg: pipeline.estimate_calib_fp(
        ds, MODEL, FP_AUX, fp.totals(), variance=cfg.variance),
    "Direct.s1": lambda ds, fp, cfg: pipeline.estimate_direct_s1(ds, MODEL, variance=cfg.variance),
    **{f"Calib.{k}": _calib(k) for k in simgen.PREDICTOR_COLUMNS},
    **{f"Imp.{k}": _imp(k) for k in simgen.PREDICTOR_COLUMNS},
}


# -- replicate execution ----------------------------------------------------------

_WORKER = {}


def draw_sample(fp, cfg: StudyConfig, seed):
    plan = simgen.SamplingPlan(cfg.a1, cfg.a2)
    if cfg.design is DesignType.TYPE_I:
        return simgen.sample_type1(fp, cfg.n1, cfg.f2, seed, plan, cfg.phase2)
    C, B, n = cfg.cycles()
    return simgen.sample_type2(fp, C, B, n, seed, plan)


def _population(cfg: StudyConfig, index=None):
    if index is None or not cfg.regenerate_fp:
        key = ("fp", cfg.fp)
        if _WORKER.get("key") != key:
            _WORKER["key"] = key
            _WORKER["fp"] = simgen.generate_fp(cfg.fp)
        return _WORKER["fp"]
    seed = int(simgen.replicate_seed(cfg.fp.seed, index).generate_state(1)[0])
    return simgen.generate_fp(replace(cfg.fp, seed=seed))


def run_replicate(cfg: StudyConfig, index: int):
    """Estimates and variances, shape (methods, coefficients); NaN rows mark failures."""
    fp = _population(cfg, index)
    ds = draw_sample(fp, cfg, simgen.replicate_seed(cfg.seed, index))
    p = MODEL.n_coef
    est = np.full((len(cfg.methods), p), np.nan)
    var = np.full((len(cfg.methods), p), np.nan)
    errors = {}
    for j, label in enumerate(cfg.methods):
        try:
            out = METHODS[label](ds, fp, cfg)
        except EstimationError as exc:
            errors[label] = f"{type(exc).__name__}: {exc}"
            continue
        est[j] = out.beta
        var[j] = out.variance
    truth = fp.census_beta() if cfg.bias_target == "census" and cfg.regenerate_fp else None
    return est, var, errors, truth


def _run_chunk(args):
    cfg, indices = args
    return [run_replicate(cfg, i) for i in indices]


def run_replicates(cfg: StudyConfig):
    R = cfg.replicates
    threads = max(1, int(cfg.threads or 1))
    if threads == 1:
        results = [run_replicate(cfg, i) for i in range(R)]
    else:
        chunks = [list(range(i, R, threads)) for i in range(threads)]
        with ProcessPoolExecutor(threads) as pool:
            parts = list(pool.map(_run_chunk, [(cfg, c) for c in chunks]))
        by_index = {}
        for chunk, part in zip(chunks, parts):
            by_index.update(zip(chunk, part))
        results = [by_index[i] for i in range(R)]
    return results


# -- summaries -------------------------------------------------------------

def summarize(estimates, beta_true, analytic_variances=None) -> dict:
    """Per-coefficient summary over replicates (rows with any NaN are dropped).

    Relative bias is in percent of the truth; where a truth component is
    zero the absolute bias is reported instead and ``bias_is_absolute`` set.
    """
    est = np.asarray(estimates, dtype=float)
    truth = np.asarray(beta_true, dtype=float)
    ok = np.all(np.isfinite(est), axis=1)
    if analytic_variances is not None:
        av = np.asarray(analytic_variances, dtype=float)
        ok &= np.all(np.isfinite(av), axis=1)
    good = est[ok]
    if len(good) < 2:
        raise ValueError("need at least 2 successful replicates")
    mean = good.mean(axis=0)
    bias = mean - truth
    absolute = truth == 0
    rel = np.where(absolute, bias, 100 * bias / np.where(absolute, 1.0, truth))
    empvar = good.var(axis=0, ddof=1)
    out = {
        "mean_estimate": mean,
        "relative_bias_pct": rel,
        "bias_is_absolute": absolute,
        "empirical_variance": empvar,
        "mse": empvar + bias**2,
        "replicates_used": int(ok.sum()),
        "failures": int((~ok).sum()),
    }
    if analytic_variances is not None:
        mav = av[ok].mean(axis=0)
        out["mean_analytic_variance"] = mav
        out["variance_ratio"] = mav / empvar
    else:
        out["mean_analytic_variance"] = np.full(len(truth), np.nan)
        out["variance_ratio"] = np.full(len(truth), np.nan)
    return out


@dataclass(eq=False)
class McSummary:
    table: pd.DataFrame
    estimates: dict
    variances: dict
    metadata: dict

    def cell(self, method: str, coefficient: str, column: str) -> float:
        t = self.table
        row = t[(t.method == method) & (t.coefficient == coefficient)]
        return float(row[column].iloc[0])

    def empvar(self, method: str) -> np.ndarray:
        t = self.table[self.table.method == method]
        return t.set_index("coefficient").loc[list(simgen.COEF_NAMES), "empirical_variance"].to_numpy()

    def to_csv(self, fh):
        self.table.to_csv(fh, index=False, float_format="%.10g", lineterminator="\n")

    def to_json(self) -> str:
        nested = {}
        for rec in self.table.to_dict(orient="records"):
            m = nested.setdefault(rec.pop("method"), {})
            m[rec.pop("coefficient")] = {k: _jsonable(v) for k, v in rec.items()}
        return json.dumps({"metadata": self.metadata, "methods": nested}, indent=2, sort_keys=True)


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        return None if not np.isfinite(v) else float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def run_study(config: StudyConfig) -> McSummary:
    config.check()
    results = run_replicates(config)
    if config.bias_target == "census":
        if config.regenerate_fp:
            truth = np.mean([r[3] for r in results], axis=0)
        else:
            truth = _population(config).census_beta()
    else:
        truth = np.asarray(config.fp.beta_true, dtype=float)

    est = np.stack([r[0] for r in results])  # (R, methods, p)
    var = np.stack([r[1] for r in results])
    failures = {m: 0 for m in config.methods}
    messages = {}
    for r in results:
        for m, msg in r[2].items():
            failures[m] += 1
            messages.setdefault(m, msg)
    limit = MAX_FAILURE_RATE * config.replicates
    bad = {m: c for m, c in failures.items() if c > limit}
    if bad:
        raise StudyAbort(
            "replicate failure rate above 5% for "
            + ", ".join(f"{m} ({c}/{config.replicates}; first error: {messages[m]})" for m, c in bad.items()),
            failures,
        )

    rows = []
    for j, method in enumerate(config.methods):
        s = summarize(est[:, j], truth, var[:, j] if config.variance else None)
        for c, coef in enumerate(simgen.COEF_NAMES):
            rows.append({
                "method": method,
                "coefficient": coef,
                "truth": float(truth[c]),
                "mean_estimate": s["mean_estimate"][c],
                "relative_bias_pct": s["relative_bias_pct"][c],
                "bias_is_absolute": bool(s["bias_is_absolute"][c]),
                "empirical_variance": s["empirical_variance"][c],
                "mean_analytic_variance": s["mean_analytic_variance"][c],
                "variance_ratio": s["variance_ratio"][c],
                "mse": s["mse"][c],
                "failures": failures[method],
                "replicates": config.replicates,
            })
    table = pd.DataFrame(rows)
    meta = {"config": config.to_dict(), "bias_target": config.bias_target,
            "failures": failures, "failure_messages": messages}
    return McSummary(
        table=table,
        estimates={m: est[:, j] for j, m in enumerate(config.methods)},
        variances={m: var[:, j] for j, m in enumerate(config.methods)},
        metadata=meta,
    )


# -- efficiency sweeps -------------------------------------------------------

def _point_config(config: StudyConfig, design, parameter, value) -> StudyConfig:
    cfg = replace(config, design=DesignType(design))
    if parameter == "f2":
        cfg = replace(cfg, f2=float(value), C=None, n_per_cycle=None)
    elif parameter == "rho_x11_x2":
        cfg = replace(cfg, fp=replace(cfg.fp, rho_x11_z2=simgen.rho_z2_for(float(value), cfg.fp.eps_sd)))
    elif parameter == "rho_x11_z2":
        cfg = replace(cfg, fp=replace(cfg.fp, rho_x11_z2=float(value)))
    else:
        raise ValueError(f"cannot sweep over {parameter!r}")
    return cfg


def efficiency_sweep(config: StudyConfig, sweep: dict, designs=None) -> pd.DataFrame:
    """Long table of efficiency gains, one row per design x grid point x method x coefficient.

    ``sweep`` maps one parameter name (``f2``, ``rho_x11_x2`` or
    ``rho_x11_z2``) to its grid.
    """
    if len(sweep) != 1:
        raise ValueError("sweep exactly one parameter")
    (parameter, grid), = sweep.items()
    grid = list(grid)
    if not grid:
        raise ValueError("empty sweep grid")
    designs = [config.design] if designs is None else [DesignType(d) for d in designs]
    methods = tuple(dict.fromkeys(("Direct.s2", *config.methods)))
    rows = []
    for design in designs:
        for value in grid:
            cfg = _point_config(replace(config, methods=methods), design, parameter, value)
            summary = run_study(cfg)
            base = summary.empvar("Direct.s2")
            for method in methods:
                ev = summary.empvar(method)
                for c, coef in enumerate(simgen.COEF_NAMES):
                    rows.append({
                        "design": DesignType(design).value,
                        "parameter": parameter,
                        "value": float(value),
                        "method": method,
                        "coefficient": coef,
                        "empirical_variance": ev[c],
                        "direct_s2_variance": base[c],
                        "gain": base[c] / ev[c],
                    })
    return pd.DataFrame(rows)


def gain(table: pd.DataFrame, design, value, method, coefficient) -> float:
    t = table
    sel = ((t.design == DesignType(design).value) & np.isclose(t.value, value)
           & (t.method == method) & (t.coefficient == coefficient))
    return float(t.loc[sel, "gain"].iloc[0])
