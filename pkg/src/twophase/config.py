"""Flat key=value configuration files.

One ``section.key = value`` pair per line, ``#`` starts a comment, blank
lines are ignored. Lists are comma separated. Every parse or type error is
reported with the file path and line number.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

from . import simgen
from .calib import Distance
from .datamodel import DesignType
from .pipeline import PredictorSpec
from .wlogit import ModelSpec


class ConfigError(ValueError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


@dataclass(frozen=True)
class Entry:
    value: str
    line: int


@dataclass
class ConfigFile:
    path: str
    entries: dict
    text: str

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    def error(self, key, message):
        line = self.entries[key].line if key in self.entries else None
        return ConfigError(message, self.path, line)

    def has(self, key) -> bool:
        return key in self.entries

    def raw(self, key, default=None):
        return self.entries[key].value if key in self.entries else default

    def _convert(self, key, default, fn, kind):
        if key not in self.entries:
            return default
        try:
            return fn(self.entries[key].value)
        except (ValueError, ZeroDivisionError):
            raise self.error(key, f"{key}: expected {kind}, got {self.entries[key].value!r}") from None

    def integer(self, key, default=None):
        return self._convert(key, default, int, "an integer")

    def number(self, key, default=None):
        # fractions such as 1/3 are accepted so grids can be written exactly
        return self._convert(key, default, lambda v: float(Fraction(v.strip())), "a number")

    def numbers(self, key, default=None):
        return self._convert(key, default, lambda v: [float(Fraction(t.strip())) for t in _split(v)],
                             "a comma-separated list of numbers")

    def words(self, key, default=None):
        return self._convert(key, default, lambda v: _split(v), "a comma-separated list")

    def boolean(self, key, default=None):
        def parse(v):
            v = v.strip().lower()
            if v in ("true", "yes", "1", "on"):
                return True
            if v in ("false", "no", "0", "off"):
                return False
            raise ValueError(v)
        return self._convert(key, default, parse, "true or false")

    def check_keys(self, allowed):
        for key, entry in self.entries.items():
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r}", self.path, entry.line)


def _split(value):
    parts = [t.strip() for t in value.split(",")]
    if any(not t for t in parts):
        raise ValueError(value)
    return parts


def parse_text(text: str, path="<string>") -> ConfigFile:
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or "." not in key:
            raise ConfigError(f"key {key!r} needs a section prefix such as 'study.'", path, lineno)
        if not value:
            raise ConfigError(f"empty value for {key!r}", path, lineno)
        if key in entries:
            raise ConfigError(f"duplicate key {key!r} (first set on line {entries[key].line})", path, lineno)
        entries[key] = Entry(value, lineno)
    return ConfigFile(str(path), entries, text)


def parse_file(path) -> ConfigFile:
    p = Path(path)
    try:
        text = p.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_text(text, str(path))


# -- study configs -----------------------------------------------------------

FP_KEYS = {"fp.n", "fp.rho_x11_x2", "fp.rho_x11_z2", "fp.eps_sd", "fp.beta_true",
           "fp.n_stage1", "fp.n_stage2", "fp.mos_coefficient", "fp.seed"}
DESIGN_KEYS = {"design.type", "design.n1", "design.f2", "design.C", "design.B",
               "design.n_per_cycle", "design.a1", "design.a2", "design.phase2"}
STUDY_KEYS = {"study.replicates", "study.methods", "study.seed", "study.variance",
              "study.stack_proxy", "study.regenerate_fp", "study.bias_target"}
SWEEP_KEYS = {"sweep.parameter", "sweep.values", "sweep.designs"}


@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    values: tuple
    designs: tuple


def _fp_config(cfg: ConfigFile) -> simgen.FpConfig:
    fp = simgen.FpConfig()
    if cfg.has("fp.rho_x11_x2") and cfg.has("fp.rho_x11_z2"):
        raise cfg.error("fp.rho_x11_z2", "set only one of fp.rho_x11_x2 and fp.rho_x11_z2")
    eps_sd = cfg.number("fp.eps_sd", fp.eps_sd)
    rho = fp.rho_x11_z2
    if cfg.has("fp.rho_x11_x2"):
        rho = simgen.rho_z2_for(cfg.number("fp.rho_x11_x2"), eps_sd)
    rho = cfg.number("fp.rho_x11_z2", rho)
    beta = cfg.numbers("fp.beta_true", list(fp.beta_true))
    if len(beta) != 5:
        raise cfg.error("fp.beta_true", "fp.beta_true needs 5 values (b0, b11, b12, b2, b22)")
    return replace(
        fp,
        n=cfg.integer("fp.n", fp.n),
        rho_x11_z2=rho,
        eps_sd=eps_sd,
        beta_true=tuple(beta),
        n_stage1=cfg.integer("fp.n_stage1", fp.n_stage1),
        n_stage2=cfg.integer("fp.n_stage2", fp.n_stage2),
        mos_coefficient=cfg.number("fp.mos_coefficient", fp.mos_coefficient),
        seed=cfg.integer("fp.seed", fp.seed),
    )


def _design_type(cfg, key, value):
    try:
        return DesignType(value.strip().lower())
    except ValueError:
        raise cfg.error(key, f"{key}: unknown design type {value!r} (use type1 or type2)") from None


def study_config(cfg: ConfigFile, *, sweep_allowed=False):
    """Build a StudyConfig (and a SweepSpec when sweep keys are allowed) from a parsed file."""
    from .mcstudy import METHODS, StudyConfig, ALL_METHODS

    allowed = FP_KEYS | DESIGN_KEYS | STUDY_KEYS | (SWEEP_KEYS if sweep_allowed else set())
    cfg.check_keys(allowed)
    base = StudyConfig()
    design = _design_type(cfg, "design.type", cfg.raw("design.type", base.design.value))
    methods = tuple(cfg.words("study.methods", list(ALL_METHODS)))
    for m in methods:
        if m not in METHODS:
            raise cfg.error("study.methods", f"unknown method {m!r}; known: {', '.join(METHODS)}")
    phase2 = cfg.raw("design.phase2", base.phase2)
    if phase2 not in ("within_psu", "srs"):
        raise cfg.error("design.phase2", "design.phase2 must be within_psu or srs")
    bias_target = cfg.raw("study.bias_target", base.bias_target)
    if bias_target not in ("truth", "census"):
        raise cfg.error("study.bias_target", "study.bias_target must be truth or census")
    study = StudyConfig(
        fp=_fp_config(cfg),
        design=design,
        n1=cfg.integer("design.n1", base.n1),
        f2=cfg.number("design.f2", base.f2),
        C=cfg.integer("design.C", None),
        B=cfg.integer("design.B", base.B),
        n_per_cycle=cfg.integer("design.n_per_cycle", None),
        replicates=cfg.integer("study.replicates", base.replicates),
        methods=methods,
        seed=cfg.integer("study.seed", base.seed),
        a1=cfg.integer("design.a1", base.a1),
        a2=cfg.integer("design.a2", base.a2),
        phase2=phase2,
        regenerate_fp=cfg.boolean("study.regenerate_fp", base.regenerate_fp),
        stack_proxy=cfg.boolean("study.stack_proxy", base.stack_proxy),
        variance=cfg.boolean("study.variance", base.variance),
        bias_target=bias_target,
    )
    if study.replicates < 2:
        raise cfg.error("study.replicates", "study.replicates must be at least 2")
    if not 0 < study.f2 <= 1:
        raise cfg.error("design.f2", "design.f2 must lie in (0, 1]")
    if not sweep_allowed:
        return study

    if not cfg.has("sweep.parameter"):
        raise ConfigError("sweep.parameter is required", cfg.path)
    parameter = cfg.raw("sweep.parameter")
    if parameter not in ("f2", "rho_x11_x2", "rho_x11_z2"):
        raise cfg.error("sweep.parameter", "sweep.parameter must be f2, rho_x11_x2 or rho_x11_z2")
    if not cfg.has("sweep.values"):
        raise ConfigError("sweep.values is required", cfg.path)
    values = tuple(cfg.numbers("sweep.values"))
    designs = tuple(_design_type(cfg, "sweep.designs", d)
                    for d in cfg.words("sweep.designs", [design.value]))
    return study, SweepSpec(parameter, values, designs)


# -- analysis spec -----------------------------------------------------------

ANALYSIS_KEYS = {"model.outcome", "model.covariates", "model.interactions",
                 "predictor.mode", "predictor.columns", "calibration.distance",
                 "design.type", "design.fp_size", "design.C", "design.B"}


@dataclass(frozen=True)
class AnalysisSpec:
    outcome: str
    model: ModelSpec
    predictor: PredictorSpec
    distance: Distance
    design_type: DesignType | None
    fp_size: float | None
    cycles_total: int | None
    cycles_with_x2: int | None


def analysis_spec(cfg: ConfigFile) -> AnalysisSpec:
    cfg.check_keys(ANALYSIS_KEYS)
    for key in ("model.covariates", "predictor.columns"):
        if not cfg.has(key):
            raise ConfigError(f"{key} is required", cfg.path)
    interactions = []
    for term in cfg.words("model.interactions", []):
        parts = [t.strip() for t in term.split(":")]
        if len(parts) != 2 or not all(parts):
            raise cfg.error("model.interactions", f"interaction {term!r} must look like a:b")
        interactions.append(tuple(parts))
    mode = cfg.raw("predictor.mode", "passthrough")
    columns = cfg.words("predictor.columns")
    if mode == "passthrough":
        if len(columns) != 1:
            raise cfg.error("predictor.columns", "passthrough prediction takes exactly one column")
        predictor = PredictorSpec.passthrough(columns[0])
    elif mode == "linear":
        predictor = PredictorSpec.linear(*columns)
    else:
        raise cfg.error("predictor.mode", "predictor.mode must be passthrough or linear")
    try:
        distance = Distance(cfg.raw("calibration.distance", "chisq"))
    except ValueError:
        raise cfg.error("calibration.distance", "calibration.distance must be chisq or exp") from None
    design_type = None
    if cfg.has("design.type"):
        design_type = _design_type(cfg, "design.type", cfg.raw("design.type"))
    return AnalysisSpec(
        outcome=cfg.raw("model.outcome", "y"),
        model=ModelSpec(covariates=tuple(cfg.words("model.covariates")), include_x2=True,
                        interactions=tuple(interactions)),
        predictor=predictor,
        distance=distance,
        design_type=design_type,
        fp_size=cfg.number("design.fp_size", None),
        cycles_total=cfg.integer("design.C", None),
        cycles_with_x2=cfg.integer("design.B", None),
    )
