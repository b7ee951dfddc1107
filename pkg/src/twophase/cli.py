"""Command-line entry point: ``twophase {simulate,sweep,analyze,validate,sample}``.

Exit codes: 0 success, 2 configuration error, 3 study abort, 4 data or
validation failure.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import sys
import tempfile
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, config as cfgmod, mcstudy, pipeline, simgen
from .config import ConfigError
from .datamodel import CsvFormatError, DesignType, read_csv, validate, write_csv
from .errors import DataError, DesignError, EstimationError, StudyAbort
from .varest import wald_ci

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_DATA = 0, 2, 3, 4
TOOL = "twophase"
BUNDLED = ("table2_desk.cfg", "fig2_desk.cfg", "fig3_desk.cfg")


class CliFailure(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# -- helpers -------------------------------------------------------------------

def bundled_config_text(name: str) -> str:
    return resources.files("twophase").joinpath("configs", name).read_text()


def load_config(path: str) -> cfgmod.ConfigFile:
    """Parse ``path``; bare names of bundled configs resolve to the packaged copies."""
    if not Path(path).exists() and path in BUNDLED:
        return cfgmod.parse_text(bundled_config_text(path), path)
    return cfgmod.parse_file(path)


def header_lines(digest: str, seed, **extra) -> dict:
    return {"tool": TOOL, "version": __version__, "config_sha256": digest, "seed": seed, **extra}


def with_header(header: dict, body: str) -> str:
    return "".join(f"# {k}={v}\n" for k, v in header.items()) + body


def json_with_header(header: dict, payload: dict) -> str:
    # JSON has no comment syntax, so the header is the first member
    doc = {"header": header}
    doc.update(payload)
    return json.dumps(doc, indent=2, sort_keys=False, allow_nan=False) + "\n"


def write_outputs(outdir: Path, files: dict) -> None:
    """Stage every file next to its target, then rename them into place."""
    outdir.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=outdir)
            staged.append((tmp, outdir / name))
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
        for tmp, target in staged:
            os.replace(tmp, target)
    except BaseException:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
        raise


def _csv_text(frame: pd.DataFrame) -> str:
    buf = io.StringIO()
    frame.to_csv(buf, index=False, float_format="%.10g", lineterminator="\n")
    return buf.getvalue()


def _study_from(args, sweep=False):
    cfg = load_config(args.config)
    parsed = cfgmod.study_config(cfg, sweep_allowed=sweep)
    study, spec = parsed if sweep else (parsed, None)
    if args.seed is not None:
        study = replace(study, seed=args.seed)
    study = replace(study, threads=args.threads or os.cpu_count() or 1)
    try:
        study.check()
    except (ValueError, DesignError) as exc:
        raise ConfigError(str(exc), cfg.path) from None
    return cfg, study, spec


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# -- subcommands ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg, study, _ = _study_from(args)
    try:
        summary = mcstudy.run_study(study)
    except DesignError as exc:
        raise ConfigError(f"infeasible design: {exc}", cfg.path) from None
    except StudyAbort as exc:
        raise CliFailure(f"study aborted: {exc}", EXIT_ABORT) from None
    head = header_lines(cfg.digest, study.seed)
    buf = io.StringIO()
    summary.to_csv(buf)
    nested = json.loads(summary.to_json())
    meta = {
        "tool": TOOL,
        "version": __version__,
        "config_sha256": cfg.digest,
        "seed": study.seed,
        "config": study.to_dict(),
        "bias_target": study.bias_target,
        "failures": summary.metadata["failures"],
        "failure_messages": summary.metadata["failure_messages"],
        "variance_estimator": "stacked sandwich, ultimate-cluster PSU totals"
                              + ("" if study.stack_proxy else " (proxy coefficients held fixed)"),
    }
    write_outputs(Path(args.output), {
        "summary.csv": with_header(head, buf.getvalue()),
        "summary.json": json_with_header(head, {"methods": nested["methods"]}),
        "run_metadata.json": json_with_header(head, _jsonable(meta)),
    })
    out = buf.getvalue() if args.format == "csv" else summary.to_json() + "\n"
    sys.stdout.write(out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, study, spec = _study_from(args, sweep=True)
    try:
        table = mcstudy.efficiency_sweep(study, {spec.parameter: spec.values}, spec.designs)
    except DesignError as exc:
        raise ConfigError(f"infeasible design: {exc}", cfg.path) from None
    except StudyAbort as exc:
        raise CliFailure(f"study aborted: {exc}", EXIT_ABORT) from None
    head = header_lines(cfg.digest, study.seed, gain=mcstudy.GAIN_DEFINITION)
    meta = {
        "tool": TOOL, "version": __version__, "config_sha256": cfg.digest, "seed": study.seed,
        "config": study.to_dict(), "sweep": {"parameter": spec.parameter, "values": list(spec.values),
                                             "designs": [d.value for d in spec.designs]},
        "gain_definition": mcstudy.GAIN_DEFINITION,
    }
    text = _csv_text(table)
    write_outputs(Path(args.output), {
        "sweep.csv": with_header(head, text),
        "run_metadata.json": json_with_header(head, _jsonable(meta)),
    })
    sys.stdout.write(text if args.format == "csv" else table.to_json(orient="records") + "\n")
    return EXIT_OK


def _read_data(path, **kwargs):
    try:
        return read_csv(path, **kwargs)
    except FileNotFoundError:
        raise CliFailure(f"data file not found: {path}", EXIT_DATA) from None
    except (CsvFormatError, ValueError) as exc:
        raise CliFailure(f"malformed CSV {path}: {exc}", EXIT_DATA) from None


def _report_text(report) -> str:
    lines = []
    for v in report.violations:
        where = f"row {v.row}" if v.row is not None else "dataset"
        lines.append(f"{where}: {v.rule}: {v.message}")
    return "".join(line + "\n" for line in lines)


def cmd_validate(args) -> int:
    ds = _read_data(args.data, design_type=args.design_type,
                    cycles_total=args.cycles_total, cycles_with_x2=args.cycles_with_x2)
    report = validate(ds)
    if args.format == "json":
        sys.stdout.write(report.to_jsonl())
    else:
        sys.stdout.write(_report_text(report))
        status = "ACCEPTED" if report.ok else f"REJECTED ({len(report.violations)} violation(s))"
        sys.stdout.write(f"{status}: {ds.n} rows, {ds.n2} in second phase, design {ds.design_type.value}\n")
    return EXIT_OK if report.ok else EXIT_DATA


ANALYZE_METHODS = (
    ("DirectS2", lambda ds, sp: pipeline.estimate_direct_s2(ds, sp.model)),
    ("Imputation", lambda ds, sp: pipeline.estimate_imputation(ds, sp.model, sp.predictor)),
    ("CalibInfluence", lambda ds, sp: pipeline.estimate_calib_influence(
        ds, sp.model, sp.predictor, sp.distance, variance=sp.distance.value == "chisq")),
)
DIAGNOSTIC_KEYS = ("calibration_residual", "score_constraint_residual",
                   "negative_weight_count", "prediction_r2")


def run_analysis(ds, spec):
    """Run every analysis estimator; failures are collected per method."""
    rows, report = [], {}
    for label, run in ANALYZE_METHODS:
        try:
            out = run(ds, spec)
        except (EstimationError, DesignError, KeyError) as exc:
            msg = exc.args[0] if isinstance(exc, KeyError) else str(exc)
            report[label] = {"error": f"{type(exc).__name__}: {msg}"}
            continue
        var = out.variance
        ci = (wald_ci(out.beta, np.nan_to_num(var), out.df) if out.covariance is not None
              else np.full((len(out.beta), 2), np.nan))
        for j, name in enumerate(out.names):
            rows.append({
                "method": label, "coefficient": name, "estimate": out.beta[j],
                "variance": var[j], "se": np.sqrt(var[j]),
                "ci_lower": ci[j, 0], "ci_upper": ci[j, 1],
                "df": out.df if out.df is not None else "",
            })
        report[label] = {
            "coefficients": dict(zip(out.names, out.beta)),
            "covariance": out.covariance,
            "df": out.df,
            "diagnostics": {k: out.diagnostics[k] for k in DIAGNOSTIC_KEYS if k in out.diagnostics},
        }
    columns = ["method", "coefficient", "estimate", "variance", "se", "ci_lower", "ci_upper", "df"]
    return pd.DataFrame(rows, columns=columns), report


def cmd_analyze(args) -> int:
    cfg = load_config(args.spec)
    spec = cfgmod.analysis_spec(cfg)
    ds = _read_data(args.data, design_type=spec.design_type, fp_size=spec.fp_size,
                    cycles_total=spec.cycles_total, cycles_with_x2=spec.cycles_with_x2)
    if spec.outcome != "y":
        if spec.outcome not in ds.aux:
            raise ConfigError(f"outcome column {spec.outcome!r} not in {args.data}", cfg.path,
                              cfg.entries["model.outcome"].line)
        ds = ds._replace(y=ds.aux[spec.outcome])
    report = validate(ds)
    if not report.ok:
        sys.stderr.write(_report_text(report))
        raise CliFailure(f"{args.data} failed validation ({len(report.violations)} violation(s))", EXIT_DATA)

    table, results = run_analysis(ds, spec)
    head = header_lines(cfg.digest, "none")
    write_outputs(Path(args.output), {
        "estimates.csv": with_header(head, _csv_text(table)),
        "estimates.json": json_with_header(head, {"data": Path(args.data).name,
                                                  "methods": _jsonable(results)}),
    })
    failed = {m: r["error"] for m, r in results.items() if "error" in r}
    for method, msg in failed.items():
        sys.stderr.write(f"{method} failed: {msg}\n")
    sys.stdout.write(_csv_text(table) if args.format == "csv"
                     else json.dumps(_jsonable(results), indent=2) + "\n")
    return EXIT_DATA if failed else EXIT_OK


def cmd_sample(args) -> int:
    cfg, study, _ = _study_from(args)
    fp = mcstudy._population(study)
    seed = simgen.replicate_seed(study.seed, args.replicate)
    try:
        ds = mcstudy.draw_sample(fp, study, seed)
    except DesignError as exc:
        raise ConfigError(f"infeasible design: {exc}", cfg.path) from None
    buf = io.StringIO()
    head = header_lines(cfg.digest, study.seed, replicate=args.replicate)
    write_csv(ds, buf, header_lines=[f"{k}={v}" for k, v in head.items()])
    out = Path(args.output)
    write_outputs(out.parent if str(out.parent) else Path("."), {out.name: buf.getvalue()})
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=TOOL, description="Two-phase survey logistic regression tools.")
    parser.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def study_args(p, default_out):
        p.add_argument("config", help="key=value config file or the name of a bundled config")
        p.add_argument("-o", "--output", default=default_out, help="output directory")
        p.add_argument("--seed", type=int, help="override study.seed")
        p.add_argument("--threads", type=int, default=None, help="worker processes (default: all cores)")
        p.add_argument("--format", choices=("csv", "json"), default="csv", help="stdout format")

    study_args(sub.add_parser("simulate", help="Monte Carlo study summary"), "twophase-out")
    study_args(sub.add_parser("sweep", help="efficiency-gain sweep"), "twophase-sweep")

    p = sub.add_parser("analyze", help="estimate coefficients from a two-phase CSV")
    p.add_argument("data")
    p.add_argument("spec", help="model spec file (key=value)")
    p.add_argument("-o", "--output", default="twophase-analysis")
    p.add_argument("--format", choices=("csv", "json"), default="csv")

    p = sub.add_parser("validate", help="check a two-phase CSV against the schema")
    p.add_argument("data")
    p.add_argument("--design-type", choices=[d.value for d in DesignType])
    p.add_argument("--cycles-total", type=int)
    p.add_argument("--cycles-with-x2", type=int)
    p.add_argument("--format", choices=("csv", "json"), default="csv",
                   help="json emits one violation per line")

    p = sub.add_parser("sample", help="export one simulated two-phase sample as CSV")
    p.add_argument("config")
    p.add_argument("-o", "--output", default="sample.csv", help="output CSV path")
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1)
    return parser


COMMANDS = {"simulate": cmd_simulate, "sweep": cmd_sweep, "analyze": cmd_analyze,
            "validate": cmd_validate, "sample": cmd_sample}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except CliFailure as exc:
        sys.stderr.write(f"{exc}\n")
        return exc.code
    except DataError as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
