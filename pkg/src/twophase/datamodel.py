"""Two-phase survey data: row records, columnar datasets, design frames.

A ``TwoPhaseDataset`` holds the whole first-phase sample s1. Second-phase
membership is the boolean ``in_s2`` column; ``w2`` and ``x2`` are NaN
outside s2. Extra per-row numeric columns (predictions of x2, the oracle
x2 kept by the simulator, ...) live in ``aux``.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DataError, DesignError

NA_TOKENS = {"", "NA"}
_X1_RE = re.compile(r"^x1_\d+$")
_Z_RE = re.compile(r"^z_\d+$")
_CORE_COLUMNS = ("unit_id", "stratum", "psu", "cycle", "w1", "in_s2", "w2", "y", "x2")


class DesignType(str, Enum):
    TYPE_I = "type1"
    TYPE_II = "type2"


class Phase2StrataRule(str, Enum):
    PHASE1_PSU_AS_STRATUM = "psu_as_stratum"
    CYCLE_SUBSET = "cycle_subset"


@dataclass(frozen=True)
class Row:
    unit_id: str
    stratum: str
    psu: str
    w1: float
    in_s2: bool
    y: float
    x1: tuple
    z: tuple = ()
    cycle: str | None = None
    w2: float | None = None
    x2: float | None = None


def _labels(values, n) -> np.ndarray:
    if values is None:
        return np.full(n, "", dtype=str)
    return np.asarray(["" if v is None else str(v) for v in values], dtype=str)


def _float_col(values, n) -> np.ndarray:
    if values is None:
        return np.full(n, np.nan)
    arr = np.array(values, dtype=float)
    return arr.reshape(n)


def _matrix(values, n) -> np.ndarray:
    if values is None:
        return np.empty((n, 0))
    arr = np.array(values, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(n, -1) if arr.size else np.empty((n, 0))
    return arr


@dataclass(frozen=True, eq=False)
class TwoPhaseDataset:
    """Columnar two-phase sample. Construct once, then treat as read-only."""

    unit_id: np.ndarray
    stratum: np.ndarray
    psu: np.ndarray
    w1: np.ndarray
    in_s2: np.ndarray
    w2: np.ndarray
    y: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    z: np.ndarray = None
    cycle: np.ndarray = None
    x1_names: tuple = ()
    z_names: tuple = ()
    aux: dict = field(default_factory=dict)
    design_type: DesignType = DesignType.TYPE_I
    phase2_strata_rule: Phase2StrataRule = Phase2StrataRule.PHASE1_PSU_AS_STRATUM
    fp_size: float | None = None
    cycles_total: int | None = None
    cycles_with_x2: int | None = None

    def __post_init__(self):
        n = len(self.unit_id)
        set_ = object.__setattr__
        set_(self, "unit_id", _labels(self.unit_id, n))
        set_(self, "stratum", _labels(self.stratum, n))
        set_(self, "psu", _labels(self.psu, n))
        set_(self, "cycle", _labels(self.cycle, n))
        set_(self, "w1", _float_col(self.w1, n))
        set_(self, "in_s2", np.asarray(self.in_s2, dtype=bool).reshape(n))
        set_(self, "w2", _float_col(self.w2, n))
        set_(self, "y", _float_col(self.y, n))
        set_(self, "x2", _float_col(self.x2, n))
        x1 = _matrix(self.x1, n)
        z = _matrix(self.z, n)
        set_(self, "x1", x1)
        set_(self, "z", z)
        set_(self, "x1_names", tuple(self.x1_names) or tuple(f"x1_{j + 1}" for j in range(x1.shape[1])))
        set_(self, "z_names", tuple(self.z_names) or tuple(f"z_{j + 1}" for j in range(z.shape[1])))
        set_(self, "aux", {k: _float_col(v, n) for k, v in dict(self.aux).items()})
        set_(self, "design_type", DesignType(self.design_type))
        set_(self, "phase2_strata_rule", Phase2StrataRule(self.phase2_strata_rule))
        if len(self.x1_names) != x1.shape[1] or len(self.z_names) != z.shape[1]:
            raise ValueError("column names do not match matrix widths")

    # -- sizes and weights -------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.unit_id)

    @property
    def n2(self) -> int:
        return int(self.in_s2.sum())

    @property
    def w(self) -> np.ndarray:
        """Combined weight w1*w2; NaN outside s2."""
        return np.where(self.in_s2, self.w1 * self.w2, np.nan)

    @property
    def n_hat(self) -> float:
        return float(self.w1.sum())

    @property
    def n_scale(self) -> float:
        """Population size used in every 1/N normalization."""
        return float(self.fp_size) if self.fp_size else self.n_hat

    # -- column access ------------------------------------------------------
    def columns(self) -> tuple:
        return ("y", "x2", *self.x1_names, *self.z_names, *self.aux)

    def column(self, name: str) -> np.ndarray:
        if name in self.x1_names:
            return self.x1[:, self.x1_names.index(name)]
        if name in self.z_names:
            return self.z[:, self.z_names.index(name)]
        if name in self.aux:
            return self.aux[name]
        if name in ("y", "x2", "w1", "w2"):
            return getattr(self, name)
        raise KeyError(f"unknown column {name!r}")

    def has_column(self, name: str) -> bool:
        try:
            self.column(name)
        except KeyError:
            return False
        return True

    # -- row-set operations -------------------------------------------------
    def take(self, index) -> "TwoPhaseDataset":
        index = np.asarray(index)
        return TwoPhaseDataset(
            unit_id=self.unit_id[index],
            stratum=self.stratum[index],
            psu=self.psu[index],
            cycle=self.cycle[index],
            w1=self.w1[index],
            in_s2=self.in_s2[index],
            w2=self.w2[index],
            y=self.y[index],
            x1=self.x1[index],
            x2=self.x2[index],
            z=self.z[index],
            x1_names=self.x1_names,
            z_names=self.z_names,
            aux={k: v[index] for k, v in self.aux.items()},
            design_type=self.design_type,
            phase2_strata_rule=self.phase2_strata_rule,
            fp_size=self.fp_size,
            cycles_total=self.cycles_total,
            cycles_with_x2=self.cycles_with_x2,
        )

    def canonical(self) -> "TwoPhaseDataset":
        """Rows sorted by (cycle, stratum, psu, unit_id).

        Estimators run on the canonical order so results do not depend on
        the order rows arrive in.
        """
        order = np.lexsort((self.unit_id, self.psu, self.stratum, self.cycle))
        if np.array_equal(order, np.arange(self.n)):
            return self
        return self.take(order)

    def with_aux(self, **columns) -> "TwoPhaseDataset":
        aux = dict(self.aux)
        aux.update(columns)
        return self._replace(aux=aux)

    def _replace(self, **changes) -> "TwoPhaseDataset":
        kwargs = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kwargs.update(changes)
        return TwoPhaseDataset(**kwargs)

    # -- row views ----------------------------------------------------------
    def rows(self) -> Iterator[Row]:
        for i in range(self.n):
            yield Row(
                unit_id=str(self.unit_id[i]),
                stratum=str(self.stratum[i]),
                psu=str(self.psu[i]),
                cycle=str(self.cycle[i]) or None,
                w1=float(self.w1[i]),
                in_s2=bool(self.in_s2[i]),
                w2=None if math.isnan(self.w2[i]) else float(self.w2[i]),
                y=float(self.y[i]),
                x1=tuple(float(v) for v in self.x1[i]),
                x2=None if math.isnan(self.x2[i]) else float(self.x2[i]),
                z=tuple(float(v) for v in self.z[i]),
            )

    @classmethod
    def from_rows(cls, rows: Sequence[Row], **meta) -> "TwoPhaseDataset":
        rows = list(rows)
        n = len(rows)
        p1 = len(rows[0].x1) if rows else 0
        q = len(rows[0].z) if rows else 0
        return cls(
            unit_id=[r.unit_id for r in rows],
            stratum=[r.stratum for r in rows],
            psu=[r.psu for r in rows],
            cycle=[r.cycle for r in rows],
            w1=[r.w1 for r in rows],
            in_s2=[r.in_s2 for r in rows],
            w2=[np.nan if r.w2 is None else r.w2 for r in rows],
            y=[r.y for r in rows],
            x1=np.array([r.x1 for r in rows], dtype=float).reshape(n, p1),
            x2=[np.nan if r.x2 is None else r.x2 for r in rows],
            z=np.array([r.z for r in rows], dtype=float).reshape(n, q),
            **meta,
        )


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    row: int | None
    rule: str
    message: str

    def to_json(self) -> str:
        return json.dumps({"row": self.row, "rule": self.rule, "message": self.message})


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, rule: str, message: str, rows: Iterable[int] | None = None):
        if rows is None:
            self.violations.append(Violation(None, rule, message))
        else:
            for i in rows:
                self.violations.append(Violation(int(i), rule, message))

    def rules(self) -> set:
        return {v.rule for v in self.violations}

    def to_jsonl(self) -> str:
        return "".join(v.to_json() + "\n" for v in self.violations)


def validate(dataset: TwoPhaseDataset) -> ValidationReport:
    """Check every row- and dataset-level invariant; never raises."""
    ds = dataset
    report = ValidationReport()
    where = lambda mask: np.flatnonzero(mask)  # noqa: E731

    report.add("w1_positive", "phase-1 weight must be positive and finite",
               where(~(np.isfinite(ds.w1) & (ds.w1 > 0))))
    w2_ok = np.isfinite(ds.w2) & (ds.w2 > 0)
    report.add("missing_w2", "missing phase-2 weight", where(ds.in_s2 & np.isnan(ds.w2)))
    report.add("w2_positive", "phase-2 weight must be positive",
               where(ds.in_s2 & ~np.isnan(ds.w2) & ~w2_ok))
    report.add("w2_outside_s2", "phase-2 weight given for a row outside the second phase",
               where(~ds.in_s2 & ~np.isnan(ds.w2)))
    report.add("missing_x2", "x2 required for every second-phase row",
               where(ds.in_s2 & ~np.isfinite(ds.x2)))
    report.add("y_binary", "outcome must be 0 or 1", where(~np.isin(ds.y, (0.0, 1.0))))
    if ds.x1.size:
        report.add("missing_x1", "x1 covariates required on every row",
                   where(~np.isfinite(ds.x1).all(axis=1)))
    if ds.z.size:
        report.add("missing_z", "ancillary variables required on every row",
                   where(~np.isfinite(ds.z).all(axis=1)))
    report.add("missing_stratum", "stratum label required", where(ds.stratum == ""))
    report.add("missing_psu", "psu label required", where(ds.psu == ""))

    _, first, counts = np.unique(ds.unit_id, return_index=True, return_counts=True)
    if (counts > 1).any():
        dup_ids = set(np.unique(ds.unit_id)[counts > 1])
        report.add("duplicate_unit_id", "unit_id must be unique",
                   [i for i in range(ds.n) if ds.unit_id[i] in dup_ids])

    if ds.n == 0 or not (np.isfinite(ds.n_hat) and ds.n_hat > 0):
        report.add("n_hat_positive", "sum of phase-1 weights must be positive")
    if ds.fp_size is not None and not ds.fp_size > 0:
        report.add("fp_size_positive", "population size must be positive")

    if ds.design_type is DesignType.TYPE_II:
        report.add("cycle_required", "cycle required for TypeII", where(ds.cycle == ""))
        labelled = ds.cycle != ""
        cycles = sorted(set(ds.cycle[labelled]))
        designated = sorted(set(ds.cycle[labelled & ds.in_s2]))
        C = ds.cycles_total if ds.cycles_total is not None else len(cycles)
        B = ds.cycles_with_x2 if ds.cycles_with_x2 is not None else len(designated)
        if not C >= B >= 1:
            report.add("cycle_counts", f"need C >= B >= 1, got C={C}, B={B}")
        if len(cycles) != C:
            report.add("cycle_counts", f"{len(cycles)} cycles present but cycles_total={C}")
        if len(designated) != B:
            report.add("cycle_counts", f"{len(designated)} cycles carry x2 but cycles_with_x2={B}")
        in_designated = np.isin(ds.cycle, designated) & labelled
        report.add("cycle_membership", "in_s2 must hold exactly for rows of the designated cycles",
                   where(labelled & (in_designated != ds.in_s2)))
    return report


# ---------------------------------------------------------------------------
# Type II assembly


def combine_cycles(cycle_samples, C: int, designated_x2_cycles) -> TwoPhaseDataset:
    """Pool C independent cycle samples into one Type II two-phase dataset.

    Each element of ``cycle_samples`` is ``(label, dataset)`` where the
    dataset's ``w1`` holds the per-cycle weight w^(c). Rows get
    w1 = w^(c)/C; rows of the designated cycles form s2 with w2 = C/B, so the
    combined weight is w^(c)/B. x2 is blanked outside the designated cycles.
    """
    cycle_samples = list(cycle_samples)
    labels = [str(label) for label, _ in cycle_samples]
    designated = {str(c) for c in designated_x2_cycles}
    if len(cycle_samples) != C:
        raise DesignError(f"C={C} but {len(cycle_samples)} cycle samples supplied")
    if len(set(labels)) != len(labels):
        raise DesignError("cycle labels must be distinct")
    unknown = designated - set(labels)
    if unknown:
        raise DesignError(f"unknown designated cycle label(s): {sorted(unknown)}")
    B = len(designated)
    if B < 1:
        raise DesignError("at least one designated cycle is required")

    parts = []
    for label, ds in cycle_samples:
        s2 = label in designated
        n = ds.n
        parts.append(dict(
            unit_id=np.char.add(f"{label}:", ds.unit_id),
            stratum=ds.stratum,
            psu=ds.psu,
            cycle=np.full(n, label),
            w1=ds.w1 / C,
            in_s2=np.full(n, s2),
            w2=np.full(n, C / B if s2 else np.nan),
            y=ds.y,
            x1=ds.x1,
            x2=ds.x2 if s2 else np.full(n, np.nan),
            z=ds.z,
            aux=ds.aux,
        ))
    first = cycle_samples[0][1]
    aux_keys = list(first.aux)
    return TwoPhaseDataset(
        unit_id=np.concatenate([p["unit_id"] for p in parts]),
        stratum=np.concatenate([p["stratum"] for p in parts]),
        psu=np.concatenate([p["psu"] for p in parts]),
        cycle=np.concatenate([p["cycle"] for p in parts]),
        w1=np.concatenate([p["w1"] for p in parts]),
        in_s2=np.concatenate([p["in_s2"] for p in parts]),
        w2=np.concatenate([p["w2"] for p in parts]),
        y=np.concatenate([p["y"] for p in parts]),
        x1=np.vstack([p["x1"] for p in parts]),
        x2=np.concatenate([p["x2"] for p in parts]),
        z=np.vstack([p["z"] for p in parts]),
        x1_names=first.x1_names,
        z_names=first.z_names,
        aux={k: np.concatenate([p["aux"][k] for p in parts]) for k in aux_keys},
        design_type=DesignType.TYPE_II,
        phase2_strata_rule=Phase2StrataRule.CYCLE_SUBSET,
        fp_size=first.fp_size,
        cycles_total=C,
        cycles_with_x2=B,
    )


# ---------------------------------------------------------------------------
# design frame


@dataclass(frozen=True, eq=False)
class DesignFrame:
    """Phase-1 strata/PSU layout plus per-row integer codes.

    ``row_stratum`` and ``row_psu`` index into ``strata`` and the global PSU
    list; ``psu_stratum`` maps each PSU to its stratum.
    """

    strata: list
    row_stratum: np.ndarray
    row_psu: np.ndarray
    psu_stratum: np.ndarray

    @property
    def total_strata(self) -> int:
        return len(self.strata)

    @property
    def total_psus(self) -> int:
        return len(self.psu_stratum)

    @property
    def df(self) -> int:
        return self.total_psus - self.total_strata

    @property
    def psu_counts(self) -> dict:
        return {label: m for label, _, m in self.strata}


def stratum_keys(dataset: TwoPhaseDataset) -> np.ndarray:
    """Phase-1 stratum labels; Type II prefixes the cycle so cycles act as strata."""
    if dataset.design_type is DesignType.TYPE_II:
        return np.char.add(np.char.add(dataset.cycle, "|"), dataset.stratum)
    return dataset.stratum


def design_frame(dataset: TwoPhaseDataset) -> DesignFrame:
    keys = stratum_keys(dataset)
    strata_labels, row_stratum = np.unique(keys, return_inverse=True)
    psu_keys = np.char.add(np.char.add(keys, "#"), dataset.psu)
    psu_labels, row_psu = np.unique(psu_keys, return_inverse=True)
    psu_stratum = np.zeros(len(psu_labels), dtype=int)
    psu_stratum[row_psu] = row_stratum
    strata = []
    for h, label in enumerate(strata_labels):
        members = [str(p).split("#", 1)[1] for p in psu_labels[psu_stratum == h]]
        strata.append((str(label), members, len(members)))
    frame = DesignFrame(strata, row_stratum.ravel(), row_psu.ravel(), psu_stratum)
    if any(m < 1 for _, _, m in strata):
        raise DesignError("stratum with zero PSUs")
    if frame.df < 1:
        raise DesignError(
            f"design degrees of freedom {frame.df} < 1 "
            f"({frame.total_psus} PSUs in {frame.total_strata} strata)"
        )
    return frame


# ---------------------------------------------------------------------------
# CSV


class CsvFormatError(DataError):
    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


def _parse_float(text: str, column: str, row: int, optional: bool) -> float:
    text = text.strip()
    if text in NA_TOKENS:
        if optional:
            return np.nan
        raise CsvFormatError(f"missing value in column {column!r}", row)
    try:
        return float(text)
    except ValueError:
        raise CsvFormatError(f"unparsable number {text!r} in column {column!r}", row) from None


def read_csv(path, design_type=None, fp_size=None, cycles_total=None, cycles_with_x2=None) -> TwoPhaseDataset:
    """Load a dataset from the CSV schema.

    Columns ``x1_*`` and ``z_*`` are picked up in numeric order; any other
    unknown column becomes an aux column. Lines starting with ``#`` are
    comments. Empty cells and ``NA`` count as absent only where a value may
    be absent (w2, x2, cycle, aux columns).
    """
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames is None:
        raise CsvFormatError("empty file or missing header")
    header = [h.strip() for h in reader.fieldnames]
    missing = [c for c in ("unit_id", "stratum", "psu", "w1", "in_s2", "y") if c not in header]
    if missing:
        raise CsvFormatError(f"missing required column(s): {', '.join(missing)}")
    order = lambda c: int(c.rsplit("_", 1)[1])  # noqa: E731
    x1_cols = sorted((c for c in header if _X1_RE.match(c)), key=order)
    z_cols = sorted((c for c in header if _Z_RE.match(c)), key=order)
    aux_cols = [c for c in header if c not in _CORE_COLUMNS and c not in x1_cols and c not in z_cols]

    cols = {c: [] for c in header}
    for i, rec in enumerate(reader):
        if None in rec or any(v is None for v in rec.values()):
            raise CsvFormatError("wrong number of fields", i)
        rec = {k.strip(): v for k, v in rec.items()}
        for c in header:
            cols[c].append(rec[c])
    n = len(cols["unit_id"])

    def numeric(c, optional):
        return np.array([_parse_float(v, c, i, optional) for i, v in enumerate(cols[c])])

    in_s2 = []
    for i, v in enumerate(cols["in_s2"]):
        v = v.strip()
        if v not in ("0", "1"):
            raise CsvFormatError(f"in_s2 must be 0 or 1, got {v!r}", i)
        in_s2.append(v == "1")
    cycle = [v.strip() for v in cols["cycle"]] if "cycle" in cols else None
    if design_type is None:
        design_type = DesignType.TYPE_II if cycle and any(cycle) else DesignType.TYPE_I
    design_type = DesignType(design_type)
    return TwoPhaseDataset(
        unit_id=[v.strip() for v in cols["unit_id"]],
        stratum=[v.strip() for v in cols["stratum"]],
        psu=[v.strip() for v in cols["psu"]],
        cycle=cycle,
        w1=numeric("w1", False),
        in_s2=in_s2,
        w2=numeric("w2", True) if "w2" in cols else np.full(n, np.nan),
        y=numeric("y", False),
        x1=np.column_stack([numeric(c, True) for c in x1_cols]) if x1_cols else np.empty((n, 0)),
        x2=numeric("x2", True) if "x2" in cols else np.full(n, np.nan),
        z=np.column_stack([numeric(c, True) for c in z_cols]) if z_cols else np.empty((n, 0)),
        x1_names=x1_cols,
        z_names=z_cols,
        aux={c: numeric(c, True) for c in aux_cols},
        design_type=design_type,
        phase2_strata_rule=(Phase2StrataRule.CYCLE_SUBSET if design_type is DesignType.TYPE_II
                            else Phase2StrataRule.PHASE1_PSU_AS_STRATUM),
        fp_size=fp_size,
        cycles_total=cycles_total,
        cycles_with_x2=cycles_with_x2,
    )


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_csv(dataset: TwoPhaseDataset, fh, header_lines=()) -> None:
    """Write ``dataset`` to an open text handle in the CSV schema."""
    ds = dataset
    for line in header_lines:
        fh.write(f"# {line}\n")
    cols = ["unit_id", "stratum", "psu", "cycle", "w1", "in_s2", "w2", "y",
            *ds.x1_names, *ds.z_names, "x2", *ds.aux]
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(cols)
    for i in range(ds.n):
        writer.writerow([
            ds.unit_id[i], ds.stratum[i], ds.psu[i], ds.cycle[i],
            _fmt(ds.w1[i]), int(ds.in_s2[i]), _fmt(ds.w2[i]), _fmt(ds.y[i]),
            *(_fmt(v) for v in ds.x1[i]), *(_fmt(v) for v in ds.z[i]),
            _fmt(ds.x2[i]), *(_fmt(ds.aux[k][i]) for k in ds.aux),
        ])
