"""Relational data model, ingestion, validation gates and outcome labels.

Five core tables describe a programme: students, enrolments, courses,
curricula and the term calendar. Two optional tables complete the picture:
``areas.csv`` (postcode/year indicators used by the pre-entry extractor) and
``graduations.csv`` (student_id, term_index), consumed only by the label
builder.

Validation separates *hard* violations (type, range, referential, temporal,
completeness), which fail the report and halt the pipeline, from *soft*
warnings for values that are typed and in range but implausible.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

STATES = ("passed", "failed", "dropped")
# "libre" is the local name for a withdrawal without sitting the exam.
STATE_ALIASES = {"libre": "dropped", "withdrawn": "dropped"}
WORK_STATES = ("yes", "no", "unknown")
SCHOOL_TYPES = ("public", "private", "technical")
LABEL_BASES = ("graduated", "still_enrolled", "departed")

CORE_TABLES = ("students", "enrolments", "courses", "curricula", "calendar")
OPTIONAL_TABLES = ("areas", "graduations")
RULES = ("type", "range", "referential", "temporal", "completeness")


class IngestionError(Exception):
    """An input file is missing, unreadable or not parseable as CSV."""


class ValidationFailed(Exception):
    """Raised when a downstream stage is handed a dataset that failed validation."""

    def __init__(self, report: "ValidationReport"):
        super().__init__(f"dataset failed validation with {report.n_violations} violation(s)")
        self.report = report


@dataclass(frozen=True)
class Column:
    name: str
    kind: str  # str | int | float | bool | enum
    required: bool = False
    choices: tuple = ()
    lo: float | None = None
    hi: float | None = None
    soft_lo: float | None = None
    soft_hi: float | None = None


def student_schema(grade_scale=(0.0, 10.0)):
    lo, hi = grade_scale
    return (
        Column("student_id", "str", required=True),
        Column("cohort_year", "int", required=True, lo=1900, hi=2200),
        Column("entry_term", "int", required=True, lo=0),
        Column("age_at_entry", "float", required=True, lo=14, hi=90, soft_hi=65),
        Column("gender", "str"),
        Column("works_at_entry", "enum", choices=WORK_STATES),
        Column("hs_gpa", "float", lo=lo, hi=hi),
        Column("postcode", "str"),
        Column("parental_education", "int", lo=0, hi=6),
        Column("siblings_university", "bool"),
        Column("secondary_school_type", "enum", choices=SCHOOL_TYPES),
        Column("distance_to_campus_km", "float", lo=0, soft_hi=1000),
    )


def enrolment_schema(grade_scale=(0.0, 10.0)):
    lo, hi = grade_scale
    return (
        Column("student_id", "str", required=True),
        Column("course_id", "str", required=True),
        Column("term_index", "int", required=True, lo=0),
        Column("state", "enum", required=True, choices=STATES + tuple(STATE_ALIASES)),
        Column("grade", "float", lo=lo, hi=hi),
    )


SCHEMAS = {
    "courses": (
        Column("course_id", "str", required=True),
        Column("curriculum_id", "str", required=True),
        Column("nominal_term", "int", required=True, lo=1),
        Column("is_core", "bool", required=True),
    ),
    # Long format of the term-offset -> cumulative expected courses map.
    "curricula": (
        Column("curriculum_id", "str", required=True),
        Column("term_offset", "int", required=True, lo=0),
        Column("expected_courses", "int", required=True, lo=0),
    ),
    "calendar": (
        Column("term_index", "int", required=True, lo=0),
        Column("calendar_year", "int", required=True, lo=1900, hi=2200),
        Column("season", "str", required=True),
        Column("inflation_yoy", "float", lo=-1.0, soft_hi=5.0),
        Column("strike_count_24m", "int", lo=0),
    ),
    "areas": (
        Column("postcode", "str", required=True),
        Column("year", "int", required=True, lo=1900, hi=2200),
        Column("deprivation_index", "float", lo=0, hi=1),
        Column("unemployment", "float", lo=0, hi=1),
        Column("informality", "float", lo=0, hi=1),
        Column("poverty", "float", lo=0, hi=1),
    ),
    "graduations": (
        Column("student_id", "str", required=True),
        Column("term_index", "int", required=True, lo=0),
    ),
}


def schema_for(table: str, grade_scale=(0.0, 10.0)):
    if table == "students":
        return student_schema(grade_scale)
    if table == "enrolments":
        return enrolment_schema(grade_scale)
    return SCHEMAS[table]


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def read_table(path: Path) -> pd.DataFrame:
    """Read one CSV as all-string columns; the empty string means missing."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"missing input file: {path}")
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except (UnicodeDecodeError, csv.Error, OSError) as exc:
        raise IngestionError(f"unreadable input file {path}: {exc}") from exc
    if not rows or not any(h.strip() for h in rows[0]):
        raise IngestionError(f"{path} has no header row")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise IngestionError(f"{path} has duplicate column names")
    body = rows[1:]
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise IngestionError(
                f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}"
            )
    return pd.DataFrame(body, columns=header, dtype=object)


def read_raw_tables(directory) -> dict[str, pd.DataFrame]:
    directory = Path(directory)
    tables = {name: read_table(directory / f"{name}.csv") for name in CORE_TABLES}
    for name in OPTIONAL_TABLES:
        path = directory / f"{name}.csv"
        if path.exists():
            tables[name] = read_table(path)
    return tables


# ---------------------------------------------------------------------------
# Cell parsing
# ---------------------------------------------------------------------------

_MISSING = object()
_BAD = object()


def _is_missing(value) -> bool:
    if value is None:
        return True
    if isinstance(value, float) and math.isnan(value):
        return True
    if value is pd.NA or value is pd.NaT:
        return True
    return isinstance(value, str) and value.strip() == ""


def parse_cell(value, col: Column):
    """Return the parsed value, ``_MISSING`` or ``_BAD``."""
    if _is_missing(value):
        return _MISSING
    kind = col.kind
    if kind == "str":
        return str(value).strip()
    if kind == "enum":
        text = str(value).strip().lower()
        return text if text in col.choices else _BAD
    if kind == "bool":
        if isinstance(value, (bool, np.bool_)):
            return bool(value)
        text = str(value).strip().lower()
        if text in ("true", "1", "yes"):
            return True
        if text in ("false", "0", "no"):
            return False
        return _BAD
    if kind == "int":
        if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
            return int(value)
        try:
            f = float(str(value).strip())
        except ValueError:
            return _BAD
        if not math.isfinite(f) or f != int(f):
            return _BAD
        return int(f)
    if kind == "float":
        try:
            f = float(value) if not isinstance(value, str) else float(value.strip())
        except (TypeError, ValueError):
            return _BAD
        return f if math.isfinite(f) else _BAD
    raise ValueError(f"unknown column kind {kind!r}")


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass
class ValidationReport:
    violations: dict[str, list[dict]] = field(default_factory=lambda: {r: [] for r in RULES})
    warnings: list[dict] = field(default_factory=list)
    missingness: dict[str, dict] = field(default_factory=dict)

    @property
    def n_violations(self) -> int:
        return sum(len(v) for v in self.violations.values())

    @property
    def passed(self) -> bool:
        return self.n_violations == 0

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def add(self, rule, table, row, column, value, message):
        self.violations[rule].append(
            {"table": table, "row": row, "column": column, "value": _jsonable(value), "message": message}
        )

    def warn(self, table, row, column, value, message):
        self.warnings.append(
            {"table": table, "row": row, "column": column, "value": _jsonable(value), "message": message}
        )

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "n_violations": self.n_violations,
            "violation_counts": {r: len(v) for r, v in self.violations.items()},
            "violations": self.violations,
            "warnings": self.warnings,
            "missingness": self.missingness,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _jsonable(value):
    if value is _MISSING or _is_missing(value):
        return None
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, (str, int, float, bool)):
        return value
    return str(value)


def profile_missingness(tables: dict[str, pd.DataFrame]) -> dict[str, dict]:
    """Fraction of missing cells per column, per table.

    An empty table reports every column at 0.0 and ``n_rows == 0``.
    """
    profile = {}
    for name in sorted(tables):
        df = tables[name]
        n = len(df)
        cols = {}
        for col in df.columns:
            if n == 0:
                cols[col] = 0.0
            else:
                missing = sum(1 for v in df[col].tolist() if _is_missing(v))
                cols[col] = missing / n
        profile[name] = {"n_rows": n, "empty": n == 0, "columns": cols}
    return profile


def _parse_table(report, name, df, schema):
    """Type/range/completeness checks; returns list of parsed row dicts."""
    parsed = []
    present = set(df.columns)
    for col in schema:
        if col.name not in present and col.required:
            report.add("completeness", name, None, col.name, None, "required column absent")
    records = df.to_dict("records")
    for i, rec in enumerate(records):
        row = {}
        for col in schema:
            if col.name not in present:
                row[col.name] = None
                continue
            raw = rec[col.name]
            val = parse_cell(raw, col)
            if val is _MISSING:
                if col.required:
                    report.add("completeness", name, i, col.name, None, "essential field is missing")
                row[col.name] = None
                continue
            if val is _BAD:
                report.add("type", name, i, col.name, raw, f"expected {col.kind}"
                           + (f" in {list(col.choices)}" if col.choices else ""))
                row[col.name] = None
                continue
            if col.kind in ("int", "float"):
                if (col.lo is not None and val < col.lo) or (col.hi is not None and val > col.hi):
                    report.add("range", name, i, col.name, val,
                               f"outside plausible range [{col.lo}, {col.hi}]")
                    row[col.name] = None
                    continue
                if (col.soft_lo is not None and val < col.soft_lo) or (
                    col.soft_hi is not None and val > col.soft_hi
                ):
                    report.warn(name, i, col.name, val, "implausible but admissible value")
            row[col.name] = val
        parsed.append(row)
    return parsed


def validate_dataset(tables: dict[str, pd.DataFrame], grade_scale=(0.0, 10.0)) -> ValidationReport:
    """Run every hard and soft rule over the tables.

    ``tables`` may hold raw string frames (from :func:`read_raw_tables`) or
    typed frames (from :class:`Dataset`); cells are parsed either way.
    """
    report = ValidationReport()
    report.missingness = profile_missingness(tables)
    for name in CORE_TABLES:
        if name not in tables:
            report.add("completeness", name, None, None, None, "required table absent")
    parsed = {}
    for name, df in tables.items():
        if name not in CORE_TABLES + OPTIONAL_TABLES:
            continue
        parsed[name] = _parse_table(report, name, df, schema_for(name, grade_scale))

    students = parsed.get("students", [])
    enrolments = parsed.get("enrolments", [])
    courses = parsed.get("courses", [])
    curricula = parsed.get("curricula", [])
    calendar = parsed.get("calendar", [])

    # Key uniqueness is reported under referential integrity.
    def unique(table, rows, key):
        seen = {}
        for i, r in enumerate(rows):
            k = tuple(r[c] for c in key)
            if any(v is None for v in k):
                continue
            if k in seen:
                report.add("referential", table, i, "+".join(key), list(k),
                           f"duplicate key (first seen at row {seen[k]})")
            else:
                seen[k] = i

    unique("students", students, ("student_id",))
    unique("enrolments", enrolments, ("student_id", "course_id", "term_index"))
    unique("courses", courses, ("course_id",))
    unique("curricula", curricula, ("curriculum_id", "term_offset"))
    unique("calendar", calendar, ("term_index",))

    entry = {r["student_id"]: r["entry_term"] for r in students if r["student_id"] is not None}
    course_ids = {r["course_id"] for r in courses if r["course_id"] is not None}
    curriculum_ids = {r["curriculum_id"] for r in curricula if r["curriculum_id"] is not None}
    terms = {r["term_index"] for r in calendar if r["term_index"] is not None}

    first_term: dict[str, int] = {}
    for i, r in enumerate(enrolments):
        sid, cid, t, state = r["student_id"], r["course_id"], r["term_index"], r["state"]
        if sid is not None and sid not in entry:
            report.add("referential", "enrolments", i, "student_id", sid, "enrolment references unknown student")
            continue
        if cid is not None and cid not in course_ids:
            report.add("referential", "enrolments", i, "course_id", cid, "enrolment references unknown course")
        if t is not None and terms and t not in terms:
            report.add("referential", "enrolments", i, "term_index", t, "term not present in calendar")
        if sid is not None and t is not None and entry.get(sid) is not None:
            if t < entry[sid]:
                report.add("temporal", "enrolments", i, "term_index", t,
                           f"enrolment precedes student's entry term {entry[sid]}")
            first_term[sid] = min(t, first_term.get(sid, t))
        if state is not None and STATE_ALIASES.get(state, state) == "dropped" and r["grade"] is not None:
            report.add("completeness", "enrolments", i, "grade", r["grade"],
                       "dropped enrolment must not carry a grade")

    for sid, t in first_term.items():
        if entry.get(sid) is not None and t != entry[sid]:
            report.warn("students", None, "entry_term", entry[sid],
                        f"student {sid}: earliest enrolment is term {t}, not the declared entry term")

    for i, r in enumerate(students):
        if r["entry_term"] is not None and terms and r["entry_term"] not in terms:
            report.add("referential", "students", i, "entry_term", r["entry_term"], "entry term not in calendar")

    for i, r in enumerate(courses):
        if r["curriculum_id"] is not None and r["curriculum_id"] not in curriculum_ids:
            report.add("referential", "courses", i, "curriculum_id", r["curriculum_id"],
                       "course references unknown curriculum")

    by_curr: dict[str, list] = {}
    for i, r in enumerate(curricula):
        if r["curriculum_id"] is None or r["term_offset"] is None or r["expected_courses"] is None:
            continue
        by_curr.setdefault(r["curriculum_id"], []).append((r["term_offset"], r["expected_courses"], i))
    for cid, entries in by_curr.items():
        entries.sort()
        for (o1, c1, _), (o2, c2, i2) in zip(entries, entries[1:]):
            if c2 < c1:
                report.add("temporal", "curricula", i2, "expected_courses", c2,
                           f"cumulative expectation decreases between offsets {o1} and {o2}")

    cal = sorted((r["term_index"], r["calendar_year"], i) for i, r in enumerate(calendar)
                 if r["term_index"] is not None and r["calendar_year"] is not None)
    for (t1, y1, _), (t2, y2, i2) in zip(cal, cal[1:]):
        if y2 < y1:
            report.add("temporal", "calendar", i2, "calendar_year", y2,
                       f"term {t2} maps to an earlier year than term {t1}")

    for i, r in enumerate(parsed.get("graduations", [])):
        sid, t = r["student_id"], r["term_index"]
        if sid is not None and sid not in entry:
            report.add("referential", "graduations", i, "student_id", sid, "graduation references unknown student")
        elif sid is not None and t is not None and entry.get(sid) is not None and t < entry[sid]:
            report.add("temporal", "graduations", i, "term_index", t, "graduation precedes entry")
    return report


# ---------------------------------------------------------------------------
# Typed dataset
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """Typed, validated tables. Frames are treated as immutable."""

    students: pd.DataFrame
    enrolments: pd.DataFrame
    courses: pd.DataFrame
    curricula: pd.DataFrame
    calendar: pd.DataFrame
    areas: pd.DataFrame | None = None
    graduations: pd.DataFrame | None = None

    def tables(self) -> dict[str, pd.DataFrame]:
        out = {name: getattr(self, name) for name in CORE_TABLES}
        for name in OPTIONAL_TABLES:
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        return out

    def copy(self) -> "Dataset":
        return Dataset(**{k: (None if v is None else v.copy()) for k, v in self.__dict__.items()})

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, df in self.tables().items():
            write_csv(df, directory / f"{name}.csv")


def write_csv(df: pd.DataFrame, path) -> None:
    """Deterministic CSV: LF line endings, shortest round-trip floats, empty = missing."""
    df.to_csv(path, index=False, lineterminator="\n", na_rep="")


def _typed_frame(df: pd.DataFrame, schema) -> pd.DataFrame:
    out = {}
    present = set(df.columns)
    for col in schema:
        values = df[col.name].tolist() if col.name in present else [None] * len(df)
        parsed = [parse_cell(v, col) for v in values]
        parsed = [None if (p is _MISSING or p is _BAD) else p for p in parsed]
        if col.kind == "int":
            if col.required:
                out[col.name] = np.asarray(parsed, dtype=np.int64)
            else:
                out[col.name] = np.asarray([np.nan if p is None else p for p in parsed], dtype=float)
        elif col.kind == "float":
            out[col.name] = np.asarray([np.nan if p is None else p for p in parsed], dtype=float)
        elif col.kind == "bool" and col.required:
            out[col.name] = np.asarray(parsed, dtype=bool)
        else:
            out[col.name] = pd.Series(parsed, dtype=object).to_numpy()
    return pd.DataFrame(out, index=pd.RangeIndex(len(df)))


def coerce_dataset(tables: dict[str, pd.DataFrame], grade_scale=(0.0, 10.0)) -> Dataset:
    """Parse validated tables into typed frames; aliases such as "libre" are mapped."""
    typed = {name: _typed_frame(tables[name], schema_for(name, grade_scale)) for name in CORE_TABLES}
    typed["enrolments"]["state"] = [STATE_ALIASES.get(s, s) for s in typed["enrolments"]["state"]]
    works = typed["students"]["works_at_entry"]
    typed["students"]["works_at_entry"] = [("unknown" if w is None else w) for w in works]
    for name in OPTIONAL_TABLES:
        if name in tables:
            typed[name] = _typed_frame(tables[name], schema_for(name, grade_scale))
    return Dataset(**typed)


def load_dataset(directory, grade_scale=(0.0, 10.0)) -> tuple[Dataset | None, ValidationReport]:
    """Read, validate and (if valid) type the tables in ``directory``."""
    raw = read_raw_tables(directory)
    report = validate_dataset(raw, grade_scale)
    if not report.passed:
        return None, report
    return coerce_dataset(raw, grade_scale), report


# ---------------------------------------------------------------------------
# Outcome labels
# ---------------------------------------------------------------------------

def derive_outcome_labels(students: pd.DataFrame, enrolments: pd.DataFrame,
                          graduations: pd.DataFrame | None, horizon_terms: int,
                          grace_terms: int) -> pd.DataFrame:
    """Binary attrition label per student over the outcome horizon.

    The horizon ends at ``entry_term + horizon_terms``. A graduation on or
    before that term yields ``graduated``; otherwise a student whose last
    enrolment falls within ``grace_terms`` of the horizon end is
    ``still_enrolled``; everyone else (including students with no
    enrolments) has ``departed`` and carries ``attrition_flag = 1``.
    """
    if horizon_terms <= 0 or grace_terms < 0:
        raise ValueError("horizon_terms must be positive and grace_terms non-negative")
    entry = dict(zip(students["student_id"], students["entry_term"]))
    end = {sid: int(t0) + horizon_terms for sid, t0 in entry.items()}
    grad: dict[str, int] = {}
    if graduations is not None and len(graduations):
        for sid, t in zip(graduations["student_id"], graduations["term_index"]):
            if sid in end and t <= end[sid]:
                grad[sid] = min(int(t), grad.get(sid, int(t)))
    last: dict[str, int] = {}
    for sid, t in zip(enrolments["student_id"], enrolments["term_index"]):
        if sid in end and t <= end[sid]:
            t = int(t)
            if t > last.get(sid, -1):
                last[sid] = t
    rows = []
    for sid in students["student_id"]:
        if sid in grad:
            basis = "graduated"
        elif sid in last and last[sid] >= end[sid] - grace_terms:
            basis = "still_enrolled"
        else:
            basis = "departed"
        rows.append((sid, int(basis == "departed"), basis, horizon_terms))
    return pd.DataFrame(rows, columns=["student_id", "attrition_flag", "label_basis", "horizon_terms"])


LABEL_COLUMNS = frozenset({"attrition_flag", "label_basis", "horizon_terms", "graduation_term"})
