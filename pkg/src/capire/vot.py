"""Observation-window slicing, feature eligibility audit and the leakage probe.

The window predicate is relative to each student's entry term: an enrolment
at ``term_index`` is visible iff ``0 <= term_index - entry_term < cutoff``.
Nothing outside the window reaches an extractor.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import pandas as pd

from .domain import LABEL_COLUMNS, Dataset


class ConfigError(ValueError):
    """Invalid or inconsistent pipeline configuration."""


class UndeclaredTimeBound(ConfigError):
    """A dictionary entry does not say up to when its inputs are observed."""


@dataclass(frozen=True)
class VotConfig:
    cutoff: int = 3
    horizon: int = 12
    grace: int = 2
    unit: str = "terms"
    label_policy: str = "binary_attrition"

    def __post_init__(self):
        if self.unit not in ("terms", "credits"):
            raise ConfigError(f"unknown VOT unit {self.unit!r}")
        if self.unit == "credits":
            raise NotImplementedError("credit-based observation windows are not implemented; use unit='terms'")
        if not (0 < self.cutoff < self.horizon):
            raise ConfigError("VOT requires 0 < cutoff < horizon")
        if self.grace < 0:
            raise ConfigError("grace must be >= 0")
        if int(self.cutoff) != self.cutoff:
            raise ConfigError("cutoff must be a whole number of terms")

    @classmethod
    def from_dict(cls, d: dict | None) -> "VotConfig":
        d = dict(d or {})
        known = {"cutoff", "horizon", "grace", "unit", "label_policy"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown vot keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {"cutoff": self.cutoff, "horizon": self.horizon, "grace": self.grace,
                "unit": self.unit, "label_policy": self.label_policy}


@dataclass(frozen=True)
class WindowedTrajectory:
    student_id: str
    entry_term: int
    course_ids: tuple = ()
    rel_terms: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    states: tuple = ()
    grades: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_attempts(self) -> int:
        return len(self.course_ids)

    @property
    def active_terms(self) -> np.ndarray:
        return np.unique(self.rel_terms)

    def is_empty(self) -> bool:
        return len(self.course_ids) == 0

    def key(self) -> tuple:
        """Hashable content, used by equality checks in tests."""
        grades = tuple(None if np.isnan(g) else float(g) for g in self.grades)
        return (self.student_id, self.entry_term, self.course_ids,
                tuple(int(t) for t in self.rel_terms), self.states, grades)


def _window_from_rows(student_id, entry_term, course_ids, terms, states, grades, cutoff):
    rel = np.asarray(terms, dtype=np.int64) - int(entry_term)
    keep = (rel >= 0) & (rel < cutoff)
    idx = np.flatnonzero(keep)
    # canonical order: term, then course id
    order = sorted(idx, key=lambda i: (rel[i], course_ids[i]))
    return WindowedTrajectory(
        student_id=student_id,
        entry_term=int(entry_term),
        course_ids=tuple(course_ids[i] for i in order),
        rel_terms=rel[order] if order else np.zeros(0, dtype=np.int64),
        states=tuple(states[i] for i in order),
        grades=np.asarray([grades[i] for i in order], dtype=float),
    )


def slice_trajectory(student, enrolments: pd.DataFrame, vot: VotConfig) -> WindowedTrajectory:
    """Window one student's enrolments at the VOT cutoff.

    ``student`` is a mapping with ``student_id`` and ``entry_term``;
    ``enrolments`` may hold other students' rows, which are ignored.
    """
    sid = student["student_id"]
    rows = enrolments[enrolments["student_id"] == sid]
    return _window_from_rows(sid, student["entry_term"], rows["course_id"].tolist(),
                             rows["term_index"].to_numpy(), rows["state"].tolist(),
                             rows["grade"].to_numpy(dtype=float), vot.cutoff)


def build_windows(dataset: Dataset, vot: VotConfig) -> dict[str, WindowedTrajectory]:
    """Window every student in one pass over the enrolment table."""
    enr = dataset.enrolments
    entry = dict(zip(dataset.students["student_id"], dataset.students["entry_term"].astype(int)))
    sids = enr["student_id"].to_numpy()
    terms = enr["term_index"].to_numpy(dtype=np.int64)
    courses = enr["course_id"].to_numpy()
    states = enr["state"].to_numpy()
    grades = enr["grade"].to_numpy(dtype=float)
    t0 = np.fromiter((entry.get(s, -10**9) for s in sids), dtype=np.int64, count=len(sids))
    rel = terms - t0
    inside = np.flatnonzero((rel >= 0) & (rel < vot.cutoff))
    groups: dict[str, list[int]] = {}
    for i in inside:
        groups.setdefault(sids[i], []).append(i)
    windows = {}
    for sid, e in entry.items():
        idx = groups.get(sid)
        if not idx:
            windows[sid] = WindowedTrajectory(student_id=sid, entry_term=e)
            continue
        idx.sort(key=lambda i: (rel[i], courses[i]))
        windows[sid] = WindowedTrajectory(
            student_id=sid,
            entry_term=e,
            course_ids=tuple(courses[idx]),
            rel_terms=rel[idx],
            states=tuple(states[idx]),
            grades=grades[idx],
        )
    return windows


# ---------------------------------------------------------------------------
# Eligibility audit
# ---------------------------------------------------------------------------

TAGS = ("vot_admissible", "post_vot", "restricted")
STATIC_BOUNDS = ("static", "t0", "vot")
LABEL_SOURCES = frozenset(LABEL_COLUMNS) | {"graduations", "outcome", "labels"}

_OUTCOME_NAME = re.compile(r"(^final_|^ever_|_at_graduation$|^dropout|^attrition|^graduat)")
_UNWINDOWED_NAME = re.compile(r"^(total_|lifetime_|overall_)")
_WINDOW_MARK = re.compile(r"(_up_to_term_\d+|_in_window|_at_vot|_t0$)")


@dataclass(frozen=True)
class EligibilityTag:
    feature_name: str
    tag: str
    reason: str


def _references_label(sources) -> bool:
    for src in sources:
        table, _, column = str(src).partition(".")
        if table in LABEL_SOURCES or column in LABEL_SOURCES or src in LABEL_SOURCES:
            return True
    return False


def classify_feature(entry: dict, vot: VotConfig) -> EligibilityTag:
    name = entry.get("name")
    if not name:
        raise ConfigError("dictionary entry without a name")
    if "time_bound" not in entry or entry["time_bound"] is None:
        raise UndeclaredTimeBound(f"feature {name!r} declares no time bound")
    bound = entry["time_bound"]
    sources = entry.get("source_fields") or []
    if _references_label(sources):
        return EligibilityTag(name, "restricted", "label-dependent feature construction")
    if bound in ("trajectory_end", "outcome"):
        return EligibilityTag(name, "restricted", "outcome-proximal")
    if bound == "full_history":
        return EligibilityTag(name, "post_vot", "temporal aggregation without windowing")
    if isinstance(bound, bool):
        raise ConfigError(f"feature {name!r}: time bound must be a term index or a keyword")
    if isinstance(bound, (int, float)):
        if bound >= vot.cutoff:
            return EligibilityTag(name, "post_vot",
                                  f"time bound term {bound} lies beyond the VOT cutoff ({vot.cutoff} terms)")
    elif bound not in STATIC_BOUNDS:
        raise ConfigError(f"feature {name!r}: unknown time bound {bound!r}")
    if _OUTCOME_NAME.search(name):
        return EligibilityTag(name, "restricted", "outcome-proximal (name pattern)")
    if _UNWINDOWED_NAME.search(name) and not _WINDOW_MARK.search(name):
        return EligibilityTag(name, "post_vot", "temporal aggregation without windowing (name pattern)")
    declared = entry.get("eligibility")
    if declared in ("post_vot", "restricted"):
        return EligibilityTag(name, declared, "declared in dictionary")
    return EligibilityTag(name, "vot_admissible", "observed within the window")


def audit_eligibility(dictionary: list[dict], vot: VotConfig) -> tuple[list[EligibilityTag], dict]:
    """Tag every dictionary entry and explain each decision.

    Raises :class:`UndeclaredTimeBound` for any entry lacking a time bound.
    """
    tags = [classify_feature(e, vot) for e in dictionary]
    names = [t.feature_name for t in tags]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate feature names in dictionary")
    report = {
        "vot": vot.to_dict(),
        "n_features": len(tags),
        "counts": {t: sum(1 for x in tags if x.tag == t) for t in TAGS},
        "decisions": [{"feature": t.feature_name, "tag": t.tag, "reason": t.reason,
                       "declared": e.get("eligibility")} for t, e in zip(tags, dictionary)],
        "excluded": [t.feature_name for t in tags if t.tag != "vot_admissible"],
    }
    return tags, report


# ---------------------------------------------------------------------------
# Leakage probe
# ---------------------------------------------------------------------------

def perturb_future(dataset: Dataset, vot: VotConfig, rng: np.random.Generator,
                   n_inject: int = 100, flip_outcomes: bool = True) -> Dataset:
    """Copy of ``dataset`` with events added or altered at or after the cutoff only.

    Injects ``n_inject`` enrolments at relative terms >= cutoff, re-draws the
    state of existing post-cutoff enrolments, and rewrites graduation records.
    """
    out = dataset.copy()
    students = out.students
    enr = out.enrolments
    cal_max = int(out.calendar["term_index"].max())
    active = sorted(set(enr["student_id"]))
    entry = dict(zip(students["student_id"], students["entry_term"].astype(int)))
    eligible = [s for s in active if entry[s] + vot.cutoff <= cal_max]
    courses = sorted(out.courses["course_id"])
    taken = set(zip(enr["student_id"], enr["course_id"], enr["term_index"].astype(int)))
    rows = []
    tries = 0
    while eligible and len(rows) < n_inject and tries < 50 * n_inject:
        tries += 1
        sid = eligible[rng.integers(len(eligible))]
        t = int(rng.integers(entry[sid] + vot.cutoff, cal_max + 1))
        cid = courses[rng.integers(len(courses))]
        if (sid, cid, t) in taken:
            continue
        taken.add((sid, cid, t))
        state = ("passed", "failed", "dropped")[rng.integers(3)]
        grade = np.nan if state == "dropped" else float(np.round(rng.uniform(1, 10), 2))
        rows.append({"student_id": sid, "course_id": cid, "term_index": t, "state": state, "grade": grade})
    if rows:
        enr = pd.concat([enr, pd.DataFrame(rows, columns=enr.columns).astype(enr.dtypes.to_dict())],
                        ignore_index=True)
    rel = enr["term_index"].to_numpy(dtype=np.int64) - enr["student_id"].map(entry).to_numpy(dtype=np.int64)
    late = np.flatnonzero(rel >= vot.cutoff)
    if len(late):
        pick = late[rng.random(len(late)) < 0.5]
        new_states = np.asarray(["passed", "failed", "dropped"], dtype=object)[rng.integers(3, size=len(pick))]
        states = enr["state"].to_numpy(dtype=object).copy()
        grades = enr["grade"].to_numpy(dtype=float).copy()
        states[pick] = new_states
        grades[pick] = np.where(new_states == "dropped", np.nan, np.round(rng.uniform(1, 10, len(pick)), 2))
        enr = enr.assign(state=states, grade=grades)
    out.enrolments = enr
    if flip_outcomes:
        grads = []
        for sid in sorted(entry):
            if rng.random() < 0.5:
                t = int(rng.integers(entry[sid] + vot.cutoff, max(entry[sid] + vot.cutoff, cal_max) + 1))
                grads.append((sid, t))
        out.graduations = pd.DataFrame(grads, columns=["student_id", "term_index"]).astype(
            {"term_index": np.int64})
    return out


def matrix_diff(a, b) -> dict:
    """Compare two feature matrices bit-for-bit; NaN equals NaN."""
    report = {"identical": True, "changed_columns": [], "changed_cells": 0,
              "rows_only_in_a": [], "rows_only_in_b": [], "columns_only_in_a": [], "columns_only_in_b": []}
    if list(a.columns) != list(b.columns):
        report["columns_only_in_a"] = sorted(set(a.columns) - set(b.columns))
        report["columns_only_in_b"] = sorted(set(b.columns) - set(a.columns))
        report["identical"] = False
    if list(a.student_ids) != list(b.student_ids):
        report["rows_only_in_a"] = sorted(set(a.student_ids) - set(b.student_ids))
        report["rows_only_in_b"] = sorted(set(b.student_ids) - set(a.student_ids))
        report["identical"] = False
    cols = [c for c in a.columns if c in set(b.columns)]
    rows = sorted(set(a.student_ids) & set(b.student_ids))
    ia = {s: i for i, s in enumerate(a.student_ids)}
    ib = {s: i for i, s in enumerate(b.student_ids)}
    ra = [ia[s] for s in rows]
    rb = [ib[s] for s in rows]
    ca = [list(a.columns).index(c) for c in cols]
    cb = [list(b.columns).index(c) for c in cols]
    va = a.values[np.ix_(ra, ca)]
    vb = b.values[np.ix_(rb, cb)]
    # bitwise comparison: distinguishes -0.0/0.0 and NaN payloads never arise here
    same = (va.view(np.uint64) == vb.view(np.uint64)) | (np.isnan(va) & np.isnan(vb))
    if not same.all():
        report["identical"] = False
        report["changed_cells"] = int((~same).sum())
        report["changed_columns"] = [cols[j] for j in np.flatnonzero(~same.all(axis=0))]
        report["changed_students"] = [rows[i] for i in np.flatnonzero(~same.all(axis=1))][:50]
    return report


def leakage_probe(pipeline_run_fn: Callable[[Dataset], object], dataset: Dataset, vot: VotConfig,
                  seed: int, n_inject: int = 100, flip_outcomes: bool = True,
                  baseline=None) -> tuple[bool, dict]:
    """Return ``(True, report)`` iff future-only perturbations leave the matrix unchanged.

    ``pipeline_run_fn`` maps a dataset to an object exposing ``student_ids``,
    ``columns`` and ``values``. ``baseline`` may carry a precomputed run on
    the unperturbed dataset.
    """
    rng = np.random.default_rng(seed)
    if baseline is None:
        baseline = pipeline_run_fn(dataset)
    perturbed = perturb_future(dataset, vot, rng, n_inject=n_inject, flip_outcomes=flip_outcomes)
    report = matrix_diff(baseline, pipeline_run_fn(perturbed))
    report["seed"] = seed
    report["n_injected"] = int(len(perturbed.enrolments) - len(dataset.enrolments))
    return report["identical"], report


def with_cutoff(vot: VotConfig, cutoff: int) -> VotConfig:
    return replace(vot, cutoff=cutoff)
