"""N1-N4 feature extractors, course friction and cross-level interactions.

Every extractor reads a :class:`~capire.vot.WindowedTrajectory` or data
anchored at the entry term; none of them sees the raw enrolment table.
Missing values are ``nan``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .domain import Dataset
from .vot import ConfigError, VotConfig, WindowedTrajectory, build_windows

NAN = float("nan")
ENTROPY_STATES = ("passed", "failed", "dropped", "not_attempted")
LEVELS = ("N1", "N2", "N3", "N4")
LEVEL_SIZES = {"N1": 12, "N2": 6, "N3": 16, "N4": 10}


class UndefinedFriction(ValueError):
    """IFC requested for a course with no attempts."""


def load_dictionary(path=None) -> dict:
    """Load the feature dictionary (the shipped one by default)."""
    if path is None:
        text = resources.files("capire").joinpath("data/feature_dictionary.json").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    doc = json.loads(text)
    if isinstance(doc, list):
        doc = {"version": "unversioned", "features": doc, "interactions": []}
    return doc


# ---------------------------------------------------------------------------
# Scalar formulas
# ---------------------------------------------------------------------------

def compute_ifc_course(attempted: int, dropped: int, failed: int, w1: float = 1.0, w2: float = 0.5) -> float:
    """Instructional friction of one course: ``w1*dropped/attempted + w2*failed/attempted``."""
    if attempted < 1:
        raise UndefinedFriction("friction is undefined for a course with no attempts")
    if dropped < 0 or failed < 0 or dropped + failed > attempted:
        raise ValueError("need 0 <= dropped + failed <= attempted")
    if w1 < 0 or w2 < 0:
        raise ValueError("friction weights must be non-negative")
    return w1 * dropped / attempted + w2 * failed / attempted


def compute_ifc_mean(course_ids, table: "CourseFrictionTable") -> float:
    """Unweighted mean IFC over the *distinct* courses attempted.

    Courses absent from the table (no training attempts) are skipped; no
    remaining course gives ``nan``.
    """
    values = [table.ifc[c] for c in sorted(set(course_ids)) if c in table.ifc]
    return math.fsum(values) / len(values) if values else NAN


def compute_state_entropy(state_counts: dict) -> float:
    """Shannon entropy in bits with ``0 log 0 = 0``; ``nan`` for an empty count."""
    counts = [c for c in state_counts.values() if c > 0]
    total = sum(counts)
    if total <= 0:
        return NAN
    h = 0.0
    for c in counts:
        p = c / total
        h -= p * math.log2(p)
    return h + 0.0  # normalise -0.0


def compute_load_trend(loads) -> float:
    """OLS slope of load on term position ``0..k-1``; ``nan`` below two terms."""
    y = np.asarray(loads, dtype=float)
    k = len(y)
    if k < 2:
        return NAN
    x = np.arange(k, dtype=float)
    xc = x - x.mean()
    return float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))


def compute_max_gap(active_terms) -> float:
    """Longest run of idle terms between consecutive active terms."""
    terms = np.asarray(active_terms)
    if len(terms) == 0:
        return NAN
    if len(terms) == 1:
        return 0.0
    return float(np.max(np.diff(terms) - 1))


def compute_velocity(completed: int, expected: int) -> float:
    if completed < 0 or expected < 0:
        raise ValueError("counts must be non-negative")
    if expected == 0:
        return NAN
    return completed / expected


def compute_regularity(active_terms) -> float:
    """Population std of the spacing between active terms (``nan`` below two)."""
    terms = np.asarray(active_terms)
    if len(terms) < 2:
        return NAN
    return float(np.std(np.diff(terms)))


# ---------------------------------------------------------------------------
# Course friction
# ---------------------------------------------------------------------------

@dataclass
class CourseFrictionTable:
    attempted: dict = field(default_factory=dict)
    dropped: dict = field(default_factory=dict)
    failed: dict = field(default_factory=dict)
    ifc: dict = field(default_factory=dict)
    is_filter: dict = field(default_factory=dict)
    w1: float = 1.0
    w2: float = 0.5
    threshold: float = 0.5

    def rows(self):
        for c in sorted(self.ifc):
            yield (c, self.attempted[c], self.dropped[c], self.failed[c], self.ifc[c], self.is_filter[c])

    def to_records(self) -> list[dict]:
        keys = ("course_id", "attempted", "dropped", "failed", "ifc", "is_filter")
        return [dict(zip(keys, r)) for r in self.rows()]


def friction_from_records(records, w1=1.0, w2=0.5, threshold=0.5) -> CourseFrictionTable:
    """Rebuild a fitted table from ``to_records`` output (e.g. a friction.csv)."""
    table = CourseFrictionTable(w1=w1, w2=w2, threshold=threshold)
    for r in records:
        c = str(r["course_id"])
        table.attempted[c] = int(r["attempted"])
        table.dropped[c] = int(r["dropped"])
        table.failed[c] = int(r["failed"])
        table.ifc[c] = float(r["ifc"])
        flag = r["is_filter"]
        table.is_filter[c] = flag if isinstance(flag, bool) else str(flag) == "True"
    return table


def fit_friction_table(windows, w1=1.0, w2=0.5, threshold=0.5) -> CourseFrictionTable:
    """Count in-window attempts per course over the fitting population."""
    att: dict = {}
    drp: dict = {}
    fld: dict = {}
    for w in windows:
        for c, s in zip(w.course_ids, w.states):
            att[c] = att.get(c, 0) + 1
            if s == "dropped":
                drp[c] = drp.get(c, 0) + 1
            elif s == "failed":
                fld[c] = fld.get(c, 0) + 1
    table = CourseFrictionTable(w1=w1, w2=w2, threshold=threshold)
    for c in sorted(att):
        table.attempted[c] = att[c]
        table.dropped[c] = drp.get(c, 0)
        table.failed[c] = fld.get(c, 0)
        table.ifc[c] = compute_ifc_course(att[c], table.dropped[c], table.failed[c], w1, w2)
        table.is_filter[c] = table.ifc[c] >= threshold
    return table


# ---------------------------------------------------------------------------
# Context lookups
# ---------------------------------------------------------------------------

@dataclass
class ExtractionContext:
    """Lookups shared by all students; built once per dataset."""

    term_year: dict
    term_inflation: dict
    term_strikes: dict
    year_inflation: dict
    area: dict  # (postcode, year) -> (deprivation, unemployment, informality, poverty)
    course_curriculum: dict
    curriculum_expected: dict  # curriculum -> sorted [(offset, cumulative)]
    curriculum_courses: dict  # curriculum -> [(nominal_term, course_id)]

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "ExtractionContext":
        cal = ds.calendar
        term_year = dict(zip(cal["term_index"].astype(int), cal["calendar_year"].astype(int)))
        term_infl = dict(zip(cal["term_index"].astype(int), cal["inflation_yoy"].astype(float)))
        term_str = dict(zip(cal["term_index"].astype(int), cal["strike_count_24m"].astype(float)))
        year_infl: dict = {}
        for t in sorted(term_year):
            v = term_infl[t]
            if not math.isnan(v):
                y = term_year[t]
                year_infl[y] = max(v, year_infl.get(y, -math.inf))
        area = {}
        if ds.areas is not None:
            a = ds.areas
            for row in zip(a["postcode"], a["year"].astype(int), a["deprivation_index"].astype(float),
                           a["unemployment"].astype(float), a["informality"].astype(float),
                           a["poverty"].astype(float)):
                area[(row[0], row[1])] = row[2:]
        course_curr = dict(zip(ds.courses["course_id"], ds.courses["curriculum_id"]))
        expected: dict = {}
        for cid, off, cnt in zip(ds.curricula["curriculum_id"], ds.curricula["term_offset"].astype(int),
                                 ds.curricula["expected_courses"].astype(int)):
            expected.setdefault(cid, []).append((off, cnt))
        for v in expected.values():
            v.sort()
        ccourses: dict = {}
        for cid, curr, nom in zip(ds.courses["course_id"], ds.courses["curriculum_id"],
                                  ds.courses["nominal_term"].astype(int)):
            ccourses.setdefault(curr, []).append((nom, cid))
        for v in ccourses.values():
            v.sort()
        return cls(term_year, term_infl, term_str, year_infl, area, course_curr, expected, ccourses)

    def expected_at(self, curriculum, cutoff) -> int:
        best = 0
        for off, cnt in self.curriculum_expected.get(curriculum, ()):
            if off <= cutoff:
                best = cnt
        return best

    def expected_courses(self, curriculum, cutoff) -> set:
        return {c for nom, c in self.curriculum_courses.get(curriculum, ()) if nom <= cutoff}

    def entry_year(self, student) -> int:
        t0 = int(student["entry_term"])
        if t0 not in self.term_year:
            raise ConfigError(f"no calendar entry for entry term {t0} of student {student['student_id']}")
        return self.term_year[t0]


def _num(v) -> float:
    if v is None:
        return NAN
    try:
        f = float(v)
    except (TypeError, ValueError):
        return NAN
    return f


# ---------------------------------------------------------------------------
# Level extractors
# ---------------------------------------------------------------------------

def extract_n1(student, ctx: ExtractionContext) -> dict:
    year = ctx.entry_year(student)
    pc = student.get("postcode")
    cur = ctx.area.get((pc, year)) if pc is not None else None
    prev = ctx.area.get((pc, year - 1)) if pc is not None else None
    dep, unemp, informal, poverty = cur if cur is not None else (NAN, NAN, NAN, NAN)
    change = (unemp - prev[1]) if (cur is not None and prev is not None) else NAN
    school = student.get("secondary_school_type")
    if school is None:
        onehot = (NAN, NAN, NAN)
    else:
        onehot = tuple(1.0 if school == s else 0.0 for s in ("public", "private", "technical"))
    sib = student.get("siblings_university")
    sib = NAN if sib is None else float(bool(sib))
    peaks = [ctx.year_inflation[y] for y in (year - 3, year - 2, year - 1) if y in ctx.year_inflation]
    return {
        "deprivation_index": dep,
        "distance_to_campus_km": _num(student.get("distance_to_campus_km")),
        "area_unemployment_t0": unemp,
        "area_informality_t0": informal,
        "area_poverty_t0": poverty,
        "area_unemployment_change_t0": change,
        "parental_education": _num(student.get("parental_education")),
        "siblings_university": sib,
        "secondary_public": onehot[0],
        "secondary_private": onehot[1],
        "secondary_technical": onehot[2],
        "macro_crisis_index_t0": max(peaks) if peaks else NAN,
    }


def extract_n2(student, ctx: ExtractionContext) -> dict:
    ctx.entry_year(student)
    t0 = int(student["entry_term"])
    gender = student.get("gender")
    if gender is None:
        female = NAN
    else:
        female = 1.0 if str(gender).strip().lower() in ("f", "female", "woman") else 0.0
    works = student.get("works_at_entry")
    works = {"yes": 1.0, "no": 0.0}.get(works, NAN)
    return {
        "age_at_entry": _num(student.get("age_at_entry")),
        "gender_female": female,
        "works_at_entry": works,
        "hs_gpa": _num(student.get("hs_gpa")),
        "inflation_t0": _num(ctx.term_inflation.get(t0)),
        "strikes_24m_t0": _num(ctx.term_strikes.get(t0)),
    }


def extract_n3(window: WindowedTrajectory, friction: CourseFrictionTable,
               filter_threshold: float | None = None) -> dict:
    threshold = friction.threshold if filter_threshold is None else filter_threshold
    n = window.n_attempts
    states = window.states
    n_pass = sum(1 for s in states if s == "passed")
    n_fail = sum(1 for s in states if s == "failed")
    n_drop = sum(1 for s in states if s == "dropped")
    graded = np.asarray([g for g, s in zip(window.grades, states)
                         if s in ("passed", "failed") and not math.isnan(g)], dtype=float)
    per_course: dict = {}
    for c in window.course_ids:
        per_course[c] = per_course.get(c, 0) + 1
    filt = {c for c in per_course if c in friction.ifc and friction.ifc[c] >= threshold}
    exposures = sum(per_course[c] for c in filt)
    return {
        "n_attempted": float(n),
        "n_passed": float(n_pass),
        "n_failed": float(n_fail),
        "n_dropped": float(n_drop),
        "pass_rate": n_pass / n if n else NAN,
        "fail_rate": n_fail / n if n else NAN,
        "libre_rate": n_drop / n if n else NAN,
        "grade_mean": float(np.mean(graded)) if len(graded) else NAN,
        "grade_median": float(np.median(graded)) if len(graded) else NAN,
        "grade_std": float(np.std(graded)) if len(graded) else NAN,
        "n_distinct_courses": float(len(per_course)),
        "ifc_mean": compute_ifc_mean(window.course_ids, friction) if n else NAN,
        "filter_exposure_count": float(exposures),
        "filter_exposure_rate": exposures / n if n else NAN,
        "n_filter_courses": float(len(filt)),
        "max_attempts_single_course": float(max(per_course.values())) if per_course else 0.0,
    }


def term_loads(window: WindowedTrajectory) -> np.ndarray:
    """Courses per term from the first to the last active term, zeros included."""
    if window.is_empty():
        return np.zeros(0)
    rel = window.rel_terms
    lo, hi = int(rel.min()), int(rel.max())
    return np.bincount(rel - lo, minlength=hi - lo + 1).astype(float)


def student_curriculum(window: WindowedTrajectory, ctx: ExtractionContext):
    """Curriculum of the student's first in-window course (term, then course id)."""
    if window.is_empty():
        return None
    return ctx.course_curriculum.get(window.course_ids[0])


def extract_n4(window: WindowedTrajectory, ctx: ExtractionContext, vot: VotConfig) -> dict:
    if window.is_empty():
        return {k: NAN for k in ("mean_attempts_per_course", "max_gap", "load_trend", "velocity",
                                 "enrolment_regularity", "state_entropy")}
    curr = student_curriculum(window, ctx)
    active = window.active_terms
    distinct = set(window.course_ids)
    passed = {c for c, s in zip(window.course_ids, window.states) if s == "passed"}
    expected = ctx.expected_courses(curr, vot.cutoff)
    counts = {s: 0 for s in ENTROPY_STATES}
    for s in window.states:
        counts[s] += 1
    counts["not_attempted"] = len(expected - distinct)
    return {
        "mean_attempts_per_course": window.n_attempts / len(distinct),
        "max_gap": compute_max_gap(active),
        "load_trend": compute_load_trend(term_loads(window)),
        "velocity": compute_velocity(len(passed), ctx.expected_at(curr, vot.cutoff)),
        "enrolment_regularity": compute_regularity(active),
        "state_entropy": compute_state_entropy(counts),
    }


DEFAULT_INTERACTIONS = (
    ("ifc_x_libre", "ifc_mean", "libre_rate"),
    ("age_x_attempts", "age_at_entry", "mean_attempts_per_course"),
    ("deprivation_x_pass_rate", "deprivation_index", "pass_rate"),
    ("filter_exposure_x_gap", "filter_exposure_count", "max_gap"),
)


def generate_interactions(features: dict, spec=DEFAULT_INTERACTIONS) -> dict:
    """Products of operand pairs; a missing operand gives a missing product."""
    out = {}
    for name, a, b in spec:
        if a not in features or b not in features:
            raise ConfigError(f"interaction {name!r} references unknown feature {a if a not in features else b!r}")
        va, vb = features[a], features[b]
        out[name] = NAN if (math.isnan(va) or math.isnan(vb)) else va * vb
    return out


# ---------------------------------------------------------------------------
# Whole-cohort extraction
# ---------------------------------------------------------------------------

@dataclass
class FeatureParams:
    w1: float = 1.0
    w2: float = 0.5
    filter_threshold: float = 0.5

    @classmethod
    def from_dict(cls, d: dict | None) -> "FeatureParams":
        d = dict(d or {})
        d.pop("dictionary", None)
        unknown = set(d) - {"w1", "w2", "filter_threshold"}
        if unknown:
            raise ConfigError(f"unknown feature keys: {sorted(unknown)}")
        p = cls(**d)
        if p.w1 < 0 or p.w2 < 0:
            raise ConfigError("friction weights must be non-negative")
        return p


@dataclass
class Extraction:
    student_ids: list
    vectors: list  # one dict per student, dictionary order not guaranteed
    friction: CourseFrictionTable
    excluded_no_enrolments: list
    fit_ids: list


def extract_features(ds: Dataset, vot: VotConfig, params: FeatureParams | None = None,
                     fit_ids=None, interactions=DEFAULT_INTERACTIONS,
                     friction: CourseFrictionTable | None = None) -> Extraction:
    """Extract N1-N4 vectors for every student with a non-empty window.

    ``fit_ids`` restricts the population the friction table is fitted on
    (default: every featurised student). A given ``friction`` table is used
    as is, which is how new students are scored against a frozen model.
    """
    params = params or FeatureParams()
    ctx = ExtractionContext.from_dataset(ds)
    windows = build_windows(ds, vot)
    records = ds.students.to_dict("records")
    for r in records:
        for k, v in r.items():
            if isinstance(v, float) and math.isnan(v):
                r[k] = None
    by_id = {r["student_id"]: r for r in records}
    ids = sorted(s for s in by_id if not windows[s].is_empty())
    excluded = sorted(s for s in by_id if windows[s].is_empty())
    fit = ids if fit_ids is None else sorted(set(fit_ids) & set(ids))
    if friction is None:
        friction = fit_friction_table((windows[s] for s in fit), params.w1, params.w2, params.filter_threshold)
    vectors = []
    for sid in ids:
        st, w = by_id[sid], windows[sid]
        v = {}
        v.update(extract_n1(st, ctx))
        v.update(extract_n2(st, ctx))
        v.update(extract_n3(w, friction))
        v.update(extract_n4(w, ctx, vot))
        v.update(generate_interactions(v, interactions))
        vectors.append(v)
    return Extraction(ids, vectors, friction, excluded, fit)
