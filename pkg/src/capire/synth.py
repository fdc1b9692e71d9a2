"""Synthetic cohorts with planted trajectory templates and known ground truth.

A scenario is a JSON document listing templates (behavioural and
socio-demographic parameters plus a population share); the remainder of the
population is a diffuse group whose parameters are drawn piecewise from
random templates. Attrition is realised after the early terms, so it never
shapes in-window behaviour.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd

from .domain import Dataset, coerce_dataset, write_csv
from .vot import ConfigError

SEASONS = ("first", "second")
NOISE_ID = "noise"

TEMPLATE_DEFAULTS = {
    "pass": 0.7, "fail": 0.2, "drop": 0.1,   # per-attempt outcome propensities
    "friction": 1.0,                          # sensitivity to course difficulty
    "gap": 0.0,                               # chance of sitting out each of ``gap_terms``
    "gap_terms": [1, 2],                      # early relative terms that may be skipped
    "load": [4, 4, 4],                        # courses per term over the early terms
    "load_sd": 0.4,
    "retake": 1.0,                            # chance a failed/dropped course is queued again
    "grade": 7.0,
    "age": [18.5, 0.8],
    "female": 0.5,
    "works": 0.2,
    "hs_gpa": [7.0, 1.0],
    "deprivation": [0.4, 0.1],
    "parental_education": [3.0, 1.0],
    "siblings": 0.3,
    "school": [0.6, 0.3, 0.1],
    "distance": [15.0, 5.0],
    "attrition": 0.5,
}
PROB_KEYS = ("pass", "fail", "drop", "gap", "retake", "female", "works", "siblings", "attrition")


@dataclass
class Template:
    template_id: str
    share: float
    params: dict
    drift: dict | None = None  # {"from_year": y, "attrition": p}

    def attrition_for(self, cohort_year: int) -> float:
        if self.drift and cohort_year >= int(self.drift["from_year"]):
            return float(self.drift["attrition"])
        return float(self.params["attrition"])


@dataclass
class GeneratorConfig:
    name: str = "scenario"
    n_students: int = 1000
    seed: int = 0
    first_cohort: int = 2004
    last_cohort: int = 2019
    extra_years: int = 8
    n_courses: int = 40
    courses_per_term: int = 4
    early_terms: int = 3
    templates: list = field(default_factory=list)
    noise_attrition: float = 0.5
    missing: dict = field(default_factory=dict)
    n_regions: int = 6
    postcodes_per_region: int = 5
    macro_crises: bool = True       # inflation/strike shocks in 2014 and 2018-19
    macro_cycle: bool = True        # slow background cycle in inflation and strikes
    area_cycle: float = 0.02        # amplitude of the yearly area-indicator cycle

    @property
    def noise_share(self) -> float:
        return 1.0 - sum(t.share for t in self.templates)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        temps = []
        for i, t in enumerate(d.pop("templates", [])):
            t = dict(t)
            tid = str(t.pop("id", f"T{i + 1}"))
            share = float(t.pop("share"))
            drift = t.pop("drift", None)
            unknown = set(t) - set(TEMPLATE_DEFAULTS)
            if unknown:
                raise ConfigError(f"template {tid}: unknown parameters {sorted(unknown)}")
            temps.append(Template(tid, share, {**TEMPLATE_DEFAULTS, **t}, drift))
        d.pop("description", None)
        noise_share = d.pop("noise_share", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        cfg = cls(templates=temps, **d)
        cfg.validate()
        if noise_share is not None and abs(noise_share - cfg.noise_share) > 1e-9:
            raise ConfigError(f"noise_share {noise_share} disagrees with 1 - sum(shares) = {cfg.noise_share:.6g}")
        return cfg

    def validate(self) -> None:
        if self.n_students < 1:
            raise ConfigError("n_students must be >= 1")
        if self.last_cohort < self.first_cohort:
            raise ConfigError("last_cohort precedes first_cohort")
        if self.n_courses < self.courses_per_term or self.courses_per_term < 1:
            raise ConfigError("need at least one term's worth of courses")
        shares = [t.share for t in self.templates]
        if any(s < 0 for s in shares) or sum(shares) > 1 + 1e-9:
            raise ConfigError("template shares must be non-negative and sum to at most 1")
        ids = [t.template_id for t in self.templates]
        if len(set(ids)) != len(ids) or NOISE_ID in ids:
            raise ConfigError("template ids must be unique and not 'noise'")
        for t in self.templates:
            p = t.params
            for k in PROB_KEYS:
                if not 0 <= p[k] <= 1:
                    raise ConfigError(f"template {t.template_id}: {k} must lie in [0, 1]")
            if abs(p["pass"] + p["fail"] + p["drop"] - 1) > 1e-6:
                raise ConfigError(f"template {t.template_id}: pass + fail + drop must equal 1")
            if t.drift is not None and not 0 <= float(t.drift["attrition"]) <= 1:
                raise ConfigError(f"template {t.template_id}: drift attrition must lie in [0, 1]")
        if not 0 <= self.noise_attrition <= 1:
            raise ConfigError("noise_attrition must lie in [0, 1]")


def load_scenario(name_or_path) -> dict:
    """A shipped scenario by name (``planted``) or a JSON file path."""
    p = Path(str(name_or_path))
    if p.suffix == ".json" and p.exists():
        return json.loads(p.read_text("utf-8"))
    name = p.stem if p.suffix == ".json" else str(name_or_path)
    res = resources.files("capire").joinpath(f"data/scenarios/{name}.json")
    if not res.is_file():
        raise ConfigError(f"unknown scenario {name_or_path!r}")
    return json.loads(res.read_text("utf-8"))


def shipped_scenarios() -> list[str]:
    root = resources.files("capire").joinpath("data/scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


# ---------------------------------------------------------------------------
# Static tables
# ---------------------------------------------------------------------------

def _inflation(year: int, crises: bool = True, cycle: bool = True) -> float:
    # smooth background with two crisis bumps
    base = 0.09 + (0.04 * math.sin((year - 2004) / 2.5) if cycle else 0.0)
    if not crises:
        return round(base, 4)
    bump = 0.25 * math.exp(-((year - 2014.5) / 1.5) ** 2) + 0.35 * math.exp(-((year - 2019) / 1.8) ** 2)
    return round(base + bump, 4)


def make_calendar(cfg: GeneratorConfig) -> pd.DataFrame:
    years = range(cfg.first_cohort, cfg.last_cohort + cfg.extra_years + 1)
    rows = []
    for y in years:
        for s, season in enumerate(SEASONS):
            t = 2 * (y - cfg.first_cohort) + s
            shock = 4 if (cfg.macro_crises and y in (2014, 2018, 2019)) else 0
            wave = 2 * math.sin(t / 5.0) if cfg.macro_cycle else 0.0
            strikes = int(round(3 + wave + shock))
            rows.append((t, y, season, _inflation(y, cfg.macro_crises, cfg.macro_cycle), max(strikes, 0)))
    return pd.DataFrame(rows, columns=["term_index", "calendar_year", "season", "inflation_yoy",
                                       "strike_count_24m"])


def make_courses(cfg: GeneratorConfig, rng: np.random.Generator):
    n_terms = math.ceil(cfg.n_courses / cfg.courses_per_term)
    ids = [f"C{j + 1:03d}" for j in range(cfg.n_courses)]
    nominal = [1 + j // cfg.courses_per_term for j in range(cfg.n_courses)]
    difficulty = np.round(rng.uniform(0.6, 1.4, cfg.n_courses), 3)
    # a few gateway courses early in the programme
    for j in (1, 4, 9):
        if j < cfg.n_courses:
            difficulty[j] = 2.0
    courses = pd.DataFrame({"course_id": ids, "curriculum_id": "CIV", "nominal_term": nominal,
                            "is_core": [j < int(0.75 * cfg.n_courses) for j in range(cfg.n_courses)]})
    curricula = pd.DataFrame({"curriculum_id": "CIV", "term_offset": list(range(n_terms + 1)),
                              "expected_courses": [min(cfg.n_courses, cfg.courses_per_term * k)
                                                   for k in range(n_terms + 1)]})
    return courses, curricula, dict(zip(ids, difficulty))


def make_areas(cfg: GeneratorConfig):
    """Postcodes grouped in regions (first two characters) with yearly indicators."""
    base = {}
    for r in range(cfg.n_regions):
        centre = 0.1 + 0.8 * r / max(cfg.n_regions - 1, 1)
        for p in range(cfg.postcodes_per_region):
            off = (p - (cfg.postcodes_per_region - 1) / 2) * 0.15 / cfg.postcodes_per_region
            base[f"{r + 1}0{p + 1:02d}"] = min(max(centre + off, 0.0), 1.0)
    rows = []
    for pc, dep in base.items():
        for y in range(cfg.first_cohort - 4, cfg.last_cohort + cfg.extra_years + 1):
            cyc = cfg.area_cycle * math.sin((y - 2000) / 3.0)
            d = min(max(dep + cyc, 0.0), 1.0)
            rows.append((pc, y, round(d, 4), round(min(0.04 + 0.2 * d + 2 * cyc, 1.0), 4),
                         round(min(0.2 + 0.5 * d, 1.0), 4), round(min(0.05 + 0.6 * d + cyc, 1.0), 4)))
    areas = pd.DataFrame(rows, columns=["postcode", "year", "deprivation_index", "unemployment",
                                        "informality", "poverty"])
    return areas, base


# ---------------------------------------------------------------------------
# Students
# ---------------------------------------------------------------------------

NOISE_GROUPS = (("pass", "fail", "drop", "friction", "grade", "retake"), ("gap", "gap_terms"), ("load", "load_sd"))


def _noise_params(templates, rng) -> dict:
    """Piecewise mix: each parameter (or coupled group) from an independently drawn template."""
    out = {}
    grouped = {k for g in NOISE_GROUPS for k in g}
    keys = [(k,) for k in TEMPLATE_DEFAULTS if k not in grouped] + list(NOISE_GROUPS)
    for group in keys:
        src = templates[rng.integers(len(templates))].params if templates else TEMPLATE_DEFAULTS
        for k in group:
            out[k] = src[k]
    return out


def _pick_postcode(dep_mean, dep_sd, postcodes, base, rng):
    target = rng.normal(dep_mean, dep_sd)
    w = np.exp(-0.5 * ((np.array([base[p] for p in postcodes]) - target) / 0.02) ** 2) + 1e-12
    return postcodes[rng.choice(len(postcodes), p=w / w.sum())]


def _outcome(params, difficulty, rng):
    m = difficulty ** params["friction"]
    fail = params["fail"] * m
    drop = params["drop"] * m
    # difficulty may push the non-pass mass up to 0.98, never past what the template declares
    cap = max(0.98, params["fail"] + params["drop"])
    if fail + drop > cap:
        s = cap / (fail + drop)
        fail, drop = fail * s, drop * s
    u = rng.random()
    if u < drop:
        return "dropped"
    if u < drop + fail:
        return "failed"
    return "passed"


def _student_row(sid, cohort, entry_term, p, postcodes, base, rng):
    school = ("public", "private", "technical")[rng.choice(3, p=np.asarray(p["school"]) / sum(p["school"]))]
    return {
        "student_id": sid,
        "cohort_year": cohort,
        "entry_term": entry_term,
        "age_at_entry": round(float(np.clip(rng.normal(*p["age"]), 16.0, 60.0)), 1),
        "gender": "F" if rng.random() < p["female"] else "M",
        "works_at_entry": "yes" if rng.random() < p["works"] else "no",
        "hs_gpa": round(float(np.clip(rng.normal(*p["hs_gpa"]), 0.0, 10.0)), 2),
        "postcode": _pick_postcode(p["deprivation"][0], p["deprivation"][1], postcodes, base, rng),
        "parental_education": int(np.clip(round(rng.normal(*p["parental_education"])), 0, 6)),
        "siblings_university": bool(rng.random() < p["siblings"]),
        "secondary_school_type": school,
        "distance_to_campus_km": round(float(max(rng.normal(*p["distance"]), 0.5)), 1),
    }


def _trajectory(sid, entry_term, p, departs, courses, difficulty, early_terms, rng):
    """Enrolment rows and optional graduation term for one student."""
    queue = list(courses)
    retake: list = []
    rows = []
    if departs:
        last = early_terms + int(rng.integers(0, 5))
        grad = None
    else:
        last = 9 + int(rng.integers(0, 3))
        grad = entry_term + last + 1
    load = p["load"]
    for rel in range(last + 1):
        if rel in p["gap_terms"] and rel < early_terms and rng.random() < p["gap"]:
            continue
        mean = load[rel] if rel < len(load) else load[-1]
        k = int(np.clip(round(rng.normal(mean, p["load_sd"])), 1, 7))
        picks = []
        while len(picks) < k and (retake or queue):
            picks.append(retake.pop(0) if retake else queue.pop(0))
        for c in sorted(set(picks)):
            state = _outcome(p, difficulty[c], rng)
            if state == "passed":
                grade = round(float(np.clip(rng.normal(p["grade"], 1.0), 4.0, 10.0)), 2)
            elif state == "failed":
                grade = round(float(rng.uniform(1.0, 3.99)), 2)
            else:
                grade = None
            if state != "passed" and rng.random() < p["retake"]:
                retake.append(c)
            rows.append((sid, c, entry_term + rel, state, grade))
    return rows, grad


def _departure_quota(members_by_cohort, rate_by_cohort, rng) -> set:
    """Exact cumulative quota: after each cohort, departures = round(cumulative target)."""
    departed = set()
    target = 0.0
    done = 0
    for cohort in sorted(members_by_cohort):
        ids = list(members_by_cohort[cohort])
        target += rate_by_cohort[cohort] * len(ids)
        k = int(math.floor(target + 0.5)) - done
        k = max(0, min(k, len(ids)))
        order = rng.permutation(len(ids))
        departed.update(ids[i] for i in order[:k])
        done += k
    return departed


@dataclass
class SynthResult:
    dataset: Dataset
    ground_truth: pd.DataFrame
    config: GeneratorConfig

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        self.dataset.write(out)
        write_csv(self.ground_truth, out / "ground_truth.csv")


def generate(config) -> SynthResult:
    """Raw tables plus ``ground_truth`` (student_id, template_id, attrition_flag)."""
    cfg = config if isinstance(config, GeneratorConfig) else GeneratorConfig.from_dict(config)
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    s_static, s_assign, s_quota, s_students = root.spawn(4)
    static_rng = np.random.default_rng(s_static)
    calendar = make_calendar(cfg)
    courses, curricula, difficulty = make_courses(cfg, static_rng)
    areas, base = make_areas(cfg)
    postcodes = sorted(base)
    course_order = list(courses.sort_values(["nominal_term", "course_id"])["course_id"])

    arng = np.random.default_rng(s_assign)
    temps = cfg.templates
    probs = np.array([t.share for t in temps] + [max(cfg.noise_share, 0.0)])
    probs = probs / probs.sum()
    n = cfg.n_students
    width = max(5, len(str(n)))
    sids = [f"S{i + 1:0{width}d}" for i in range(n)]
    assign = arng.choice(len(probs), size=n, p=probs)
    cohorts = arng.integers(cfg.first_cohort, cfg.last_cohort + 1, size=n)

    qrng = np.random.default_rng(s_quota)
    departed = set()
    for g in range(len(probs)):
        members: dict = {}
        for i in np.flatnonzero(assign == g):
            members.setdefault(int(cohorts[i]), []).append(i)
        if g < len(temps):
            rates = {c: temps[g].attrition_for(c) for c in members}
        else:
            rates = {c: cfg.noise_attrition for c in members}
        departed |= _departure_quota(members, rates, qrng)

    student_rows, enrol_rows, grads, truth = [], [], [], []
    child_seeds = s_students.spawn(n)
    for i, sid in enumerate(sids):
        rng = np.random.default_rng(child_seeds[i])
        g = int(assign[i])
        p = temps[g].params if g < len(temps) else _noise_params(temps, rng)
        cohort = int(cohorts[i])
        entry = 2 * (cohort - cfg.first_cohort)
        student_rows.append(_student_row(sid, cohort, entry, p, postcodes, base, rng))
        rows, grad = _trajectory(sid, entry, p, i in departed, course_order, difficulty, cfg.early_terms, rng)
        enrol_rows.extend(rows)
        if grad is not None:
            grads.append((sid, grad))
        truth.append((sid, temps[g].template_id if g < len(temps) else NOISE_ID,
                      g if g < len(temps) else -1, int(i in departed)))

    students = pd.DataFrame(student_rows)
    _apply_missing(students, cfg.missing, np.random.default_rng(root.spawn(1)[0]))
    enrolments = pd.DataFrame(enrol_rows, columns=["student_id", "course_id", "term_index", "state", "grade"])
    enrolments["grade"] = enrolments["grade"].astype(float)
    graduations = pd.DataFrame(grads, columns=["student_id", "term_index"])
    ds = coerce_dataset({"students": students, "enrolments": enrolments, "courses": courses,
                         "curricula": curricula, "calendar": calendar, "areas": areas,
                         "graduations": graduations})
    gt = pd.DataFrame(truth, columns=["student_id", "template_id", "template_index", "attrition_flag"])
    return SynthResult(ds, gt, cfg)


def _apply_missing(students: pd.DataFrame, missing: dict, rng) -> None:
    for col in sorted(missing):
        if col not in students.columns or col in ("student_id", "cohort_year", "entry_term", "age_at_entry"):
            raise ConfigError(f"column {col!r} cannot be blanked")
        mask = rng.random(len(students)) < float(missing[col])
        if col == "works_at_entry":
            students.loc[mask, col] = "unknown"
        else:
            students[col] = students[col].astype(object)
            students.loc[mask, col] = None
