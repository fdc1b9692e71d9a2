"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np

from capire.assembly import assemble
from capire.features import extract_features, load_dictionary
from capire.pipeline import clustering_matrix
from capire.synth import generate, load_scenario
from capire.vot import VotConfig, audit_eligibility


def scenario(name="planted", **overrides):
    s = load_scenario(name)
    s.update(overrides)
    return s


def pipeline_matrix(result, vot=VotConfig()):
    """Extraction and assembly as the CLI does them; returns (Assembled, X, columns)."""
    d = load_dictionary()
    tags, _ = audit_eligibility(d["features"], vot)
    adm = [t.feature_name for t in tags if t.tag == "vot_admissible"]
    excluded = [t.feature_name for t in tags if t.tag != "vot_admissible"]
    ex = extract_features(result.dataset, vot)
    a = assemble(ex, result.dataset, d, adm, {"seed": 0}, excluded_names=excluded)
    x, cols, _ = clustering_matrix(a.matrix, a.scaling)
    return a, x, cols


def truth_for(result, ids, column="template_index"):
    gt = result.ground_truth.set_index("student_id")
    return gt.loc[list(ids), column].to_numpy()


def cohorts_for(result, ids):
    st = result.dataset.students.set_index("student_id")
    return st.loc[list(ids), "cohort_year"].to_numpy(dtype=int)


def blobs(n_per, centres, sd, seed):
    rng = np.random.default_rng(seed)
    centres = np.asarray(centres, dtype=float)
    x = np.vstack([rng.normal(c, sd, size=(n_per, centres.shape[1])) for c in centres])
    return x, np.repeat(np.arange(len(centres)), n_per)


def uniform_null(n=1000, d=44, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(n, d))
    return (x - x.mean(axis=0)) / x.std(axis=0)


def micro_template_matrix(seed, n_big=250, n_micro=25, d=8):
    """Five large groups plus two small groups that share one entry age.

    The small groups fall below the archetype size threshold, so they land in
    the residual set with a narrow age spread.
    """
    rng = np.random.default_rng(seed)
    cols = ["age_at_entry", "ifc_mean", "max_gap"] + [f"f{j}" for j in range(d - 3)]
    big_c = rng.normal(scale=6.0, size=(5, d))
    micro_c = rng.normal(scale=6.0, size=(2, d))
    micro_c[:, 0] = 0.0
    parts = [rng.normal(c, 1.0, size=(n_big, d)) for c in big_c]
    parts += [rng.normal(c, 1.0, size=(n_micro, d)) for c in micro_c]
    truth = np.repeat(np.arange(7), [n_big] * 5 + [n_micro] * 2)
    return np.vstack(parts), cols, truth


def planted(**overrides):
    return generate(scenario("planted", **overrides))


def toy_tables():
    """Three students, two courses, one curriculum; every rule satisfied."""
    import pandas as pd

    def frame(cols, rows):
        return pd.DataFrame([[str(v) for v in r] for r in rows], columns=cols, dtype=object)

    students = frame(
        ["student_id", "cohort_year", "entry_term", "age_at_entry", "gender", "works_at_entry", "hs_gpa",
         "postcode", "parental_education", "siblings_university", "secondary_school_type",
         "distance_to_campus_km"],
        [["s1", 2010, 0, 18.5, "F", "no", 7.5, "P1", 3, "true", "public", 4.0],
         ["s2", 2010, 0, 19.0, "M", "yes", 6.0, "P2", 2, "false", "private", 12.5],
         ["s3", 2010, 1, 18.2, "F", "no", 8.1, "P1", 4, "true", "technical", 2.0]],
    )
    enrolments = frame(
        ["student_id", "course_id", "term_index", "state", "grade"],
        [["s1", "C1", 0, "passed", 7.0], ["s1", "C2", 1, "failed", 3.0],
         ["s2", "C1", 0, "failed", 2.0], ["s2", "C1", 1, "passed", 6.0],
         ["s3", "C1", 1, "passed", 8.0], ["s3", "C2", 2, "passed", 9.0]],
    )
    courses = frame(["course_id", "curriculum_id", "nominal_term", "is_core"],
                    [["C1", "K", 1, "true"], ["C2", "K", 2, "true"]])
    curricula = frame(["curriculum_id", "term_offset", "expected_courses"],
                      [["K", 0, 0], ["K", 1, 1], ["K", 2, 2]])
    calendar = frame(["term_index", "calendar_year", "season", "inflation_yoy", "strike_count_24m"],
                     [[0, 2010, "first", 0.1, 2], [1, 2010, "second", 0.1, 2], [2, 2011, "first", 0.2, 1],
                      [3, 2011, "second", 0.2, 1]])
    areas = frame(["postcode", "year", "deprivation_index", "unemployment", "informality", "poverty"],
                  [["P1", 2010, 0.3, 0.1, 0.2, 0.25], ["P2", 2010, 0.6, 0.15, 0.3, 0.4]])
    return {"students": students, "enrolments": enrolments, "courses": courses, "curricula": curricula,
            "calendar": calendar, "areas": areas}
