import numpy as np
import pandas as pd
import pytest

from capire.assembly import assemble_matrix, build_raw_matrix
from capire.features import extract_features, load_dictionary
from capire.vot import (
    ConfigError,
    UndeclaredTimeBound,
    VotConfig,
    audit_eligibility,
    build_windows,
    classify_feature,
    leakage_probe,
    perturb_future,
    slice_trajectory,
    with_cutoff,
)

VOT = VotConfig(cutoff=3)


def _enr(terms, sid="a"):
    return pd.DataFrame({
        "student_id": [sid] * len(terms),
        "course_id": [f"C{i}" for i in range(len(terms))],
        "term_index": terms,
        "state": ["passed"] * len(terms),
        "grade": [7.0] * len(terms),
    })


def test_window_keeps_relative_terms_below_cutoff():
    w = slice_trajectory({"student_id": "a", "entry_term": 10}, _enr([10, 11, 12, 15]), VOT)
    assert list(w.rel_terms) == [0, 1, 2]


def test_window_empty_when_everything_late():
    w = slice_trajectory({"student_id": "a", "entry_term": 0}, _enr([3, 4, 7]), VOT)
    assert w.is_empty()


def test_window_ignores_other_students():
    enr = pd.concat([_enr([0, 1]), _enr([0, 1, 2], sid="b")])
    w = slice_trajectory({"student_id": "a", "entry_term": 0}, enr, VOT)
    assert w.n_attempts == 2


def test_post_cutoff_append_leaves_window_identical():
    base = _enr([0, 1, 2])
    w0 = slice_trajectory({"student_id": "a", "entry_term": 0}, base, VOT)
    more = pd.concat([base, pd.DataFrame({"student_id": ["a"], "course_id": ["Z"], "term_index": [3],
                                          "state": ["failed"], "grade": [2.0]})])
    w1 = slice_trajectory({"student_id": "a", "entry_term": 0}, more, VOT)
    assert w0.key() == w1.key()


def test_build_windows_matches_slice(small_result):
    ds = small_result.dataset
    windows = build_windows(ds, VOT)
    for st in ds.students.head(30).to_dict("records"):
        assert windows[st["student_id"]].key() == slice_trajectory(st, ds.enrolments, VOT).key()


def test_vot_config_checks():
    with pytest.raises(ConfigError):
        VotConfig(cutoff=12, horizon=12)
    with pytest.raises(ConfigError):
        VotConfig.from_dict({"cutof": 3})
    with pytest.raises(NotImplementedError):
        VotConfig(unit="credits")


def _entry(name, bound, sources=("enrolments.state",), **kw):
    return {"name": name, "time_bound": bound, "source_fields": list(sources), **kw}


def test_audit_examples():
    assert classify_feature(_entry("failed_core_courses_up_to_term_2", 2), VOT).tag == "vot_admissible"
    t = classify_feature(_entry("total_semesters_enrolled", "full_history"), VOT)
    assert (t.tag, t.reason) == ("post_vot", "temporal aggregation without windowing")
    t = classify_feature(_entry("final_gpa", "trajectory_end"), VOT)
    assert (t.tag, t.reason) == ("restricted", "outcome-proximal")


def test_audit_name_patterns_and_label_sources():
    # a wrongly declared bound is still caught by name
    assert classify_feature(_entry("final_gpa", "vot"), VOT).tag == "restricted"
    assert classify_feature(_entry("total_credits", "vot"), VOT).tag == "post_vot"
    t = classify_feature(_entry("peer_dropout_share", "t0", sources=("labels.attrition_flag",)), VOT)
    assert t.tag == "restricted" and "label" in t.reason
    assert classify_feature(_entry("passed_up_to_term_3", 3), VOT).tag == "post_vot"


def test_audit_undeclared_bound_is_hard_error():
    with pytest.raises(UndeclaredTimeBound):
        audit_eligibility([{"name": "mystery", "source_fields": []}], VOT)


def test_shipped_dictionary_is_admissible_and_report_lists_reasons():
    d = load_dictionary()
    tags, report = audit_eligibility(d["features"], VOT)
    assert len(tags) == 44
    assert report["counts"]["vot_admissible"] == 44
    assert all(dec["reason"] for dec in report["decisions"])


def _run_fn(vot, dictionary, admissible):
    def fn(ds):
        ex = extract_features(ds, vot)
        raw = build_raw_matrix(ex, dictionary, admissible)
        return assemble_matrix(raw, ds, ex.fit_ids, dictionary, {"seed": 0}).matrix
    return fn


@pytest.fixture(scope="module")
def probe_setup(small_result):
    d = load_dictionary()
    tags, _ = audit_eligibility(d["features"], VOT)
    adm = [t.feature_name for t in tags if t.tag == "vot_admissible"]
    return small_result.dataset, d, adm


def test_probe_passes_for_windowed_pipeline(probe_setup):
    ds, d, adm = probe_setup
    ok, report = leakage_probe(_run_fn(VOT, d, adm), ds, VOT, seed=1, n_inject=100)
    assert ok, report
    assert report["n_injected"] == 100


def test_probe_catches_off_by_one_extractor(probe_setup):
    ds, d, adm = probe_setup
    buggy = _run_fn(with_cutoff(VOT, VOT.cutoff + 1), d, adm)
    ok, report = leakage_probe(buggy, ds, VOT, seed=1, n_inject=100)
    assert not ok
    assert report["changed_columns"]
    assert "n_attempted" in report["changed_columns"]


def test_perturbation_only_touches_future(small_result):
    ds = small_result.dataset
    p = perturb_future(ds, VOT, np.random.default_rng(0), n_inject=50)
    assert len(p.enrolments) == len(ds.enrolments) + 50
    before = build_windows(ds, VOT)
    after = build_windows(p, VOT)
    assert all(before[s].key() == after[s].key() for s in before)
