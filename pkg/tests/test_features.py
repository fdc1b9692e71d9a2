import math

import numpy as np
import pytest

from capire.domain import coerce_dataset
from capire.features import (
    LEVEL_SIZES,
    ConfigError,
    ExtractionContext,
    UndefinedFriction,
    compute_ifc_course,
    compute_ifc_mean,
    compute_load_trend,
    compute_max_gap,
    compute_state_entropy,
    compute_velocity,
    extract_features,
    extract_n1,
    extract_n2,
    extract_n3,
    extract_n4,
    fit_friction_table,
    generate_interactions,
    load_dictionary,
)
from capire.vot import VotConfig, WindowedTrajectory
from helpers import toy_tables

VOT = VotConfig()


def _window(courses, terms, states, grades=None):
    grades = [math.nan if s == "dropped" else 6.0 for s in states] if grades is None else grades
    return WindowedTrajectory("x", 0, tuple(courses), np.asarray(terms, dtype=np.int64), tuple(states),
                              np.asarray(grades, dtype=float))


@pytest.mark.parametrize("args,expected", [
    ((10, 2, 3, 1.0, 0.5), 0.35),
    ((10, 0, 0, 1.0, 0.5), 0.0),
    ((5, 5, 0, 1.0, 0.5), 1.0),
])
def test_ifc_course(args, expected):
    assert compute_ifc_course(*args) == pytest.approx(expected, abs=1e-12)


def test_ifc_course_needs_attempts():
    with pytest.raises(UndefinedFriction):
        compute_ifc_course(0, 0, 0)


def _table(ifc):
    t = fit_friction_table([])
    t.ifc.update(ifc)
    return t


def test_ifc_mean_examples():
    assert compute_ifc_mean(["A", "B"], _table({"A": 0.2, "B": 0.4})) == pytest.approx(0.3)
    assert compute_ifc_mean(["A"], _table({"A": 0.35})) == pytest.approx(0.35)
    assert compute_ifc_mean(["A", "A", "B"], _table({"A": 0.6, "B": 0.0})) == pytest.approx(0.3)
    assert math.isnan(compute_ifc_mean([], _table({})))


@pytest.mark.parametrize("counts,expected", [
    ({"passed": 4}, 0.0),
    ({"passed": 1, "failed": 1, "dropped": 1, "not_attempted": 1}, 2.0),
    ({"passed": 2, "failed": 1, "dropped": 1}, 1.5),
])
def test_state_entropy(counts, expected):
    assert compute_state_entropy(counts) == pytest.approx(expected, abs=1e-12)


def test_state_entropy_empty_is_missing():
    assert math.isnan(compute_state_entropy({"passed": 0}))


@pytest.mark.parametrize("loads,expected", [([3, 3, 3], 0.0), ([2, 3, 4], 1.0), ([4, 2], -2.0)])
def test_load_trend(loads, expected):
    assert compute_load_trend(loads) == pytest.approx(expected, abs=1e-12)


def test_load_trend_single_term_missing():
    assert math.isnan(compute_load_trend([5]))


@pytest.mark.parametrize("terms,expected", [([0, 1, 2], 0), ([0, 1, 4], 2), ([0], 0)])
def test_max_gap(terms, expected):
    assert compute_max_gap(terms) == expected


def test_max_gap_empty_missing():
    assert math.isnan(compute_max_gap([]))


@pytest.mark.parametrize("c,e,expected", [(4, 8, 0.5), (8, 8, 1.0), (0, 8, 0.0)])
def test_velocity(c, e, expected):
    assert compute_velocity(c, e) == expected


def test_velocity_edges():
    assert math.isnan(compute_velocity(3, 0))
    with pytest.raises(ValueError):
        compute_velocity(-1, 4)


def test_n3_all_dropped_window():
    w = _window(["A", "B"], [0, 1], ["dropped", "dropped"])
    f = extract_n3(w, _table({"A": 0.1, "B": 0.2}))
    assert f["libre_rate"] == 1.0
    assert all(math.isnan(f[k]) for k in ("grade_mean", "grade_median", "grade_std"))


def test_n3_rates_and_filter_exposure():
    w = _window(["A", "B", "C", "D"], [0, 0, 1, 1], ["passed", "passed", "passed", "failed"])
    f = extract_n3(w, _table({"A": 0.6, "B": 0.3, "C": 0.0, "D": 0.1}), filter_threshold=0.5)
    assert f["pass_rate"] == 0.75
    assert f["filter_exposure_count"] == 1
    assert f["n_filter_courses"] == 1
    assert len(f) == LEVEL_SIZES["N3"]


def test_n3_repeat_attempts():
    w = _window(["A", "A", "A", "B"], [0, 1, 2, 2], ["failed", "failed", "passed", "passed"])
    f = extract_n3(w, _table({"A": 0.7, "B": 0.0}))
    assert f["max_attempts_single_course"] == 3
    assert f["filter_exposure_count"] == 3
    assert f["n_distinct_courses"] == 2


@pytest.fixture(scope="module")
def toy():
    ds = coerce_dataset(toy_tables())
    return ds, ExtractionContext.from_dataset(ds)


def test_n4_contiguous_passing(toy):
    _, ctx = toy
    w = _window(["C1", "C2"], [0, 1], ["passed", "passed"])
    f = extract_n4(w, ctx, VOT)
    assert f["max_gap"] == 0 and f["state_entropy"] == 0.0
    assert f["velocity"] == 1.0  # two courses expected by offset 2


def test_n4_gap_and_mixed_states(toy):
    _, ctx = toy
    w = _window(["C1", "C2", "C1"], [0, 1, 4], ["failed", "dropped", "passed"])
    f = extract_n4(w, ctx, VotConfig(cutoff=5))
    assert f["max_gap"] == 2
    assert f["state_entropy"] > 0


def test_n4_empty_window_all_missing(toy):
    _, ctx = toy
    f = extract_n4(_window([], [], []), ctx, VOT)
    assert len(f) == 6 and all(math.isnan(v) for v in f.values())


def test_n1_lookup_and_unknown_postcode(toy):
    ds, ctx = toy
    st = ds.students.to_dict("records")[0]
    f = extract_n1(st, ctx)
    assert f["deprivation_index"] == 0.3
    assert f["secondary_public"] == 1.0 and f["secondary_private"] == 0.0
    f = extract_n1({**st, "postcode": "ZZ9"}, ctx)
    assert math.isnan(f["deprivation_index"]) and math.isnan(f["area_poverty_t0"])
    f = extract_n1({**st, "parental_education": None}, ctx)
    assert math.isnan(f["parental_education"])
    assert len(f) == LEVEL_SIZES["N1"]


def test_n2_anchored_to_entry_term(toy):
    ds, ctx = toy
    st = ds.students.to_dict("records")[2]  # enters at term 1
    f = extract_n2(st, ctx)
    assert f["age_at_entry"] == 18.2 and f["inflation_t0"] == 0.1 and f["strikes_24m_t0"] == 2
    assert len(f) == LEVEL_SIZES["N2"]
    with pytest.raises(ConfigError):
        extract_n2({**st, "entry_term": 99}, ctx)


def test_interactions():
    base = {"ifc_mean": 0.4, "libre_rate": 0.5, "age_at_entry": 18.0, "mean_attempts_per_course": 1.5,
            "deprivation_index": 0.2, "pass_rate": 0.5, "filter_exposure_count": 2.0, "max_gap": 1.0}
    out = generate_interactions(base)
    assert len(out) == 4 and out["ifc_x_libre"] == pytest.approx(0.2)
    assert math.isnan(generate_interactions({**base, "max_gap": math.nan})["filter_exposure_x_gap"])
    with pytest.raises(ConfigError):
        generate_interactions(base, [("bad", "ifc_mean", "nope")])


def test_dictionary_counts():
    d = load_dictionary()
    levels = [f["level"] for f in d["features"]]
    assert {lv: levels.count(lv) for lv in LEVEL_SIZES} == LEVEL_SIZES
    assert sum(1 for f in d["features"] if f["group"] == "interaction") == 4


def test_extract_features_toy(toy):
    ds, _ = toy
    ex = extract_features(ds, VOT)
    assert ex.student_ids == ["s1", "s2", "s3"]
    assert all(len(v) == 44 for v in ex.vectors)
    # C1: 4 attempts, 1 failed; C2: 2 attempts, 1 failed
    assert ex.friction.ifc["C1"] == pytest.approx(0.125)
    assert ex.friction.ifc["C2"] == pytest.approx(0.25)


def test_friction_fitted_on_fit_population_only(toy):
    ds, _ = toy
    ex = extract_features(ds, VOT, fit_ids=["s1"])
    assert ex.friction.attempted == {"C1": 1, "C2": 1}
    assert len(ex.vectors) == 3
