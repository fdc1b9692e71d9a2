import json

import numpy as np
import pytest

from capire.assembly import (
    INDICATOR_SUFFIX,
    ConfigError,
    FeatureMatrix,
    OutputExists,
    check_firewall,
    config_hash,
    fit_imputation,
    apply_imputation,
    assemble,
    impute,
    standardize_apply,
    standardize_fit,
)
from capire.features import extract_features, load_dictionary
from capire.vot import VotConfig

NAN = np.nan


def _dictionary():
    return {"features": [
        {"name": "deprivation_index", "level": "N1", "group": "base"},
        {"name": "hs_gpa", "level": "N2", "group": "base"},
        {"name": "grade_mean", "level": "N3", "group": "base"},
        {"name": "load_trend", "level": "N4", "group": "base", "imputation": "interpolate"},
        {"name": "max_gap", "level": "N4", "group": "base"},
    ]}


def _raw():
    cols = ["deprivation_index", "hs_gpa", "grade_mean", "load_trend", "max_gap"]
    vals = np.array([
        [0.2, 7.0, 6.0, 1.0, 0.0],
        [0.4, 7.4, NAN, NAN, 1.0],
        [0.31, NAN, 5.0, 0.0, NAN],
        [NAN, 7.2, 7.0, -1.0, 0.0],
        [0.9, 8.0, 8.0, 0.5, 2.0],
    ])
    return FeatureMatrix([f"s{i}" for i in range(5)], cols, vals, ["N1", "N2", "N3", "N4", "N4"])


REGIONS = ["AA", "AA", "AA", "AA", "BB"]


def test_imputation_policies():
    m, model = impute(_raw(), _dictionary(), None, REGIONS, fit_rows=[0, 1, 2, 3])
    # training mean over rows 0, 1, 3
    assert m.column("hs_gpa")[2] == pytest.approx((7.0 + 7.4 + 7.2) / 3)
    assert m.column("hs_gpa" + INDICATOR_SUFFIX)[2] == 1.0
    # region AA training median of {0.2, 0.4, 0.31}
    assert m.column("deprivation_index")[3] == pytest.approx(0.31)
    assert m.column("deprivation_index" + INDICATOR_SUFFIX).tolist() == [0, 0, 0, 1, 0]
    # N3 never imputed and has no indicator
    assert np.isnan(m.column("grade_mean")[1])
    assert "grade_mean" + INDICATOR_SUFFIX not in m.columns
    # interpolation only where the dictionary allows it
    assert m.column("load_trend")[1] == 0.0
    assert np.isnan(m.column("max_gap")[2])
    assert set(m.kinds) == {"feature", "indicator"}


def test_unseen_region_uses_global_median():
    model = fit_imputation(_raw(), _dictionary(), None, REGIONS, fit_rows=[0, 1, 2, 4])
    m = apply_imputation(_raw(), model, ["AA", "AA", "AA", "ZZ", "BB"])
    assert m.column("deprivation_index")[3] == pytest.approx(np.median([0.2, 0.4, 0.31, 0.9]))


def test_no_n1_n2_missing_after_imputation():
    m, _ = impute(_raw(), _dictionary(), None, REGIONS)
    for lv in ("N1", "N2"):
        for j, level in enumerate(m.levels):
            if level == lv:
                assert not np.isnan(m.values[:, j]).any()


def test_policy_for_unknown_level_is_config_error():
    with pytest.raises(ConfigError):
        impute(_raw(), _dictionary(), {"N1": "region_median", "N9": "train_mean"}, REGIONS)
    with pytest.raises(ConfigError):
        impute(_raw(), _dictionary(), {"N1": "magic", "N2": "train_mean", "N3": "never", "N4": "never"},
               REGIONS)


def test_standardize_example():
    s = standardize_fit(np.array([[1.0], [2.0], [3.0]]), ["a"])
    assert s.mean[0] == 2.0
    assert s.std[0] == pytest.approx(np.sqrt(2 / 3), abs=1e-12)
    assert standardize_apply(s, np.array([[2.0]]), ["a"])[0, 0] == 0.0


def test_constant_column_passes_through():
    s = standardize_fit(np.array([[5.0, 1.0], [5.0, 2.0]]), ["c", "v"])
    assert s.constant.tolist() == [True, False]
    out = standardize_apply(s, np.array([[7.0, 1.5]]), ["c", "v"])
    assert out[0, 0] == 7.0


def test_repeated_inexact_value_counts_as_constant():
    # np.std of 1500 copies of 0.09 is ~3e-17 because the mean is rounded
    x = np.full((1500, 1), 0.09)
    assert standardize_fit(x, ["c"]).constant.tolist() == [True]
    assert not standardize_fit(np.array([[0.09], [0.09 + 1e-9]]), ["c"]).constant[0]


def test_standardize_rowwise_and_column_check():
    s = standardize_fit(np.random.default_rng(0).normal(size=(20, 3)), list("abc"))
    rows = np.random.default_rng(1).normal(size=(6, 3))
    together = standardize_apply(s, rows, list("abc"))
    alone = np.vstack([standardize_apply(s, rows[i:i + 1], list("abc")) for i in range(6)])
    assert np.array_equal(together, alone)
    with pytest.raises(ValueError):
        standardize_apply(s, rows, list("abd"))


def test_config_hash():
    a = {"seed": 1, "vot": {"cutoff": 3, "horizon": 12}}
    assert config_hash(a) == config_hash(json.loads(json.dumps(a)))
    assert len(config_hash(a)) == 64
    assert config_hash(a) != config_hash({"seed": 1, "vot": {"cutoff": 4, "horizon": 12}})
    assert config_hash(a) == config_hash({"vot": {"horizon": 12, "cutoff": 3}, "seed": 1})
    assert config_hash({"x": 1}) == config_hash({"x": 1.0})
    with pytest.raises(TypeError):
        config_hash({"x": object()})


def test_firewall_blocks_labels():
    with pytest.raises(ConfigError):
        check_firewall(["pass_rate", "attrition_flag"])
    with pytest.raises(ConfigError):
        check_firewall(["final_gpa"], excluded_names=["final_gpa"])


def test_assemble_writes_identical_files(tmp_path, small_result):
    d = load_dictionary()
    ex = extract_features(small_result.dataset, VotConfig())
    names = [f["name"] for f in d["features"]]
    a = assemble(ex, small_result.dataset, d, names, {"seed": 0}, out_dir=tmp_path / "a")
    assemble(ex, small_result.dataset, d, names, {"seed": 0}, out_dir=tmp_path / "b")
    for f in ("matrix.csv", "imputation.json", "scaling_stats.json", "raw_features.csv", "friction.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["sample_size"] == len(ex.student_ids) == a.matrix.values.shape[0]
    assert man["feature_count"] == 44
    assert man["missing_fraction"]["grade_mean"] == pytest.approx(np.isnan(a.matrix.column("grade_mean")).mean())
    with pytest.raises(OutputExists):
        assemble(ex, small_result.dataset, d, names, {"seed": 0}, out_dir=tmp_path / "a")
    assemble(ex, small_result.dataset, d, names, {"seed": 0}, out_dir=tmp_path / "a", force=True)
