import numpy as np
import pytest

from capire.discovery import ClusterParams, EmbeddingParams, discover
from capire.forest import ForestConfig, SplitConfig
from capire.stats import UndefinedIndex
from capire.validation import (
    bootstrap_stability,
    default_grid,
    hyperparameter_sensitivity,
    noise_analysis,
    permutation_silhouette_test,
    recluster_noise,
    split_discrepancy,
    temporal_stability,
)
from helpers import blobs, micro_template_matrix, uniform_null

FAST = ClusterParams(EmbeddingParams(n_epochs=100), min_archetype_size=20)


@pytest.fixture(scope="module")
def five_blobs():
    centres = np.random.default_rng(7).normal(scale=8, size=(5, 10))
    return blobs(60, centres, 1.0, 3)


def test_bootstrap_planted_high(five_blobs):
    x, truth = five_blobs
    rep = bootstrap_stability(x, truth, FAST, B=5, seed=0)
    assert rep.mean >= 0.8 and rep.skipped == 0 and len(rep.aris) == 5
    assert rep.ci_low <= rep.mean <= rep.ci_high


def test_bootstrap_null_low():
    x = uniform_null(n=300, d=10, seed=1)
    ref = discover(x, FAST).labels
    rep = bootstrap_stability(x, ref, FAST, B=5, seed=0)
    assert rep.mean < 0.3


def test_bootstrap_deterministic(five_blobs):
    x, truth = five_blobs
    assert bootstrap_stability(x, truth, FAST, B=2, seed=4).aris == bootstrap_stability(x, truth, FAST, B=2, seed=4).aris


def test_bootstrap_skips_collapsed_resamples():
    x, truth = blobs(8, [[0, 0], [9, 9]], 1.0, 0)
    rep = bootstrap_stability(x, truth, FAST, B=3, seed=0)
    assert rep.skipped == 3 and rep.mean is None


def test_permutation_planted_hits_floor(five_blobs):
    x, truth = five_blobs
    rep = permutation_silhouette_test(x, truth, P=100, seed=0)
    assert rep.p_value == pytest.approx(1 / 101)
    assert rep.observed > rep.null_mean


def test_permutation_random_labels():
    x = np.random.default_rng(0).normal(size=(200, 3))
    lab = np.random.default_rng(1).integers(0, 3, 200)
    assert permutation_silhouette_test(x, lab, P=100, seed=0).p_value > 0.05


def test_permutation_below_null_mean():
    x, _ = blobs(20, [[0, 0], [0, 0], [100, 0], [100, 0]], 0.01, 0)
    # each label takes half of each far-apart group
    lab = np.r_[np.zeros(20), np.ones(20), np.zeros(20), np.ones(20)].astype(int)
    rep = permutation_silhouette_test(x, lab, P=100, seed=0)
    assert rep.observed < rep.null_mean and rep.p_value > 0.5


def test_permutation_noise_held_fixed_and_single_cluster_error():
    x, truth = blobs(30, [[0, 0], [9, 9]], 1.0, 0)
    lab = truth.copy()
    lab[:5] = -1
    assert permutation_silhouette_test(x, lab, P=20).p_value == pytest.approx(1 / 21)
    with pytest.raises(UndefinedIndex):
        permutation_silhouette_test(x, np.where(truth == 0, 0, -1), P=5)


def _temporal_data(drift):
    rng = np.random.default_rng(0)
    centres = rng.normal(scale=8, size=(3, 6))
    x, grp = blobs(300, centres, 1.0, 1)
    cohorts = rng.integers(2005, 2017, size=len(x))
    rate = np.array([0.2, 0.5, 0.8])[grp]
    if drift:
        rate = np.where((grp == 0) & (cohorts >= 2011), 0.6, rate)
    att = (rng.random(len(x)) < rate).astype(float)
    return x, cohorts, att, grp


def test_temporal_stationary_small():
    x, cohorts, att, _ = _temporal_data(False)
    rep = temporal_stability(x, cohorts, att, 2011, FAST)
    assert rep["n_archetypes"] == 3
    assert rep["max_abs_delta_pp"] < 10


def test_temporal_drift_detected():
    x, cohorts, att, _ = _temporal_data(True)
    rep = temporal_stability(x, cohorts, att, 2011, FAST)
    assert rep["max_abs_delta_pp"] > 25
    assert any(r["exceeds_band"] for r in rep["archetypes"])


def test_temporal_empty_period():
    x, _, att, _ = _temporal_data(False)
    with pytest.raises(ValueError):
        temporal_stability(x, np.full(len(x), 2005), att, 2011, FAST)


def test_temporal_flags_archetype_without_period2_members():
    rng = np.random.default_rng(0)
    x1, _ = blobs(100, [[0, 0, 0], [20, 0, 0]], 1.0, 0)
    x2, _ = blobs(50, [[0, 0, 0]], 1.0, 1)
    x = np.vstack([x1, x2])
    cohorts = np.r_[np.full(200, 2005), np.full(50, 2015)]
    att = rng.integers(0, 2, len(x)).astype(float)
    rep = temporal_stability(x, cohorts, att, 2011, FAST)
    assert rep["n_archetypes"] == 2
    assert sum(r["undefined"] for r in rep["archetypes"]) == 1


def test_sensitivity_reference_cell_is_one(five_blobs):
    x, _ = five_blobs
    grid = {"n_neighbors": [15], "eps_scale": [0.8, 1.0], "min_pts": [10]}
    rep = hyperparameter_sensitivity(x, FAST, grid)
    ref = [c for c in rep["cells"] if c["eps_scale"] == 1.0][0]
    assert ref["ari"] == 1.0
    assert rep["n_cells"] == 2 and rep["min_ari"] >= 0.8


def test_sensitivity_failed_cell_recorded():
    x, _ = blobs(20, [[0, 0], [9, 9]], 1.0, 0)
    grid = {"n_neighbors": [5, 60], "eps_scale": [1.0], "min_pts": [5]}
    rep = hyperparameter_sensitivity(x, ClusterParams(EmbeddingParams(n_neighbors=5, n_epochs=50),
                                                      min_pts=5, min_archetype_size=10), grid)
    assert rep["n_failed"] == 1 and rep["n_cells"] == 2


def test_default_grid_has_27_cells():
    g = default_grid(ClusterParams())
    assert len(g["n_neighbors"]) * len(g["eps_scale"]) * len(g["min_pts"]) == 27


def test_noise_same_distribution_not_significant():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(300, 3))
    labels = np.where(rng.random(300) < 0.2, -1, 0)
    rep = noise_analysis(x, ["age_at_entry", "ifc_mean", "max_gap"], labels)
    ps = [f["mann_whitney_p"] for f in rep["features"]]
    assert sum(p > 0.05 for p in ps) >= 2


def test_noise_lower_variance_detected():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(300, 3))
    labels = np.zeros(300, int)
    labels[:40] = -1
    x[:40, 0] *= 0.2
    rep = noise_analysis(x, ["age_at_entry", "ifc_mean", "max_gap"], labels)
    age = rep["features"][0]
    assert age["levene_p"] < 0.05 and age["noise_std"] < age["clustered_std"]


def test_noise_micro_templates_recluster():
    x, cols, truth = micro_template_matrix(0)
    labels = np.where(truth >= 5, -1, truth)
    rep = noise_analysis(x, cols, labels, recluster_x=x)
    for method in ("kmeans", "agglomerative"):
        assert rep["reclustering"][method]["k"] == 2
        assert rep["reclustering"][method]["silhouette"] > 0.5


def test_noise_small_and_empty_groups():
    x = np.random.default_rng(0).normal(size=(50, 3))
    labels = np.zeros(50, int)
    with pytest.raises(ValueError):
        noise_analysis(x, ["a", "b", "c"], labels)
    labels[:5] = -1
    assert "at least 10" in noise_analysis(x, ["a", "b", "c"], labels)["skipped"]


def test_recluster_noise_deterministic():
    x, _ = blobs(30, [[0, 0], [10, 0], [0, 10]], 1.0, 0)
    a, b = recluster_noise(x, seed=3), recluster_noise(x, seed=3)
    assert a["kmeans"]["labels"] == b["kmeans"]["labels"]
    assert a["kmeans"]["k"] == 3


FOREST = ForestConfig(n_trees=30, seed=0)


def test_split_discrepancy_stationary_small(five_blobs):
    x, truth = five_blobs
    cohorts = np.random.default_rng(0).integers(2005, 2017, len(x))
    rep = split_discrepancy(x, truth, cohorts, [f"f{j}" for j in range(x.shape[1])], FOREST,
                            SplitConfig(split_year=2011))
    assert abs(rep["gap"]) < 0.05


def test_split_discrepancy_planted_leak():
    rng = np.random.default_rng(0)
    n = 600
    cohorts = rng.integers(2005, 2017, n)
    a, b = rng.normal(size=n), rng.normal(size=n)
    late = cohorts >= 2011
    # the label follows a in early cohorts and b in later ones
    labels = np.where(late, b > 0, a > 0).astype(int)
    x = np.c_[a, b, cohorts.astype(float)]
    rep = split_discrepancy(x, labels, cohorts, ["a", "b", "cohort"], FOREST, SplitConfig(split_year=2011))
    assert rep["gap"] > 0.2


def test_split_discrepancy_single_cohort(five_blobs):
    x, truth = five_blobs
    rep = split_discrepancy(x, truth, np.full(len(x), 2010), [f"f{j}" for j in range(x.shape[1])], FOREST)
    assert rep["cohort_split_metric"] is None and "impossible" in rep["note"]
