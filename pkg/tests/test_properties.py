"""Property-based checks of the invariants that hold for any input."""

import json

import numpy as np
import pandas as pd
from hypothesis import assume, given, settings, strategies as st

from capire.assembly import config_hash, standardize_apply, standardize_fit
from capire.discovery import ClusterParams, EmbeddingParams, dbscan
from capire.forest import stratified_split
from capire.stats import adjusted_rand_index, mann_whitney_u
from capire.validation import bootstrap_stability, permutation_silhouette_test
from capire.vot import VotConfig, slice_trajectory
from helpers import blobs
import oracles

labelings = st.integers(2, 40).flatmap(
    lambda n: st.tuples(st.lists(st.integers(-1, 4), min_size=n, max_size=n),
                        st.lists(st.integers(-1, 4), min_size=n, max_size=n)))


@given(labelings)
def test_ari_symmetric_and_matches_pair_count(ab):
    a, b = ab
    v = adjusted_rand_index(a, b)
    assert v == adjusted_rand_index(b, a)
    assert np.isclose(v, oracles.ari_pairs(a, b), rtol=1e-9, atol=1e-12)


@given(labelings)
def test_ari_self_is_one(ab):
    assert adjusted_rand_index(ab[0], ab[0]) == 1.0


@given(labelings, st.permutations(range(-1, 5)))
def test_ari_invariant_to_renaming(ab, perm):
    a, b = ab
    rename = dict(zip(range(-1, 5), perm))
    assert np.isclose(adjusted_rand_index([rename[v] for v in a], b), adjusted_rand_index(a, b), atol=1e-12)


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.integers(5, 40))
def test_permutation_p_bounded_by_floor(seed, P):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(40, 2))
    lab = rng.integers(0, 2, 40)
    assume(len(set(lab)) == 2)
    p = permutation_silhouette_test(x, lab, P=P, seed=seed).p_value
    assert 1 / (P + 1) - 1e-12 <= p <= 1.0


samples = st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=10)


@given(samples)
def test_mann_whitney_identical_samples_centre(x):
    u, p = mann_whitney_u(x, x)
    assert u == len(x) ** 2 / 2
    assert p > 0.5 or len(x) == 1


@given(samples, samples)
def test_mann_whitney_matches_pair_count(x, y):
    u, _ = mann_whitney_u(x, y)
    assert u == oracles.mann_whitney_u(x, y)


@given(st.lists(st.integers(0, 5), min_size=20, max_size=300), st.integers(0, 1000),
       st.floats(0.2, 0.8))
def test_stratified_split_partitions_per_class(labels, seed, f):
    labels = np.asarray(labels)
    counts = np.bincount(labels)
    assume(all(c == 0 or c >= 2 for c in counts))
    tr, te = stratified_split(labels, f, seed)
    assert np.array_equal(np.sort(np.r_[tr, te]), np.arange(len(labels)))
    for c in np.flatnonzero(counts):
        k = np.sum(labels[tr] == c)
        assert 1 <= k <= counts[c] - 1
        assert abs(k - f * counts[c]) <= 1


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_dbscan_deterministic(seed):
    x = np.random.default_rng(seed).normal(size=(60, 2))
    assert np.array_equal(dbscan(x, 0.4, 4), dbscan(x, 0.4, 4))


def test_bootstrap_stability_falls_with_overlap():
    params = ClusterParams(EmbeddingParams(n_epochs=100), min_archetype_size=20)
    means = []
    for sep in (12.0, 4.0, 0.0):
        x, truth = blobs(80, [[0, 0, 0], [sep, 0, 0], [0, sep, 0]], 1.0, 0)
        means.append(bootstrap_stability(x, truth, params, B=4, seed=0).mean or 0.0)
    assert means[0] >= means[1] >= means[2]
    assert means[0] - means[2] > 0.4


events = st.lists(st.tuples(st.integers(0, 12), st.sampled_from(["passed", "failed", "dropped"])),
                  max_size=12)


@given(st.integers(0, 6), events, events, st.integers(1, 6))
def test_window_ignores_post_cutoff_events(entry, before, after, cutoff):
    vot = VotConfig(cutoff=cutoff, horizon=max(cutoff, 12))

    def frame(evs, tag):
        return pd.DataFrame({
            "student_id": ["a"] * len(evs),
            "course_id": [f"{tag}{i}" for i in range(len(evs))],
            "term_index": [entry + t for t, _ in evs],
            "state": [s for _, s in evs],
            "grade": [7.0 if s == "passed" else 2.0 for _, s in evs],
        })

    base = frame(before, "B")
    late = frame([(cutoff + t, s) for t, s in after], "L")
    student = {"student_id": "a", "entry_term": entry}
    w0 = slice_trajectory(student, base, vot)
    w1 = slice_trajectory(student, pd.concat([base, late], ignore_index=True), vot)
    assert w0.course_ids == w1.course_ids and w0.states == w1.states
    assert np.array_equal(w0.rel_terms, w1.rel_terms) and np.array_equal(w0.grades, w1.grades)
    assert np.all(w1.rel_terms < cutoff)


@given(st.integers(2, 30).flatmap(lambda n: st.lists(
    st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=3, max_size=3), min_size=n, max_size=n)))
def test_standardize_is_pointwise(rows):
    x = np.asarray(rows)
    stats = standardize_fit(x, ["a", "b", "c"])
    full = standardize_apply(stats, x, ["a", "b", "c"])
    for i in range(len(x)):
        assert np.array_equal(standardize_apply(stats, x[i:i + 1], ["a", "b", "c"])[0], full[i])


config_values = st.recursive(
    st.none() | st.booleans() | st.integers(-100, 100) | st.text(max_size=5),
    lambda inner: st.lists(inner, max_size=3) | st.dictionaries(st.text(max_size=4), inner, max_size=4),
    max_leaves=10)


@given(st.dictionaries(st.text(max_size=6), config_values, min_size=1, max_size=6), st.randoms())
def test_config_hash_ignores_key_order(cfg, rnd):
    keys = list(cfg)
    rnd.shuffle(keys)
    shuffled = json.loads(json.dumps({k: cfg[k] for k in keys}))
    assert config_hash(shuffled) == config_hash(cfg)
