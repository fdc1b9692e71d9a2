"""Stability, significance, sensitivity and noise-group diagnostics for a clustering."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.cluster.vq import kmeans2
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from . import forest as rf
from .discovery import ClusterParams, DegenerateInput, cluster_coords, embed, kdistance, suggest_eps
from .stats import UndefinedIndex, adjusted_rand_index, levene, mann_whitney_u, silhouette_samples, spread_is_negligible

NOISE_FEATURES = ("age_at_entry", "ifc_mean", "max_gap")


def _ci(values):
    if not len(values):
        return None, None
    lo, hi = np.percentile(values, [2.5, 97.5])
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------

@dataclass
class StabilityReport:
    B: int
    aris: list
    skipped: int
    mean: float | None
    std: float | None
    ci_low: float | None
    ci_high: float | None

    def to_dict(self):
        return asdict(self)


def bootstrap_stability(x, reference_labels, params: ClusterParams = ClusterParams(), B: int = 100,
                        seed: int = 0) -> StabilityReport:
    """Resample rows with replacement, re-embed and re-cluster, ARI on the distinct rows drawn.

    Duplicated rows keep one label (their first occurrence). The density
    threshold is re-derived for every resample when ``params.eps`` is auto.
    """
    x = np.asarray(x, dtype=float)
    ref = np.asarray(reference_labels)
    n = len(x)
    aris, skipped = [], 0
    for b in range(B):
        rng = np.random.default_rng([int(seed), b])
        idx = rng.integers(0, n, size=n)
        uniq, first = np.unique(idx, return_index=True)
        if len(uniq) < params.embedding.n_neighbors + 1:
            skipped += 1
            continue
        emb = replace(params.embedding, seed=int(rng.integers(0, 2**31 - 1)))
        try:
            coords = embed(x[idx], emb)
        except DegenerateInput:
            skipped += 1
            continue
        sol = cluster_coords(coords, replace(params, embedding=emb))
        aris.append(adjusted_rand_index(ref[uniq], sol.labels[first]))
    lo, hi = _ci(aris)
    return StabilityReport(B, [float(a) for a in aris], skipped,
                           float(np.mean(aris)) if aris else None,
                           float(np.std(aris)) if aris else None, lo, hi)


# ---------------------------------------------------------------------------
# Permutation test
# ---------------------------------------------------------------------------

@dataclass
class PermutationReport:
    observed: float
    null_scores: list
    null_mean: float
    p_value: float
    P: int

    def to_dict(self):
        return asdict(self)


def permutation_silhouette_test(coords, labels, P: int = 100, seed: int = 0) -> PermutationReport:
    """Silhouette of the clustering against ``P`` label permutations among clustered points."""
    coords = np.asarray(coords, dtype=float)
    labels = np.asarray(labels)
    keep = labels >= 0
    lab = labels[keep]
    if len(np.unique(lab)) < 2:
        raise UndefinedIndex("permutation test needs at least two retained clusters")
    d = cdist(coords[keep], coords[keep])
    observed = float(np.mean(silhouette_samples(None, lab, distances=d)))
    rng = np.random.default_rng(seed)
    null = [float(np.mean(silhouette_samples(None, rng.permutation(lab), distances=d))) for _ in range(P)]
    p = (1 + sum(s >= observed for s in null)) / (P + 1)
    return PermutationReport(observed, null, float(np.mean(null)), float(p), P)


# ---------------------------------------------------------------------------
# Temporal stability
# ---------------------------------------------------------------------------

def temporal_stability(x, cohorts, attrition, split_year: int, params: ClusterParams = ClusterParams(),
                       threshold_pp: float = 5.0) -> dict:
    """Cluster the early cohorts, assign later ones to their nearest early neighbour.

    The layout has no out-of-sample transform, so assignment happens in the
    feature space. Deltas are in percentage points (period 2 minus period 1).
    """
    x = np.asarray(x, dtype=float)
    cohorts = np.asarray(cohorts)
    att = np.asarray(attrition, dtype=float)
    p1 = np.flatnonzero(cohorts < split_year)
    p2 = np.flatnonzero(cohorts >= split_year)
    if len(p1) == 0 or len(p2) == 0:
        raise ValueError(f"split year {split_year} leaves an empty period")
    sol = cluster_coords(embed(x[p1], params.embedding), params)
    lab1 = sol.labels
    _, nn = cKDTree(x[p1]).query(x[p2], k=1)
    lab2 = lab1[nn]
    rows = []
    for k in range(sol.n_archetypes):
        m1 = lab1 == k
        m2 = lab2 == k
        a1 = float(np.nanmean(att[p1][m1])) if m1.any() else None
        a2 = float(np.nanmean(att[p2][m2])) if m2.any() else None
        delta = None if (a1 is None or a2 is None) else 100.0 * (a2 - a1)
        rows.append({"archetype": k, "n_period1": int(m1.sum()), "n_period2": int(m2.sum()),
                     "attrition_period1": a1, "attrition_period2": a2, "delta_pp": delta,
                     "undefined": delta is None,
                     "exceeds_band": bool(delta is not None and abs(delta) >= threshold_pp)})
    deltas = [abs(r["delta_pp"]) for r in rows if r["delta_pp"] is not None]
    return {"split_year": int(split_year), "n_period1": int(len(p1)), "n_period2": int(len(p2)),
            "n_archetypes": sol.n_archetypes, "eps": sol.eps, "threshold_pp": threshold_pp,
            "max_abs_delta_pp": max(deltas) if deltas else None, "archetypes": rows,
            "period1_labels": lab1.tolist(), "period2_labels": lab2.tolist()}


# ---------------------------------------------------------------------------
# Hyperparameter sensitivity
# ---------------------------------------------------------------------------

EPS_SCALES = (0.8, 1.0, 1.2)


def default_grid(params: ClusterParams) -> dict:
    """Defaults plus and minus one step on each axis.

    The eps axis is a multiplier on the configured eps, or on each cell's
    own k-distance elbow when eps is automatic. An explicit ``eps`` list in
    the grid gives absolute radii instead.
    """
    nn = params.embedding.n_neighbors
    mp = params.min_pts
    return {"n_neighbors": [max(2, nn - 5), nn, nn + 5], "eps_scale": list(EPS_SCALES),
            "min_pts": [max(2, mp - 5), mp, mp + 5]}


def _cell_eps(coords, mp, grid, value, params: ClusterParams):
    if "eps" in grid:
        return float(value)
    if params.eps != "auto":
        return float(value) * float(params.eps)
    return float(value) * suggest_eps(kdistance(coords, max(1, mp - 1)))


def hyperparameter_sensitivity(x, params: ClusterParams = ClusterParams(), grid: dict | None = None,
                               reference=None) -> dict:
    """ARI of every grid cell against the reference clustering.

    Cells reuse one layout per ``n_neighbors`` value; a failing cell is
    recorded and left out of the summary statistics.
    """
    x = np.asarray(x, dtype=float)
    if reference is None:
        reference = cluster_coords(embed(x, params.embedding), params)
    grid = dict(grid or default_grid(params))
    eps_key = "eps" if "eps" in grid else "eps_scale"
    table = []
    for nn in grid["n_neighbors"]:
        emb = replace(params.embedding, n_neighbors=int(nn))
        try:
            coords = embed(x, emb)
            err = None
        except (DegenerateInput, ValueError) as exc:
            coords, err = None, str(exc)
        for ev in grid[eps_key]:
            for mp in grid["min_pts"]:
                cell = {"n_neighbors": int(nn), eps_key: float(ev), "min_pts": int(mp), "eps": None}
                if coords is None:
                    table.append({**cell, "ari": None, "n_archetypes": None, "coverage": None, "error": err})
                    continue
                try:
                    eps = _cell_eps(coords, int(mp), grid, ev, params)
                    sol = cluster_coords(coords, replace(params, embedding=emb, min_pts=int(mp)), eps=eps)
                except ValueError as exc:
                    table.append({**cell, "ari": None, "n_archetypes": None, "coverage": None, "error": str(exc)})
                    continue
                table.append({**cell, "eps": eps, "ari": adjusted_rand_index(reference.labels, sol.labels),
                              "n_archetypes": sol.n_archetypes, "coverage": sol.coverage, "error": None})
    aris = [c["ari"] for c in table if c["ari"] is not None]
    return {"reference": {"n_neighbors": params.embedding.n_neighbors, "eps": reference.eps,
                          "min_pts": params.min_pts},
            "grid": grid, "n_cells": len(table), "n_failed": len(table) - len(aris),
            "mean_ari": float(np.mean(aris)) if aris else None,
            "min_ari": float(np.min(aris)) if aris else None,
            "max_ari": float(np.max(aris)) if aris else None,
            "cells": table}


# ---------------------------------------------------------------------------
# Noise group
# ---------------------------------------------------------------------------

def _best_k(x, labels_for_k, k_range):
    best = None
    table = []
    for k in k_range:
        if k >= len(x):
            break
        lab = labels_for_k(k)
        if len(np.unique(lab)) < 2:
            table.append({"k": k, "silhouette": None})
            continue
        s = float(np.mean(silhouette_samples(x, lab)))
        table.append({"k": k, "silhouette": s})
        if best is None or s > best[1]:
            best = (k, s, lab)
    return best, table


def recluster_noise(x, k_range=range(2, 7), seed: int = 0) -> dict:
    """k-means and average-linkage solutions on the noise rows, k picked by silhouette."""
    x = np.asarray(x, dtype=float)

    def km(k):
        # fixed per-k seed so each k is reproducible on its own
        _, lab = kmeans2(x, k, minit="++", seed=np.random.default_rng([int(seed), int(k)]))
        return lab

    tree = linkage(x, method="average")

    def agg(k):
        return fcluster(tree, t=k, criterion="maxclust") - 1

    out = {}
    for name, fn in (("kmeans", km), ("agglomerative", agg)):
        best, table = _best_k(x, fn, k_range)
        if best is None:
            out[name] = {"k": None, "silhouette": None, "sizes": [], "by_k": table}
        else:
            k, s, lab = best
            out[name] = {"k": int(k), "silhouette": s,
                         "sizes": [int(c) for c in np.bincount(lab)], "by_k": table,
                         "labels": [int(v) for v in lab]}
    return out


def noise_analysis(values, columns, labels, recluster_x=None, features=NOISE_FEATURES,
                   min_noise: int = 10, seed: int = 0) -> dict:
    """Noise-versus-clustered tests on analysis features, then re-clustering of the noise rows.

    ``values`` are the unscaled features used for the tests; ``recluster_x``
    (default: column-standardised ``values``) is the space for re-clustering.
    """
    x = np.asarray(values, dtype=float)
    labels = np.asarray(labels)
    noise = labels < 0
    report = {"n_noise": int(noise.sum()), "n_clustered": int((~noise).sum()), "features": [],
              "skipped": None, "reclustering": None}
    if noise.sum() == 0:
        raise ValueError("noise group is empty")
    if noise.sum() < min_noise:
        report["skipped"] = f"noise group has {int(noise.sum())} rows; at least {min_noise} needed"
        return report
    if (~noise).sum() < 2:
        report["skipped"] = "fewer than two clustered rows to compare against"
        return report
    col = {c: j for j, c in enumerate(columns)}
    for f in features:
        if f not in col:
            report["features"].append({"feature": f, "skipped": "not in matrix"})
            continue
        v = x[:, col[f]]
        a, b = v[noise], v[~noise]
        a, b = a[~np.isnan(a)], b[~np.isnan(b)]
        if len(a) < 2 or len(b) < 2:
            report["features"].append({"feature": f, "skipped": "too few observed values"})
            continue
        u, p_u = mann_whitney_u(a, b)
        w, p_w = levene(a, b)
        report["features"].append({"feature": f, "mann_whitney_u": u, "mann_whitney_p": p_u,
                                   "levene_w": w, "levene_p": p_w,
                                   "noise_median": float(np.median(a)), "clustered_median": float(np.median(b)),
                                   "noise_std": float(np.std(a)), "clustered_std": float(np.std(b))})
    if recluster_x is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mu, sd = np.nanmean(x, axis=0), np.nanstd(x, axis=0)
        recluster_x = np.nan_to_num((x - mu) / np.where(spread_is_negligible(sd, mu), 1.0, sd))
    report["reclustering"] = recluster_noise(np.asarray(recluster_x, float)[noise], seed=seed)
    return report


# ---------------------------------------------------------------------------
# Split discrepancy
# ---------------------------------------------------------------------------

def split_discrepancy(x, labels, cohorts, feature_names, forest_cfg: rf.ForestConfig = rf.ForestConfig(),
                      split: rf.SplitConfig = rf.SplitConfig()) -> dict:
    """Accuracy under a stratified random split and under a cohort split.

    A large gap suggests features that identify the entry period.
    """
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels)
    cohorts = np.asarray(cohorts)
    keep = np.flatnonzero(labels >= 0)
    x, labels, cohorts = x[keep], labels[keep], cohorts[keep]
    tr, te = rf.stratified_split(labels, split.train_fraction, split.seed)
    model = rf.train(x[tr], labels[tr], feature_names, forest_cfg)
    random_acc = rf.evaluate(model, x[te], labels[te])["accuracy"]
    out = {"random_split_metric": random_acc, "cohort_split_metric": None, "gap": None,
           "split_year": None, "note": None}
    try:
        tr, te, year = rf.cohort_split(cohorts, split.split_year, split.train_fraction)
    except rf.ModelError as exc:
        out["note"] = f"cohort split impossible: {exc}"
        return out
    if len(np.unique(labels[tr])) < 2:
        out["note"] = "cohort split leaves fewer than two classes in training"
        return out
    model = rf.train(x[tr], labels[tr], feature_names, forest_cfg)
    cohort_acc = rf.evaluate(model, x[te], labels[te])["accuracy"]
    out.update(cohort_split_metric=cohort_acc, gap=random_acc - cohort_acc, split_year=year)
    return out
