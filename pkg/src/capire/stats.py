"""Partition agreement, cluster validity indices and two-sample tests."""

from __future__ import annotations

import math
import warnings

import numpy as np
from scipy import stats as _st
from scipy.spatial.distance import cdist


def spread_is_negligible(sd, mean):
    """True where a standard deviation is float noise around a constant column.

    A column holding one repeated value such as 0.09 gets an ``np.std`` of
    about 1e-17, not 0, because the mean itself is rounded.
    """
    sd = np.asarray(sd, dtype=float)
    scale = np.maximum(1.0, np.abs(np.asarray(mean, dtype=float)))
    return ~(sd > 1e-12 * scale)


class UndefinedIndex(ValueError):
    """A validity index needs at least two non-empty clusters."""


def _comb2(x):
    x = np.asarray(x, dtype=float)
    return x * (x - 1) / 2.0


def contingency(labels_a, labels_b) -> np.ndarray:
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError("label vectors differ in length")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1 if len(ia) else 0, ib.max() + 1 if len(ib) else 0), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Pair-counting ARI; every label value (noise included) is a class."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError("label vectors differ in length")
    if len(a) < 2:
        raise ValueError("ARI needs at least two items")
    table = contingency(a, b)
    sum_ij = _comb2(table).sum()
    sum_a = _comb2(table.sum(axis=1)).sum()
    sum_b = _comb2(table.sum(axis=0)).sum()
    total = _comb2(len(a))
    expected = sum_a * sum_b / total
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        # only reachable when both are all-singletons or both one block
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


# ---------------------------------------------------------------------------
# Validity indices
# ---------------------------------------------------------------------------

def _clustered(x, labels, exclude_noise=True):
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels)
    keep = labels != -1 if exclude_noise else np.ones(len(labels), bool)
    x, labels = x[keep], labels[keep]
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise UndefinedIndex("validity indices need at least two clusters")
    return x, labels, uniq


def silhouette_samples(x, labels, distances=None) -> np.ndarray:
    """Per-point silhouette; points in singleton clusters score 0."""
    labels = np.asarray(labels)
    d = cdist(x, x) if distances is None else distances
    uniq, inv = np.unique(labels, return_inverse=True)
    onehot = np.zeros((len(labels), len(uniq)))
    onehot[np.arange(len(labels)), inv] = 1.0
    sizes = onehot.sum(axis=0)
    sums = d @ onehot
    own = sizes[inv]
    a = sums[np.arange(len(labels)), inv] / np.maximum(own - 1, 1)
    other = sums / sizes
    other[np.arange(len(labels)), inv] = np.inf
    b = other.min(axis=1)
    s = (b - a) / np.maximum(a, b)
    s = np.where(own > 1, s, 0.0)
    return np.nan_to_num(s, nan=0.0)


def silhouette_score(x, labels, exclude_noise=True) -> float:
    x, labels, _ = _clustered(x, labels, exclude_noise)
    return float(np.mean(silhouette_samples(x, labels)))


def calinski_harabasz(x, labels, exclude_noise=True) -> float:
    x, labels, uniq = _clustered(x, labels, exclude_noise)
    n, k = len(x), len(uniq)
    if n == k:
        raise UndefinedIndex("Calinski-Harabasz needs more points than clusters")
    centre = x.mean(axis=0)
    between = within = 0.0
    for lab in uniq:
        pts = x[labels == lab]
        c = pts.mean(axis=0)
        between += len(pts) * float(np.sum((c - centre) ** 2))
        within += float(np.sum((pts - c) ** 2))
    if within == 0.0:
        return math.inf
    return between * (n - k) / (within * (k - 1))


def davies_bouldin(x, labels, exclude_noise=True) -> float:
    x, labels, uniq = _clustered(x, labels, exclude_noise)
    cents = np.array([x[labels == lab].mean(axis=0) for lab in uniq])
    scatter = np.array([np.mean(np.linalg.norm(x[labels == lab] - c, axis=1)) for lab, c in zip(uniq, cents)])
    sep = cdist(cents, cents)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = (scatter[:, None] + scatter[None, :]) / sep
    np.fill_diagonal(ratio, -np.inf)
    ratio = np.where(np.isnan(ratio), 0.0, ratio)
    return float(np.mean(ratio.max(axis=1)))


def validity_indices(coords, labels) -> dict:
    """Silhouette, Calinski-Harabasz and Davies-Bouldin with noise (-1) excluded."""
    return {"silhouette": silhouette_score(coords, labels),
            "calinski_harabasz": calinski_harabasz(coords, labels),
            "davies_bouldin": davies_bouldin(coords, labels)}


# ---------------------------------------------------------------------------
# Two-sample tests
# ---------------------------------------------------------------------------

def mann_whitney_u(x, y) -> tuple[float, float]:
    """Two-sided Mann-Whitney test; returns ``(U_x, p)``.

    Exact null distribution when both samples are below 10 and tie-free,
    otherwise the normal approximation with tie and continuity corrections.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) == 0 or len(y) == 0:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([x, y])
    ties = len(np.unique(pooled)) < len(pooled)
    method = "exact" if (max(len(x), len(y)) < 10 and not ties) else "asymptotic"
    res = _st.mannwhitneyu(x, y, alternative="two-sided", use_continuity=True, method=method)
    return float(res.statistic), float(min(1.0, res.pvalue))


def levene(*groups) -> tuple[float, float]:
    """Median-centred Levene (Brown-Forsythe) test; returns ``(W, p)``."""
    if len(groups) < 2 or any(len(g) < 2 for g in groups):
        raise ValueError("Levene needs two or more groups of size >= 2")
    with np.errstate(invalid="ignore", divide="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = _st.levene(*[np.asarray(g, float) for g in groups], center="median")
    w, p = float(res.statistic), float(res.pvalue)
    if math.isnan(w):  # every group constant
        return 0.0, 1.0
    return w, p
