"""Neighbour embedding, density clustering and archetype filtering/profiling.

The embedding is a compact fuzzy-graph layout: exact k-nearest neighbours,
per-point bandwidths calibrated to ``log2(k)``, a symmetrised fuzzy union and
seeded stochastic attraction/repulsion with negative sampling.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import curve_fit
from scipy.spatial import cKDTree

from .stats import UndefinedIndex, spread_is_negligible, validity_indices

SMOOTH_TOL = 1e-5


class DegenerateInput(ValueError):
    """All rows identical, or too few rows for the neighbourhood size."""


@dataclass(frozen=True)
class EmbeddingParams:
    n_neighbors: int = 15
    n_components: int = 3
    min_dist: float = 0.1
    n_epochs: int = 200
    negative_sample_rate: int = 5
    learning_rate: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_neighbors < 2:
            raise ValueError("n_neighbors must be >= 2")
        if self.n_components not in (2, 3):
            raise ValueError("n_components must be 2 or 3")
        if self.n_epochs < 1:
            raise ValueError("n_epochs must be >= 1")


@dataclass(frozen=True)
class ClusterParams:
    embedding: EmbeddingParams = field(default_factory=EmbeddingParams)
    eps: float | str = "auto"
    min_pts: int = 10
    min_archetype_size: int = 40

    @classmethod
    def from_dict(cls, d: dict | None) -> "ClusterParams":
        d = dict(d or {})
        emb_keys = set(EmbeddingParams.__dataclass_fields__)
        emb = {k: d.pop(k) for k in list(d) if k in emb_keys}
        unknown = set(d) - {"eps", "min_pts", "min_archetype_size"}
        if unknown:
            raise ValueError(f"unknown clustering keys: {sorted(unknown)}")
        eps = d.get("eps", "auto")
        if not (eps == "auto" or (isinstance(eps, (int, float)) and eps > 0)):
            raise ValueError("eps must be 'auto' or a positive number")
        return cls(EmbeddingParams(**emb), eps, int(d.get("min_pts", 10)), int(d.get("min_archetype_size", 40)))

    def to_dict(self) -> dict:
        return {**asdict(self.embedding), "eps": self.eps, "min_pts": self.min_pts,
                "min_archetype_size": self.min_archetype_size}


# ---------------------------------------------------------------------------
# Embedding
# ---------------------------------------------------------------------------

def exact_knn(x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and distances of the ``k`` nearest other rows (self excluded)."""
    n = len(x)
    tree = cKDTree(x)
    dist, idx = tree.query(x, k=k + 1)
    out_i = idx[:, 1:].astype(np.int64)
    out_d = dist[:, 1:].copy()
    # with duplicate rows the point itself may not come first
    for i in np.flatnonzero(idx[:, 0] != np.arange(n)):
        sel = idx[i] != i
        out_i[i], out_d[i] = idx[i][sel][:k], dist[i][sel][:k]
    return out_i, out_d


def smooth_knn(knn_d: np.ndarray, n_iter: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Per-point ``rho`` (first positive distance) and ``sigma`` by bisection."""
    n, k = knn_d.shape
    target = math.log2(k)
    pos = np.where(knn_d > 0, knn_d, np.inf)
    rho = pos.min(axis=1)
    rho = np.where(np.isfinite(rho), rho, 0.0)
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    mid = np.ones(n)
    shifted = np.maximum(knn_d - rho[:, None], 0.0)
    for _ in range(n_iter):
        psum = np.exp(-shifted / mid[:, None]).sum(axis=1)
        too_big = psum > target
        hi = np.where(too_big, mid, hi)
        lo = np.where(too_big, lo, mid)
        mid = np.where(np.isinf(hi), mid * 2, (lo + hi) / 2)
        if np.all(np.abs(psum - target) < SMOOTH_TOL):
            break
    mean_d = knn_d.mean()
    floor = 1e-3 * np.where(rho > 0, knn_d.mean(axis=1), mean_d)
    return rho, np.maximum(mid, floor)


def fuzzy_graph(knn_i, knn_d, rho, sigma) -> sparse.coo_matrix:
    n, k = knn_i.shape
    w = np.exp(-np.maximum(knn_d - rho[:, None], 0.0) / sigma[:, None])
    rows = np.repeat(np.arange(n), k)
    p = sparse.csr_matrix((w.ravel(), (rows, knn_i.ravel())), shape=(n, n))
    pt = p.T.tocsr()
    g = (p + pt - p.multiply(pt)).tocoo()
    g.sum_duplicates()
    return g


def fit_ab(min_dist: float, spread: float = 1.0) -> tuple[float, float]:
    """Fit ``1/(1+a d^(2b))`` to the target low-dimensional membership curve."""
    xv = np.linspace(0, spread * 3, 300)
    yv = np.where(xv < min_dist, 1.0, np.exp(-(xv - min_dist) / spread))

    def curve(x, a, b):
        return 1.0 / (1.0 + a * x ** (2 * b))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        (a, b), _ = curve_fit(curve, xv, yv, p0=(1.0, 1.0))
    return float(a), float(b)


def _pca_init(x: np.ndarray, dims: int) -> np.ndarray:
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:dims]
    # fix the SVD sign ambiguity so the layout is platform-stable
    signs = np.sign(comps[np.arange(len(comps)), np.argmax(np.abs(comps), axis=1)])
    y = xc @ (comps * signs[:, None]).T
    if y.shape[1] < dims:
        y = np.hstack([y, np.zeros((len(y), dims - y.shape[1]))])
    scale = np.abs(y).max()
    return 10.0 * y / scale if scale > 0 else y


def _clip(g):
    return np.clip(g, -4.0, 4.0)


def _scatter(index, values, n):
    return np.column_stack([np.bincount(index, weights=values[:, j], minlength=n)
                            for j in range(values.shape[1])])


def embed(x, params: EmbeddingParams = EmbeddingParams()) -> np.ndarray:
    """Seeded low-dimensional layout of the rows of ``x``."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if np.isnan(x).any():
        raise ValueError("embedding input contains missing cells")
    if n < params.n_neighbors + 1:
        raise DegenerateInput(f"need at least n_neighbors + 1 = {params.n_neighbors + 1} rows, got {n}")
    if np.all(x == x[0]):
        raise DegenerateInput("all rows are identical")
    rng = np.random.default_rng(params.seed)
    knn_i, knn_d = exact_knn(x, params.n_neighbors)
    rho, sigma = smooth_knn(knn_d)
    g = fuzzy_graph(knn_i, knn_d, rho, sigma)
    a, b = fit_ab(params.min_dist)

    n_epochs = params.n_epochs
    w = g.data
    keep = w >= w.max() / n_epochs
    head, tail, w = g.row[keep], g.col[keep], w[keep]
    order = np.lexsort((tail, head))
    head, tail, w = head[order], tail[order], w[order]
    eps_per_sample = w.max() / w
    next_sample = eps_per_sample.copy()

    y = _pca_init(x, params.n_components)
    y = y + rng.normal(scale=1e-4, size=y.shape)
    nneg = params.negative_sample_rate
    for epoch in range(n_epochs):
        alpha = params.learning_rate * (1.0 - epoch / n_epochs)
        due = np.flatnonzero(next_sample <= epoch + 1)
        if len(due) == 0:
            continue
        next_sample[due] += eps_per_sample[due]
        hi, ti = head[due], tail[due]
        diff = y[hi] - y[ti]
        d2 = np.einsum("ij,ij->i", diff, diff)
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = -2.0 * a * b * d2 ** (b - 1.0) / (1.0 + a * d2 ** b)
        coef[d2 == 0] = 0.0
        grad = _clip(coef[:, None] * diff) * alpha
        delta = _scatter(hi, grad, n) - _scatter(ti, grad, n)
        # negative samples: random tails for each due edge; coincident pairs exert no force
        neg_h = np.repeat(hi, nneg)
        neg_t = rng.integers(0, n, size=len(neg_h))
        diff = y[neg_h] - y[neg_t]
        d2 = np.einsum("ij,ij->i", diff, diff)
        coef = 2.0 * b / ((0.001 + d2) * (1.0 + a * d2 ** b))
        delta += _scatter(neg_h, _clip(coef[:, None] * diff) * alpha, n)
        y = y + delta
    return y


def trustworthiness_overlap(x, y, k: int) -> float:
    """Mean fraction of each point's k embedded neighbours that are also input-space neighbours."""
    ix, _ = exact_knn(np.asarray(x, float), k)
    iy, _ = exact_knn(np.asarray(y, float), k)
    return float(np.mean([len(set(a) & set(b)) / k for a, b in zip(ix, iy)]))


# ---------------------------------------------------------------------------
# Density clustering
# ---------------------------------------------------------------------------

def kdistance(coords, k: int) -> np.ndarray:
    """Ascending distances from each point to its k-th nearest other point."""
    coords = np.asarray(coords, dtype=float)
    n = len(coords)
    if n < 2 or not (1 <= k < n):
        raise ValueError(f"k-distance needs 1 <= k < n (k={k}, n={n})")
    _, d = exact_knn(coords, k)
    return np.sort(d[:, k - 1])


def suggest_eps(kdist, n_points: int = 100, upper_quantile: float = 1.0, search_from: float = 0.5) -> float:
    """Elbow of a k-distance curve by maximum second difference.

    The curve is cut at ``upper_quantile`` and resampled to ``n_points``
    evenly spaced ranks, which smooths rank-level jitter before differencing.
    Only ranks from ``search_from`` upward are candidates: noise is a minority,
    so a bend in the lower half marks a dense subgroup, not the noise knee.
    """
    kdist = np.asarray(kdist, dtype=float)
    if len(kdist) < 3:
        return float(kdist[-1]) if len(kdist) else 1.0
    top = max(3, int(math.ceil(upper_quantile * len(kdist))))
    curve = kdist[:top]
    ranks = np.linspace(0, len(curve) - 1, n_points)
    ys = np.interp(ranks, np.arange(len(curve)), curve)
    span = ys[-1] - ys[0]
    if span <= 0:
        return float(ys[-1]) if ys[-1] > 0 else 1.0
    d2 = np.diff((ys - ys[0]) / span, 2)
    lo = min(int(search_from * n_points), len(d2) - 1)
    j = lo + int(np.argmax(d2[lo:])) + 1
    return float(ys[j]) if ys[j] > 0 else float(ys[ys > 0][0])


def dbscan(coords, eps: float, min_pts: int) -> np.ndarray:
    """Classic DBSCAN; ``min_pts`` counts the point itself. Noise is -1.

    Clusters are seeded in row order and expanded breadth-first, so a border
    point reachable from two clusters joins the one seeded first.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    coords = np.asarray(coords, dtype=float)
    n = len(coords)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    neigh = cKDTree(coords).query_ball_point(coords, r=eps)
    core = np.fromiter((len(nb) >= min_pts for nb in neigh), dtype=bool, count=n)
    cid = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cid
        queue = [i]
        head = 0
        while head < len(queue):
            p = queue[head]
            head += 1
            for q in sorted(neigh[p]):
                if labels[q] == -1:
                    labels[q] = cid
                    if core[q]:
                        queue.append(q)
        cid += 1
    return labels


def filter_archetypes(labels, min_size: int = 40) -> tuple[np.ndarray, dict]:
    """Keep clusters with at least ``min_size`` members, renumbered by size.

    Smaller clusters join the residual group (-1). Returns the new labels and
    a map ``new_id -> old_id``.
    """
    labels = np.asarray(labels)
    ids, counts = np.unique(labels[labels != -1], return_counts=True)
    kept = [(c, i) for i, c in zip(ids, counts) if c >= min_size]
    kept.sort(key=lambda t: (-t[0], t[1]))
    mapping = {int(old): new for new, (_, old) in enumerate(kept)}
    out = np.array([mapping.get(int(v), -1) for v in labels], dtype=np.int64)
    return out, {new: int(old) for old, new in mapping.items()}


@dataclass
class ClusterSolution:
    coords: np.ndarray
    raw_labels: np.ndarray
    labels: np.ndarray  # filtered: retained archetypes 0..K-1, residual -1
    eps: float
    min_pts: int
    min_archetype_size: int
    indices: dict | None

    @property
    def n_archetypes(self) -> int:
        return int(self.labels.max() + 1) if len(self.labels) and self.labels.max() >= 0 else 0

    @property
    def coverage(self) -> float:
        return float(np.mean(self.labels >= 0)) if len(self.labels) else 0.0

    def summary(self) -> dict:
        sizes = {int(k): int(v) for k, v in zip(*np.unique(self.labels[self.labels >= 0], return_counts=True))}
        return {"eps": self.eps, "min_pts": self.min_pts, "min_archetype_size": self.min_archetype_size,
                "n_dbscan_clusters": int(len(np.unique(self.raw_labels[self.raw_labels >= 0]))),
                "n_dbscan_noise": int(np.sum(self.raw_labels < 0)),
                "n_archetypes": self.n_archetypes, "archetype_sizes": sizes,
                "n_residual": int(np.sum(self.labels < 0)), "coverage": self.coverage,
                "indices": self.indices}


def resolve_eps(coords, params: ClusterParams) -> float:
    if params.eps != "auto":
        return float(params.eps)
    return suggest_eps(kdistance(coords, max(1, params.min_pts - 1)))


def cluster_coords(coords, params: ClusterParams, eps: float | None = None) -> ClusterSolution:
    eps = resolve_eps(coords, params) if eps is None else eps
    raw = dbscan(coords, eps, params.min_pts)
    labels, _ = filter_archetypes(raw, params.min_archetype_size)
    try:
        idx = validity_indices(coords, labels)
    except UndefinedIndex:
        idx = None
    return ClusterSolution(coords, raw, labels, eps, params.min_pts, params.min_archetype_size, idx)


def discover(x, params: ClusterParams = ClusterParams()) -> ClusterSolution:
    """Embed, cluster and filter in one call."""
    return cluster_coords(embed(x, params.embedding), params)


# ---------------------------------------------------------------------------
# Profiling
# ---------------------------------------------------------------------------

def profile_archetypes(values, columns, labels, attrition=None) -> dict:
    """Per-archetype means, z-scores against the population and attrition.

    ``attrition`` is joined after clustering for description only.
    """
    x = np.asarray(values, dtype=float)
    labels = np.asarray(labels)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mu = np.nanmean(x, axis=0)
        sd = np.nanstd(x, axis=0)
    flat = spread_is_negligible(sd, mu)
    att = None if attrition is None else np.asarray(attrition, dtype=float)
    profiles = []
    for k in sorted(set(labels.tolist())):
        rows = labels == k
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            m = np.nanmean(x[rows], axis=0)
        z = np.where(flat, 0.0, (m - mu) / np.where(flat, 1.0, sd))
        prof = {"archetype": int(k), "residual": bool(k < 0), "n_members": int(rows.sum()),
                "share": float(rows.mean()),
                "mean": {c: _num(v) for c, v in zip(columns, m)},
                "z": {c: _num(v) for c, v in zip(columns, z)},
                "attrition_rate": None, "narrative": ""}
        if att is not None:
            a = att[rows]
            a = a[~np.isnan(a)]
            prof["attrition_rate"] = float(a.mean()) if len(a) else None
        profiles.append(prof)
    overall = None
    if att is not None and (~np.isnan(att)).any():
        overall = float(np.nanmean(att))
    return {"population_attrition_rate": overall, "profiles": profiles}


def _num(v):
    v = float(v)
    return None if math.isnan(v) else v
