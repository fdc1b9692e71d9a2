"""CART random forest for archetype membership, with splits, CV and metrics."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

MODEL_SCHEMA = "capire.forest/1"


class ModelError(ValueError):
    """Invalid training data, configuration or prediction schema."""


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int | None = None
    min_leaf: int = 1
    max_features: str | int = "sqrt"
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ModelError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise ModelError("min_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ModelError("max_depth must be >= 1 or null")

    def mtry(self, d: int) -> int:
        if self.max_features == "sqrt":
            return max(1, int(math.floor(math.sqrt(d))))
        if self.max_features in ("all", None):
            return d
        return max(1, min(d, int(self.max_features)))


@dataclass(frozen=True)
class SplitConfig:
    mode: str = "stratified_random"
    train_fraction: float = 0.7
    k_folds: int = 5
    seed: int = 0
    split_year: int | None = None

    def __post_init__(self):
        if self.mode not in ("stratified_random", "cohort_temporal"):
            raise ModelError(f"unknown split mode {self.mode!r}")
        if not 0 < self.train_fraction < 1:
            raise ModelError("train_fraction must lie in (0, 1)")
        if self.k_folds < 2:
            raise ModelError("k_folds must be >= 2")


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def stratified_split(labels, train_fraction=0.7, seed=0) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split; each class keeps round(f * n_c) rows in train."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        if len(rows) < 2:
            raise ModelError(f"class {c} has fewer than 2 members; cannot stratify")
        rows = rows[rng.permutation(len(rows))]
        k = int(math.floor(train_fraction * len(rows) + 0.5))
        k = min(max(k, 1), len(rows) - 1)
        train.extend(rows[:k])
        test.extend(rows[k:])
    return np.sort(np.asarray(train, dtype=np.int64)), np.sort(np.asarray(test, dtype=np.int64))


def cohort_split(cohorts, split_year=None, train_fraction=0.7) -> tuple[np.ndarray, np.ndarray, int]:
    """Earlier cohorts train, later cohorts test.

    Without ``split_year``, the first year at which the cumulative share of
    rows reaches ``train_fraction`` closes the training period.
    """
    cohorts = np.asarray(cohorts, dtype=np.int64)
    years = np.unique(cohorts)
    if len(years) < 2:
        raise ModelError("cohort split needs at least two cohorts")
    if split_year is None:
        counts = np.array([np.sum(cohorts == y) for y in years])
        cum = np.cumsum(counts) / len(cohorts)
        j = int(np.searchsorted(cum, train_fraction))
        j = min(max(j, 0), len(years) - 2)
        split_year = int(years[j + 1])
    train = np.flatnonzero(cohorts < split_year)
    test = np.flatnonzero(cohorts >= split_year)
    if len(train) == 0 or len(test) == 0:
        raise ModelError(f"split year {split_year} leaves an empty partition")
    return train, test, int(split_year)


def stratified_folds(labels, k=5, seed=0) -> list[np.ndarray]:
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    offset = 0
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        rows = rows[rng.permutation(len(rows))]
        for i, r in enumerate(rows):
            folds[(i + offset) % k].append(r)
        offset += len(rows)
    return [np.sort(np.asarray(f, dtype=np.int64)) for f in folds]


# ---------------------------------------------------------------------------
# Trees
# ---------------------------------------------------------------------------

def _gini_counts(counts: np.ndarray, n) -> np.ndarray:
    n = np.asarray(n, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = 1.0 - np.sum(counts * counts, axis=-1) / (n * n)
    return np.where(n > 0, g, 0.0)


def best_split(x: np.ndarray, y: np.ndarray, n_classes: int, features, min_leaf: int):
    """Lowest weighted Gini over candidate features; ``None`` if no valid split.

    Ties go to the earlier feature in ``features``, then the lower threshold.
    """
    m = len(y)
    if m < 2:
        return None
    features = np.asarray(features)
    xv = x[:, features]                                   # (m, f)
    order = np.argsort(xv, axis=0, kind="stable")
    xs = np.take_along_axis(xv, order, axis=0)
    onehot = np.zeros((m, len(features), n_classes))
    np.put_along_axis(onehot, y[order][:, :, None], 1.0, axis=2)
    left = np.cumsum(onehot, axis=0)[:-1]                 # (m-1, f, K)
    total = np.bincount(y, minlength=n_classes).astype(float)
    right = total - left
    nl = np.arange(1, m, dtype=float)[:, None]
    nr = m - nl
    valid = (xs[:-1] < xs[1:]) & (nl >= min_leaf) & (nr >= min_leaf)
    if not valid.any():
        return None
    gl = 1.0 - np.sum(left * left, axis=2) / (nl * nl)
    gr = 1.0 - np.sum(right * right, axis=2) / (nr * nr)
    score = np.where(valid, (nl * gl + nr * gr) / m, np.inf)
    i, j = np.unravel_index(int(np.argmin(score.T)), score.T.shape)[::-1]
    return float(score[i, j]), int(features[j]), float((xs[i, j] + xs[i + 1, j]) / 2.0)


@dataclass
class Tree:
    feature: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    value: list = field(default_factory=list)      # class counts at the node
    gain: list = field(default_factory=list)       # weighted impurity decrease

    def to_dict(self) -> dict:
        return asdict(self)

    def apply(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(len(x), dtype=np.int64)
        feat = np.asarray(self.feature)
        thr = np.asarray(self.threshold)
        lft = np.asarray(self.left)
        rgt = np.asarray(self.right)
        active = feat[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = x[idx, feat[nd]] <= thr[nd]
            node[idx] = np.where(go_left, lft[nd], rgt[nd])
            active = feat[node] >= 0
        return node


def grow_tree(x, y, n_classes, cfg: ForestConfig, rng) -> Tree:
    tree = Tree()
    n_total = len(y)
    d = x.shape[1]
    mtry = cfg.mtry(d)

    def new_node(rows):
        counts = np.bincount(y[rows], minlength=n_classes).astype(float)
        tree.feature.append(-1)
        tree.threshold.append(0.0)
        tree.left.append(-1)
        tree.right.append(-1)
        tree.value.append([int(c) for c in counts])
        tree.gain.append(0.0)
        return len(tree.feature) - 1

    root = new_node(np.arange(n_total))
    stack = [(root, np.arange(n_total), 0)]
    while stack:
        node, rows, depth = stack.pop()
        counts = np.asarray(tree.value[node], dtype=float)
        if (cfg.max_depth is not None and depth >= cfg.max_depth) or np.count_nonzero(counts) <= 1 \
                or len(rows) < 2 * cfg.min_leaf:
            continue
        feats = np.sort(rng.choice(d, size=mtry, replace=False))
        found = best_split(x[rows], y[rows], n_classes, feats, cfg.min_leaf)
        if found is None:
            continue
        score, f, thr = found
        parent = float(_gini_counts(counts, len(rows)))
        if score >= parent:
            continue
        mask = x[rows, f] <= thr
        lrows, rrows = rows[mask], rows[~mask]
        tree.feature[node] = f
        tree.threshold[node] = thr
        tree.gain[node] = len(rows) / n_total * (parent - score)
        li = new_node(lrows)
        ri = new_node(rrows)
        tree.left[node], tree.right[node] = li, ri
        stack.append((ri, rrows, depth + 1))
        stack.append((li, lrows, depth + 1))
    return tree


# ---------------------------------------------------------------------------
# Forest
# ---------------------------------------------------------------------------

@dataclass
class ForestModel:
    classes: list
    feature_names: list
    fill_values: list
    config: dict
    class_counts: list
    trees: list

    def to_dict(self) -> dict:
        return {"schema": MODEL_SCHEMA, "classes": self.classes, "feature_names": self.feature_names,
                "fill_values": self.fill_values, "config": self.config, "class_counts": self.class_counts,
                "trees": [t.to_dict() for t in self.trees]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), allow_nan=False)

    @classmethod
    def from_dict(cls, d) -> "ForestModel":
        if d.get("schema") != MODEL_SCHEMA:
            raise ModelError(f"unsupported model schema {d.get('schema')!r}")
        return cls(d["classes"], d["feature_names"], d["fill_values"], d["config"], d["class_counts"],
                   [Tree(**t) for t in d["trees"]])


def _fill(x, fill_values):
    x = np.array(x, dtype=float, copy=True)
    miss = np.isnan(x)
    if miss.any():
        x[miss] = np.take(np.asarray(fill_values, dtype=float), np.nonzero(miss)[1])
    return x


def _tree_seed(seed: int, t: int) -> np.random.SeedSequence:
    # per-tree streams derived from (seed, tree index): serial and parallel runs agree
    return np.random.SeedSequence([int(seed), int(t)])


def train(x, labels, feature_names, cfg: ForestConfig = ForestConfig()) -> ForestModel:
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels)
    if len(x) != len(labels):
        raise ModelError("rows and labels differ in length")
    classes = sorted({int(c) for c in labels})
    if len(classes) < 2:
        raise ModelError("training data must contain at least two classes")
    if x.shape[1] != len(feature_names):
        raise ModelError("feature names do not match the matrix width")
    cidx = {c: i for i, c in enumerate(classes)}
    y = np.array([cidx[int(c)] for c in labels], dtype=np.int64)
    with np.errstate(all="ignore"):
        mins = np.array([np.nanmin(col) if (~np.isnan(col)).any() else 0.0 for col in x.T])
    fill = [float(v) for v in mins - 1.0]
    xf = _fill(x, fill)
    trees = []
    n = len(y)
    for t in range(cfg.n_trees):
        rng = np.random.default_rng(_tree_seed(cfg.seed, t))
        rows = rng.integers(0, n, size=n) if cfg.bootstrap else np.arange(n)
        trees.append(grow_tree(xf[rows], y[rows], len(classes), cfg, rng))
    counts = [int(np.sum(y == i)) for i in range(len(classes))]
    return ForestModel(classes, list(feature_names), fill, asdict(cfg), counts, trees)


def _check_schema(model: ForestModel, feature_names):
    if feature_names is not None and list(feature_names) != list(model.feature_names):
        raise ModelError("feature vector schema does not match the training schema")


def predict_votes(model: ForestModel, x, feature_names=None) -> np.ndarray:
    """Per-row fraction of trees voting for each class (rows sum to 1)."""
    _check_schema(model, feature_names)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != len(model.feature_names):
        raise ModelError(f"expected {len(model.feature_names)} features, got {x.shape[1]}")
    xf = _fill(x, model.fill_values)
    k = len(model.classes)
    votes = np.zeros((len(xf), k))
    for tree in model.trees:
        leaves = tree.apply(xf)
        vals = np.asarray(tree.value, dtype=float)[leaves]
        # majority class at the leaf; ties go to the lower class index
        votes[np.arange(len(xf)), np.argmax(vals, axis=1)] += 1.0
    return votes / len(model.trees)


def predict(model: ForestModel, x, feature_names=None) -> tuple[np.ndarray, np.ndarray]:
    """Archetype ids (argmax vote, lower id on ties) and vote distributions."""
    dist = predict_votes(model, x, feature_names)
    return np.asarray(model.classes)[np.argmax(dist, axis=1)], dist


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def confusion_matrix(y_true, y_pred, classes) -> np.ndarray:
    idx = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[idx[int(t)], idx[int(p)]] += 1
    return cm


def classification_metrics(y_true, y_pred, classes=None) -> dict:
    y_true = np.asarray(y_true).astype(np.int64)
    y_pred = np.asarray(y_pred).astype(np.int64)
    if classes is None:
        classes = sorted(set(y_true.tolist()) | set(y_pred.tolist()))
    cm = confusion_matrix(y_true, y_pred, classes)
    tp = np.diag(cm).astype(float)
    pred_n = cm.sum(axis=0).astype(float)
    true_n = cm.sum(axis=1).astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(pred_n > 0, tp / pred_n, 0.0)
        rec = np.where(true_n > 0, tp / true_n, 0.0)
        f1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    present = true_n > 0
    return {
        "accuracy": float(tp.sum() / max(len(y_true), 1)),
        "macro_f1": float(f1[present].mean()) if present.any() else 0.0,
        "classes": [int(c) for c in classes],
        "per_class": {str(c): {"precision": float(p), "recall": float(r), "f1": float(f), "support": int(s)}
                      for c, p, r, f, s in zip(classes, prec, rec, f1, true_n)},
        "confusion_matrix": cm.tolist(),
    }


def evaluate(model: ForestModel, x, y_true, feature_names=None) -> dict:
    y_true = np.asarray(y_true)
    if len(y_true) == 0:
        raise ModelError("empty test set")
    pred, _ = predict(model, x, feature_names)
    classes = sorted(set(model.classes) | {int(c) for c in y_true})
    rep = classification_metrics(y_true, pred, classes)
    major = model.classes[int(np.argmax(model.class_counts))]
    rep["baselines"] = {
        "majority_class": int(major),
        "majority_accuracy": float(np.mean(y_true == major)),
        "uniform_random_accuracy": 1.0 / len(model.classes),
    }
    rep["n_test"] = int(len(y_true))
    return rep


def cross_validate(x, labels, feature_names, cfg: ForestConfig, k=5, seed=0) -> dict:
    labels = np.asarray(labels)
    folds = stratified_folds(labels, k, seed)
    accs, f1s = [], []
    for i, test in enumerate(folds):
        train_rows = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i]))
        model = train(x[train_rows], labels[train_rows], feature_names, cfg)
        pred, _ = predict(model, x[test])
        m = classification_metrics(labels[test], pred)
        accs.append(m["accuracy"])
        f1s.append(m["macro_f1"])
    return {"k": k, "accuracy": accs, "macro_f1": f1s,
            "accuracy_mean": float(np.mean(accs)), "accuracy_std": float(np.std(accs)),
            "macro_f1_mean": float(np.mean(f1s)), "macro_f1_std": float(np.std(f1s))}


DEFAULT_GRID = {"n_trees": [100], "max_depth": [None, 8], "min_leaf": [1, 3]}


def tune(x, labels, feature_names, base: ForestConfig, grid=None, k=5, seed=0) -> tuple[ForestConfig, list]:
    """Grid search by stratified k-fold macro F1; first best wins ties."""
    grid = DEFAULT_GRID if grid is None else grid
    keys = sorted(grid)
    table = []
    best = None
    for combo in itertools.product(*(grid[key] for key in keys)):
        params = dict(zip(keys, combo))
        cfg = ForestConfig(**{**asdict(base), **params})
        cv = cross_validate(x, labels, feature_names, cfg, k, seed)
        table.append({**params, "macro_f1_mean": cv["macro_f1_mean"], "accuracy_mean": cv["accuracy_mean"]})
        if best is None or cv["macro_f1_mean"] > best[0]:
            best = (cv["macro_f1_mean"], cfg)
    return best[1], table


def feature_importance(model: ForestModel, levels: dict | None = None, interactions=()) -> dict:
    """Mean decrease in impurity, normalised per tree and overall to sum 1."""
    d = len(model.feature_names)
    total = np.zeros(d)
    for tree in model.trees:
        imp = np.zeros(d)
        for f, g in zip(tree.feature, tree.gain):
            if f >= 0:
                imp[f] += g
        if imp.sum() > 0:
            total += imp / imp.sum()
    if total.sum() > 0:
        total = total / total.sum()
    names = model.feature_names
    order = sorted(range(d), key=lambda j: (-total[j], names[j]))
    ranked = [{"feature": names[j], "importance": float(total[j]),
               "level": (levels or {}).get(names[j], "")} for j in order]
    shares: dict = {}
    for r in ranked:
        shares[r["level"]] = shares.get(r["level"], 0.0) + r["importance"]
    inter = set(interactions)
    return {"ranked": ranked, "level_shares": dict(sorted(shares.items())),
            "interaction_share": float(sum(r["importance"] for r in ranked if r["feature"] in inter))}
