"""Feature matrix assembly: imputation, train-only scaling, hashing, manifests."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .domain import LABEL_COLUMNS, Dataset, profile_missingness
from .features import Extraction
from .stats import spread_is_negligible
from .vot import ConfigError

INDICATOR_SUFFIX = "__missing"
DEFAULT_POLICIES = {"N1": "region_median", "N2": "train_mean", "N3": "never", "N4": "interpolate"}
STRATEGIES = ("region_median", "train_mean", "never", "interpolate")


class OutputExists(FileExistsError):
    """Refusing to overwrite an existing artifact without ``force``."""


@dataclass
class FeatureMatrix:
    student_ids: list
    columns: list
    values: np.ndarray
    levels: list
    kinds: list = None  # "feature" | "indicator"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.kinds is None:
            self.kinds = ["feature"] * len(self.columns)
        if self.values.shape != (len(self.student_ids), len(self.columns)):
            raise ValueError("matrix shape does not match ids/columns")

    def column(self, name) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def feature_columns(self) -> list:
        return [c for c, k in zip(self.columns, self.kinds) if k == "feature"]

    def select(self, columns=None, rows=None) -> "FeatureMatrix":
        cidx = list(range(len(self.columns))) if columns is None else [self.columns.index(c) for c in columns]
        ridx = list(range(len(self.student_ids))) if rows is None else list(rows)
        return FeatureMatrix([self.student_ids[i] for i in ridx], [self.columns[j] for j in cidx],
                             self.values[np.ix_(ridx, cidx)], [self.levels[j] for j in cidx],
                             [self.kinds[j] for j in cidx])

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.values, columns=self.columns)
        df.insert(0, "student_id", self.student_ids)
        return df


def build_raw_matrix(extraction: Extraction, dictionary: dict, admissible: list) -> FeatureMatrix:
    """Dictionary-ordered matrix of admissible features; rows sorted by id."""
    feats = [f for f in dictionary["features"] if f["name"] in set(admissible)]
    names = [f["name"] for f in feats]
    order = sorted(range(len(extraction.student_ids)), key=lambda i: extraction.student_ids[i])
    values = np.empty((len(order), len(names)))
    for r, i in enumerate(order):
        vec = extraction.vectors[i]
        for j, n in enumerate(names):
            if n not in vec:
                raise ConfigError(f"dictionary feature {n!r} has no extractor")
            values[r, j] = vec[n]
    return FeatureMatrix([extraction.student_ids[i] for i in order], names, values,
                         [f["level"] for f in feats])


# ---------------------------------------------------------------------------
# Imputation
# ---------------------------------------------------------------------------

def region_of(postcode) -> str:
    if postcode is None or (isinstance(postcode, float) and math.isnan(postcode)) or str(postcode) == "":
        return "__none__"
    return str(postcode)[:2]


@dataclass
class ImputationModel:
    policies: dict
    strategy: dict = field(default_factory=dict)  # column -> effective strategy
    region_medians: dict = field(default_factory=dict)
    global_medians: dict = field(default_factory=dict)
    means: dict = field(default_factory=dict)
    interactions: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"policies": self.policies, "strategy": self.strategy,
                "region_medians": self.region_medians, "global_medians": self.global_medians,
                "means": self.means, "interactions": [list(t) for t in self.interactions]}

    @classmethod
    def from_dict(cls, d) -> "ImputationModel":
        return cls(d["policies"], d["strategy"], d["region_medians"], d["global_medians"], d["means"],
                   [tuple(t) for t in d["interactions"]])


def _effective_strategy(entry: dict, policies: dict) -> str:
    if entry.get("group") == "interaction":
        return "recompute"
    level = entry["level"]
    if level not in policies:
        raise ConfigError(f"no imputation policy for level {level!r}")
    strat = policies[level]
    if strat not in STRATEGIES:
        raise ConfigError(f"unknown imputation strategy {strat!r} for level {level}")
    if strat == "interpolate" and entry.get("imputation") != "interpolate":
        return "never"
    return strat


def fit_imputation(raw: FeatureMatrix, dictionary: dict, policies: dict | None, regions: list,
                   fit_rows=None) -> ImputationModel:
    """Fit fill values on ``fit_rows`` only (default: all rows)."""
    policies = dict(DEFAULT_POLICIES if policies is None else policies)
    unknown = set(policies) - set(DEFAULT_POLICIES)
    if unknown:
        raise ConfigError(f"imputation policy for unknown level(s) {sorted(unknown)}")
    entries = {f["name"]: f for f in dictionary["features"]}
    rows = np.arange(len(raw.student_ids)) if fit_rows is None else np.asarray(sorted(fit_rows), dtype=int)
    model = ImputationModel(policies=policies,
                            interactions=[tuple(t) for t in dictionary.get("interactions", [])])
    for j, col in enumerate(raw.columns):
        strat = _effective_strategy(entries[col], policies)
        model.strategy[col] = strat
        x = raw.values[rows, j]
        ok = ~np.isnan(x)
        if strat == "region_median":
            gm = float(np.median(x[ok])) if ok.any() else 0.0
            model.global_medians[col] = gm
            per = {}
            regs = np.asarray([regions[i] for i in rows], dtype=object)
            for reg in sorted(set(regs[ok])):
                per[reg] = float(np.median(x[ok & (regs == reg)]))
            model.region_medians[col] = per
        elif strat == "train_mean":
            model.means[col] = float(np.mean(x[ok])) if ok.any() else 0.0
    return model


def apply_imputation(raw: FeatureMatrix, model: ImputationModel, regions: list) -> FeatureMatrix:
    """Fill missing cells and append one indicator column per imputable feature.

    Indicator cells are 1 exactly where a value was filled in. N3 and other
    ``never`` columns keep their missing cells.
    """
    vals = raw.values.copy()
    filled = np.zeros_like(vals, dtype=bool)
    col_index = {c: j for j, c in enumerate(raw.columns)}
    for j, col in enumerate(raw.columns):
        strat = model.strategy[col]
        miss = np.isnan(vals[:, j])
        if not miss.any():
            continue
        if strat == "region_median":
            per = model.region_medians[col]
            gm = model.global_medians[col]
            for i in np.flatnonzero(miss):
                vals[i, j] = per.get(regions[i], gm)
        elif strat == "train_mean":
            vals[miss, j] = model.means[col]
        elif strat == "interpolate":
            # A single active term carried forward/backward is a flat series:
            # zero slope and zero spacing variability.
            vals[miss, j] = 0.0
        else:
            continue
        filled[miss, j] = True
    for name, a, b in model.interactions:
        if name not in col_index or a not in col_index or b not in col_index:
            continue
        j = col_index[name]
        if model.strategy.get(name) != "recompute":
            continue
        miss = np.isnan(vals[:, j])
        prod = vals[:, col_index[a]] * vals[:, col_index[b]]
        fill = miss & ~np.isnan(prod)
        vals[fill, j] = prod[fill]
        filled[fill, j] = True
    ind_cols = [c for c in raw.columns if model.strategy[c] != "never"]
    ind = np.column_stack([filled[:, col_index[c]] for c in ind_cols]).astype(float) if ind_cols else \
        np.zeros((len(raw.student_ids), 0))
    return FeatureMatrix(
        list(raw.student_ids),
        list(raw.columns) + [c + INDICATOR_SUFFIX for c in ind_cols],
        np.hstack([vals, ind]),
        list(raw.levels) + [raw.levels[col_index[c]] for c in ind_cols],
        ["feature"] * len(raw.columns) + ["indicator"] * len(ind_cols),
    )


def impute(raw: FeatureMatrix, dictionary: dict, policies: dict | None, regions: list, fit_rows=None):
    model = fit_imputation(raw, dictionary, policies, regions, fit_rows)
    return apply_imputation(raw, model, regions), model


# ---------------------------------------------------------------------------
# Standardisation
# ---------------------------------------------------------------------------

@dataclass
class ScalingStats:
    columns: list
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray

    def to_dict(self) -> dict:
        return {"columns": list(self.columns), "mean": [float(v) for v in self.mean],
                "std": [float(v) for v in self.std], "constant": [bool(v) for v in self.constant],
                "ddof": 0}

    @classmethod
    def from_dict(cls, d) -> "ScalingStats":
        return cls(list(d["columns"]), np.asarray(d["mean"], float), np.asarray(d["std"], float),
                   np.asarray(d["constant"], bool))


def standardize_fit(train: np.ndarray, columns) -> ScalingStats:
    """Per-column mean and population std over training rows (missing cells ignored)."""
    x = np.asarray(train, dtype=float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(x, axis=0) if len(x) else np.zeros(x.shape[1])
        std = np.nanstd(x, axis=0) if len(x) else np.zeros(x.shape[1])
    mean = np.where(np.isnan(mean), 0.0, mean)
    std = np.where(np.isnan(std), 0.0, std)
    constant = spread_is_negligible(std, mean)
    return ScalingStats(list(columns), mean, std, constant)


def standardize_apply(stats: ScalingStats, rows: np.ndarray, columns) -> np.ndarray:
    """Pure affine map; constant columns pass through unchanged."""
    if list(columns) != list(stats.columns):
        raise ValueError("column set does not match the fitted scaling statistics")
    x = np.asarray(rows, dtype=float)
    safe = np.where(stats.constant, 1.0, stats.std)
    z = (x - stats.mean) / safe
    return np.where(stats.constant, x, z)


# ---------------------------------------------------------------------------
# Hashing and manifests
# ---------------------------------------------------------------------------

def _canonical(obj):
    if isinstance(obj, dict):
        out = {}
        for k, v in obj.items():
            if not isinstance(k, str):
                raise TypeError(f"config keys must be strings, got {k!r}")
            out[k] = _canonical(v)
        return out
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if not math.isfinite(f):
            raise TypeError("non-finite numbers cannot be hashed canonically")
        return int(f) if f.is_integer() and abs(f) < 2**53 else f
    raise TypeError(f"value of type {type(obj).__name__} is not serialisable")


def canonical_json(config) -> str:
    return json.dumps(_canonical(config), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(config) -> str:
    """SHA-256 hex digest of the canonical serialisation."""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def format_float(v: float) -> str:
    if math.isnan(v):
        return ""
    if v == 0.0:
        return "0"
    return format(v, ".17g")


def write_matrix(fm: FeatureMatrix, path) -> None:
    lines = [",".join(["student_id"] + list(fm.columns))]
    for sid, row in zip(fm.student_ids, fm.values):
        lines.append(",".join([str(sid)] + [format_float(v) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_matrix(path, levels=None, kinds=None) -> FeatureMatrix:
    df = pd.read_csv(path, dtype={"student_id": str}, keep_default_na=False, na_values=[""])
    cols = list(df.columns[1:])
    if kinds is None:
        kinds = ["indicator" if c.endswith(INDICATOR_SUFFIX) else "feature" for c in cols]
    return FeatureMatrix(df["student_id"].tolist(), cols, df[cols].to_numpy(dtype=float),
                         levels or [""] * len(cols), kinds)


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def prepare_output(path: Path, names, force: bool) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not force:
        clash = [n for n in names if (path / n).exists()]
        if clash:
            raise OutputExists(f"{path}: {', '.join(clash)} already exist (use force to overwrite)")
    return path


def utc_timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def make_manifest(stage: str, config: dict, **fields) -> dict:
    manifest = {
        "pipeline_version": __version__,
        "stage": stage,
        "config": _canonical(config),
        "config_hash": config_hash(config),
        "seed": config.get("seed"),
        "execution_timestamp": utc_timestamp(),
    }
    manifest.update(fields)
    return manifest


def matrix_missingness(fm: FeatureMatrix) -> dict:
    prof = profile_missingness({"matrix": fm.to_frame().drop(columns=["student_id"])})
    return prof["matrix"]["columns"]


def check_firewall(columns, excluded_names=()) -> None:
    bad = (set(columns) & (set(LABEL_COLUMNS) | set(excluded_names)))
    if bad:
        raise ConfigError(f"label or non-admissible columns in feature matrix: {sorted(bad)}")


@dataclass
class Assembled:
    raw: FeatureMatrix
    matrix: FeatureMatrix
    imputation: ImputationModel
    scaling: ScalingStats
    manifest: dict


def assemble(extraction: Extraction, dataset: Dataset, dictionary: dict, admissible: list,
             config: dict, excluded_names=(), policies=None, out_dir=None, force=False) -> Assembled:
    """Build the raw matrix from an extraction, then impute and fit scaling.

    With ``out_dir`` also writes ``raw_features.csv`` and ``friction.csv``
    next to the outputs of :func:`assemble_matrix`.
    """
    raw = build_raw_matrix(extraction, dictionary, admissible)
    result = assemble_matrix(raw, dataset, extraction.fit_ids, dictionary, config, excluded_names, policies,
                             excluded_no_enrolments=len(extraction.excluded_no_enrolments),
                             out_dir=out_dir, force=force)
    if out_dir is not None:
        write_matrix(raw, Path(out_dir) / "raw_features.csv")
        write_friction(extraction.friction, Path(out_dir) / "friction.csv")
    return result


def write_friction(friction, path) -> None:
    fr = pd.DataFrame(friction.to_records(),
                      columns=["course_id", "attempted", "dropped", "failed", "ifc", "is_filter"])
    fr.to_csv(path, index=False, lineterminator="\n", float_format="%.17g")


def assemble_matrix(raw: FeatureMatrix, dataset: Dataset, fit_ids, dictionary: dict, config: dict,
                    excluded_names=(), policies=None, excluded_no_enrolments: int = 0,
                    out_dir=None, force=False) -> Assembled:
    """Impute and fit scaling on the fitting population; optionally serialise.

    Writes ``matrix.csv`` (imputed, unscaled, with indicators),
    ``imputation.json``, ``scaling_stats.json`` and ``manifest.json``.
    """
    check_firewall(raw.columns, excluded_names)
    postcode = dict(zip(dataset.students["student_id"], dataset.students["postcode"]))
    regions = [region_of(postcode.get(s)) for s in raw.student_ids]
    fit_set = set(fit_ids)
    fit_rows = [i for i, s in enumerate(raw.student_ids) if s in fit_set]
    matrix, model = impute(raw, dictionary, policies, regions, fit_rows)
    feat_cols = matrix.feature_columns()
    fidx = [matrix.columns.index(c) for c in feat_cols]
    scaling = standardize_fit(matrix.values[np.ix_(fit_rows, fidx)], feat_cols)
    cohorts = dict(zip(dataset.students["student_id"], dataset.students["cohort_year"].astype(int)))
    manifest = make_manifest(
        "assemble", config,
        feature_count=len(raw.columns),
        feature_counts_by_level={lv: raw.levels.count(lv) for lv in ("N1", "N2", "N3", "N4")},
        n_columns=len(matrix.columns),
        n_indicator_columns=matrix.kinds.count("indicator"),
        n_imputed_cells=int(matrix.values[:, [k == "indicator" for k in matrix.kinds]].sum()),
        missing_fraction_raw=matrix_missingness(raw),
        missing_fraction=matrix_missingness(matrix),
        included_cohorts=sorted({cohorts[s] for s in raw.student_ids}),
        sample_size=len(raw.student_ids),
        n_students_total=int(len(dataset.students)),
        excluded_no_enrolments=int(excluded_no_enrolments),
        fit_population_size=len(fit_rows),
        excluded_features=sorted(excluded_names),
    )
    if out_dir is not None:
        names = ("matrix.csv", "imputation.json", "scaling_stats.json", "manifest.json")
        out = prepare_output(out_dir, names, force)
        write_matrix(matrix, out / "matrix.csv")
        write_json(model.to_dict(), out / "imputation.json")
        write_json(scaling.to_dict(), out / "scaling_stats.json")
        write_json({**manifest, "columns": matrix.columns, "levels": matrix.levels, "kinds": matrix.kinds},
                   out / "manifest.json")
    return Assembled(raw, matrix, model, scaling, manifest)
