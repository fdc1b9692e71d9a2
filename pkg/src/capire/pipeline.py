"""File-based pipeline stages behind the command line.

Each stage reads the artifacts of earlier stages from ``<out>/<stage dir>``,
writes its own artifacts plus a ``manifest.json``, and keeps no other state.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd

from . import forest as rf
from . import validation as val
from .assembly import (FeatureMatrix, ImputationModel, ScalingStats, apply_imputation, assemble_matrix,
                       build_raw_matrix, format_float, make_manifest, prepare_output, read_matrix,
                       region_of, standardize_apply, write_friction, write_json, write_matrix)
from .discovery import ClusterParams, ClusterSolution, discover, profile_archetypes
from .domain import ValidationFailed, derive_outcome_labels, load_dataset, write_csv
from .features import FeatureParams, extract_features, friction_from_records, load_dictionary
from .stats import UndefinedIndex
from .synth import generate, load_scenario
from .vot import ConfigError, VotConfig, audit_eligibility, leakage_probe

log = logging.getLogger("capire")

TOP_LEVEL_KEYS = {"description", "seed", "output_dir", "data", "synth", "vot", "features", "imputation",
                  "clustering", "validation", "classifier", "probe", "predict"}

STAGE_DIRS = {
    "synth": "data", "validate": "validate", "audit": "audit", "extract": "extract",
    "assemble": "assemble", "cluster": "cluster", "validate-clusters": "validation",
    "train": "train", "evaluate": "evaluate", "predict": "predict", "probe": "probe",
}

VALIDATION_DEFAULTS = {"bootstrap_B": 100, "permutation_P": 100, "sensitivity_grid": None,
                       "temporal_split_year": 2011, "temporal_threshold_pp": 5.0,
                       "noise_features": [], "split_discrepancy": True}
CLASSIFIER_DEFAULTS = {"forest": {}, "split": {}, "tune": True, "grid": None}
PROBE_DEFAULTS = {"runs": 50, "n_inject": 100}


class MissingArtifact(ConfigError):
    """An upstream artifact is absent; names the subcommand that produces it."""


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Effective configuration plus path resolution for one invocation."""

    def __init__(self, config: dict, base_dir=".", out_dir=None, seed=None, force=False):
        config = copy.deepcopy(config)
        unknown = set(config) - TOP_LEVEL_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if seed is not None:
            config["seed"] = int(seed)
        config.setdefault("seed", 0)
        self.base = Path(base_dir)
        self.out = Path(out_dir) if out_dir is not None else self.path(config.get("output_dir", "capire_out"))
        self.force = force
        # where results land is not part of the analysis, so it stays out of the hash
        self.config = {k: v for k, v in config.items() if k != "output_dir"}
        self.seed = int(config["seed"])
        clus = dict(config.get("clustering") or {})
        self.cluster_columns = clus.pop("columns", "auto")
        clus.setdefault("seed", self.seed)
        try:
            self.vot = VotConfig.from_dict(config.get("vot"))
            self.feature_params = FeatureParams.from_dict(config.get("features"))
            self.cluster_params = ClusterParams.from_dict(clus)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        self.validation = {**VALIDATION_DEFAULTS, **(config.get("validation") or {})}
        self.classifier = {**CLASSIFIER_DEFAULTS, **(config.get("classifier") or {})}
        self.probe = {**PROBE_DEFAULTS, **(config.get("probe") or {})}
        for name, d, ref in (("validation", self.validation, VALIDATION_DEFAULTS),
                             ("classifier", self.classifier, CLASSIFIER_DEFAULTS),
                             ("probe", self.probe, PROBE_DEFAULTS)):
            extra = set(d) - set(ref)
            if extra:
                raise ConfigError(f"unknown {name} keys: {sorted(extra)}")

    @classmethod
    def from_file(cls, path, **kw) -> "Run":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            config = json.loads(path.read_text("utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(config, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls(config, base_dir=path.parent, **kw)

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base / p

    def stage_dir(self, stage) -> Path:
        return self.out / STAGE_DIRS[stage]

    def require(self, stage, name) -> Path:
        p = self.stage_dir(stage) / name
        if not p.exists():
            raise MissingArtifact(f"{p} not found; run `capire {stage}` first")
        return p

    def manifest(self, stage, inputs=(), **fields) -> dict:
        refs = {str(Path(p).relative_to(self.out)) if Path(p).is_relative_to(self.out) else str(p):
                sha256_file(p) for p in inputs if Path(p).is_file()}
        return make_manifest(stage, self.config, inputs=refs, **fields)

    # ---- inputs -----------------------------------------------------------------

    def data_dir(self) -> Path:
        data = self.config.get("data") or {}
        if data.get("dir"):
            d = self.path(data["dir"])
            if not d.is_dir():
                raise ConfigError(f"data directory {d} not found")
            return d
        d = self.stage_dir("synth")
        if not (d / "students.csv").exists():
            raise MissingArtifact(f"{d / 'students.csv'} not found; run `capire synth` first "
                                  "or set data.dir in the config")
        return d

    def dataset(self):
        grade_scale = tuple((self.config.get("data") or {}).get("grade_scale", (0.0, 10.0)))
        ds, report = load_dataset(self.data_dir(), grade_scale)
        if ds is None:
            raise ValidationFailed(report)
        return ds

    def dictionary(self) -> dict:
        p = (self.config.get("features") or {}).get("dictionary")
        return load_dictionary(None if p is None else self.path(p))


def _input_files(d: Path):
    return sorted(p for p in d.glob("*.csv") if p.name != "ground_truth.csv")


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_synth(run: Run) -> dict:
    spec = run.config.get("synth")
    if not spec:
        raise ConfigError("`synth` needs a 'synth' section naming a scenario")
    spec = dict(spec)
    name = str(spec.pop("scenario", "planted"))
    scen = load_scenario(run.path(name) if name.endswith(".json") else name)
    scen.update(spec)
    result = generate(scen)
    out = prepare_output(run.stage_dir("synth"), ["students.csv", "manifest.json"], run.force)
    result.write(out)
    man = run.manifest("synth", scenario=result.config.name, n_students=result.config.n_students,
                       generator_seed=result.config.seed,
                       tables={k: int(len(v)) for k, v in result.dataset.tables().items() if v is not None})
    write_json(man, out / "manifest.json")
    return man


def stage_validate(run: Run) -> dict:
    d = run.data_dir()
    grade_scale = tuple((run.config.get("data") or {}).get("grade_scale", (0.0, 10.0)))
    _, report = load_dataset(d, grade_scale)
    out = prepare_output(run.stage_dir("validate"), ["validation_report.json", "manifest.json"], run.force)
    write_json(report.to_dict(), out / "validation_report.json")
    man = run.manifest("validate", _input_files(d), verdict=report.verdict, n_violations=report.n_violations)
    write_json(man, out / "manifest.json")
    if not report.passed:
        raise ValidationFailed(report)
    return man


def stage_audit(run: Run) -> dict:
    dictionary = run.dictionary()
    tags, report = audit_eligibility(dictionary["features"], run.vot)
    out = prepare_output(run.stage_dir("audit"), ["eligibility.json", "manifest.json"], run.force)
    write_json(report, out / "eligibility.json")
    counts = {t: sum(1 for g in tags if g.tag == t) for t in ("vot_admissible", "post_vot", "restricted")}
    man = run.manifest("audit", tag_counts=counts, n_features=len(tags))
    write_json(man, out / "manifest.json")
    return man


def _extract(run: Run, ds, dictionary):
    tags, report = audit_eligibility(dictionary["features"], run.vot)
    admissible = [t.feature_name for t in tags if t.tag == "vot_admissible"]
    excluded = [t.feature_name for t in tags if t.tag != "vot_admissible"]
    ex = extract_features(ds, run.vot, run.feature_params)
    return ex, build_raw_matrix(ex, dictionary, admissible), report, excluded


def stage_extract(run: Run) -> dict:
    d = run.data_dir()
    ds = run.dataset()
    ex, raw, report, excluded = _extract(run, ds, run.dictionary())
    out = prepare_output(run.stage_dir("extract"), ["raw_features.csv", "manifest.json"], run.force)
    write_matrix(raw, out / "raw_features.csv")
    write_friction(ex.friction, out / "friction.csv")
    write_json(report, out / "eligibility.json")
    labels = derive_outcome_labels(ds.students, ds.enrolments, ds.graduations, run.vot.horizon, run.vot.grace)
    # outcome labels live in their own file and never enter the matrix
    write_csv(labels, out / "labels.csv")
    man = run.manifest("extract", _input_files(d), n_students=len(raw.student_ids),
                       excluded_no_enrolments=ex.excluded_no_enrolments, excluded_features=excluded,
                       fit_population="all", columns=raw.columns, levels=raw.levels)
    write_json(man, out / "manifest.json")
    return man


def _read_manifest(path) -> dict:
    return json.loads(Path(path).read_text("utf-8"))


def stage_assemble(run: Run) -> dict:
    raw_p = run.require("extract", "raw_features.csv")
    ex_man = _read_manifest(run.require("extract", "manifest.json"))
    raw = read_matrix(raw_p, levels=ex_man["levels"])
    ds = run.dataset()
    out = run.stage_dir("assemble")
    res = assemble_matrix(raw, ds, raw.student_ids, run.dictionary(), run.config,
                          excluded_names=ex_man["excluded_features"], policies=run.config.get("imputation"),
                          excluded_no_enrolments=len(ex_man["excluded_no_enrolments"]),
                          out_dir=out, force=run.force)
    man = {**res.manifest, "inputs": run.manifest("assemble", [raw_p])["inputs"],
           "columns": res.matrix.columns, "levels": res.matrix.levels, "kinds": res.matrix.kinds}
    write_json(man, out / "manifest.json")
    return man


def load_matrix(run: Run) -> tuple[FeatureMatrix, ScalingStats, dict]:
    man = _read_manifest(run.require("assemble", "manifest.json"))
    fm = read_matrix(run.require("assemble", "matrix.csv"), man["levels"], man["kinds"])
    scaling = ScalingStats.from_dict(json.loads(run.require("assemble", "scaling_stats.json").read_text()))
    return fm, scaling, man


def clustering_matrix(fm: FeatureMatrix, scaling: ScalingStats, columns="auto"):
    """Standardised feature columns; ``auto`` drops indicators and columns with missing cells."""
    feats = fm.feature_columns()
    z = standardize_apply(scaling, fm.values[:, [fm.columns.index(c) for c in feats]], feats)
    if columns == "auto":
        keep = [j for j in range(len(feats)) if not np.isnan(z[:, j]).any()]
    else:
        unknown = set(columns) - set(feats)
        if unknown:
            raise ConfigError(f"clustering columns not in matrix: {sorted(unknown)}")
        keep = [feats.index(c) for c in columns]
        if np.isnan(z[:, keep]).any():
            raise ConfigError("clustering columns contain missing cells")
    used = [feats[j] for j in keep]
    return z[:, keep], used, [c for c in feats if c not in used]


def _attrition(run: Run, ids) -> np.ndarray:
    lab = pd.read_csv(run.require("extract", "labels.csv"), dtype={"student_id": str})
    m = dict(zip(lab["student_id"], lab["attrition_flag"].astype(float)))
    return np.array([m.get(s, np.nan) for s in ids])


def stage_cluster(run: Run) -> dict:
    fm, scaling, _ = load_matrix(run)
    params = run.cluster_params
    x, used, dropped = clustering_matrix(fm, scaling, run.cluster_columns)
    sol = discover(x, params)
    out = prepare_output(run.stage_dir("cluster"), ["clusters.csv", "manifest.json"], run.force)
    write_clusters(fm.student_ids, sol, out / "clusters.csv")
    feats = fm.feature_columns()
    values = fm.values[:, [fm.columns.index(c) for c in feats]]
    prof = profile_archetypes(values, feats, sol.labels, _attrition(run, fm.student_ids))
    write_json(prof, out / "profiles.json")
    write_json(sol.summary(), out / "indices.json")
    man = run.manifest("cluster", [run.require("assemble", "matrix.csv")], clustering_columns=used,
                       excluded_columns=dropped, eps=sol.eps, n_archetypes=sol.n_archetypes,
                       coverage=sol.coverage, params=params.to_dict())
    write_json(man, out / "manifest.json")
    return man


def write_clusters(ids, sol: ClusterSolution, path) -> None:
    lines = ["student_id,archetype,retained,dbscan_label,"
             + ",".join(f"emb_{j}" for j in range(sol.coords.shape[1]))]
    for sid, a, r, c in zip(ids, sol.labels, sol.raw_labels, sol.coords):
        lines.append(f"{sid},{int(a)},{int(a >= 0)},{int(r)}," + ",".join(format_float(float(v)) for v in c))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_clusters(path):
    df = pd.read_csv(path, dtype={"student_id": str})
    coords = df[[c for c in df.columns if c.startswith("emb_")]].to_numpy(float)
    return df["student_id"].tolist(), df["archetype"].to_numpy(np.int64), df["dbscan_label"].to_numpy(np.int64), coords


def _load_solution(run: Run):
    ids, labels, raw, coords = read_clusters(run.require("cluster", "clusters.csv"))
    man = _read_manifest(run.require("cluster", "manifest.json"))
    params = ClusterParams.from_dict(man["params"])
    sol = ClusterSolution(coords, raw, labels, man["eps"], params.min_pts, params.min_archetype_size, None)
    return ids, sol, params, man


def _cohorts(run: Run, ids) -> np.ndarray:
    st = pd.read_csv(run.data_dir() / "students.csv", dtype={"student_id": str})
    m = dict(zip(st["student_id"], st["cohort_year"].astype(int)))
    return np.array([m[s] for s in ids])


def stage_validate_clusters(run: Run) -> dict:
    fm, scaling, _ = load_matrix(run)
    ids, sol, params, cman = _load_solution(run)
    if ids != fm.student_ids:
        raise ConfigError("clusters.csv does not match matrix.csv; rerun `capire cluster`")
    x, _, _ = clustering_matrix(fm, scaling, cman["clustering_columns"])
    v = run.validation
    seed = run.seed
    out = prepare_output(run.stage_dir("validate-clusters"), ["stability.json", "manifest.json"], run.force)

    stab = val.bootstrap_stability(x, sol.labels, params, B=int(v["bootstrap_B"]), seed=seed)
    write_json(stab.to_dict(), out / "stability.json")
    try:
        perm = val.permutation_silhouette_test(sol.coords, sol.labels, P=int(v["permutation_P"]), seed=seed)
        write_json(perm.to_dict(), out / "permutation.json")
        p_value = perm.p_value
    except UndefinedIndex as exc:
        write_json({"error": str(exc)}, out / "permutation.json")
        p_value = None

    cohorts = _cohorts(run, fm.student_ids)
    att = _attrition(run, fm.student_ids)
    try:
        temporal = val.temporal_stability(x, cohorts, att, int(v["temporal_split_year"]), params,
                                          float(v["temporal_threshold_pp"]))
    except ValueError as exc:
        temporal = {"error": str(exc)}
    write_json(temporal, out / "temporal.json")

    sens = val.hyperparameter_sensitivity(x, params, v["sensitivity_grid"], reference=sol)
    cells = pd.DataFrame(sens.pop("cells"))
    cells.to_csv(out / "sensitivity.csv", index=False, lineterminator="\n", float_format="%.17g")
    write_json(sens, out / "sensitivity_summary.json")

    feats = fm.feature_columns()
    values = fm.values[:, [fm.columns.index(c) for c in feats]]
    features = list(val.NOISE_FEATURES) + [f for f in v["noise_features"] if f not in val.NOISE_FEATURES]
    try:
        noise = val.noise_analysis(values, feats, sol.labels, recluster_x=x, features=features, seed=seed)
    except ValueError as exc:
        noise = {"skipped": str(exc)}
    write_json(noise, out / "noise_analysis.json")

    if v["split_discrepancy"]:
        try:
            split = val.split_discrepancy(fm.values, sol.labels, cohorts, fm.columns, _forest_config(run),
                                          _split_config(run))
        except (rf.ModelError, ValueError) as exc:
            split = {"error": str(exc)}
        write_json(split, out / "split_discrepancy.json")

    man = run.manifest("validate-clusters", [run.require("cluster", "clusters.csv"),
                                             run.require("assemble", "matrix.csv")],
                       bootstrap_mean_ari=stab.mean, permutation_p=p_value,
                       sensitivity_mean_ari=sens["mean_ari"], sensitivity_min_ari=sens["min_ari"],
                       temporal_max_abs_delta_pp=temporal.get("max_abs_delta_pp"))
    write_json(man, out / "manifest.json")
    return man


def _forest_config(run: Run) -> rf.ForestConfig:
    d = dict(run.classifier["forest"] or {})
    d.setdefault("seed", run.seed)
    return rf.ForestConfig(**d)


def _split_config(run: Run) -> rf.SplitConfig:
    d = dict(run.classifier["split"] or {})
    d.setdefault("seed", run.seed)
    return rf.SplitConfig(**d)


def _labelled(run: Run):
    fm, _, _ = load_matrix(run)
    ids, labels, _, _ = read_clusters(run.require("cluster", "clusters.csv"))
    if ids != fm.student_ids:
        raise ConfigError("clusters.csv does not match matrix.csv; rerun `capire cluster`")
    keep = np.flatnonzero(labels >= 0)
    return fm, keep, labels


def stage_train(run: Run) -> dict:
    fm, keep, labels = _labelled(run)
    split = _split_config(run)
    y = labels[keep]
    if split.mode == "stratified_random":
        tr, te = rf.stratified_split(y, split.train_fraction, split.seed)
        split_year = None
    else:
        tr, te, split_year = rf.cohort_split(_cohorts(run, [fm.student_ids[i] for i in keep]),
                                             split.split_year, split.train_fraction)
    xtr, ytr = fm.values[keep[tr]], y[tr]
    cfg = _forest_config(run)
    tuning = []
    if run.classifier["tune"]:
        cfg, tuning = rf.tune(xtr, ytr, fm.columns, cfg, run.classifier["grid"], split.k_folds, split.seed)
    model = rf.train(xtr, ytr, fm.columns, cfg)
    out = prepare_output(run.stage_dir("train"), ["model.json", "manifest.json"], run.force)
    (out / "model.json").write_text(model.to_json() + "\n", encoding="utf-8")
    write_json({"mode": split.mode, "split_year": split_year,
                "train_ids": [fm.student_ids[i] for i in keep[tr]],
                "test_ids": [fm.student_ids[i] for i in keep[te]]}, out / "split.json")
    write_json({"selected": asdict(cfg), "grid": tuning}, out / "tuning.json")
    man = run.manifest("train", [run.require("assemble", "matrix.csv"), run.require("cluster", "clusters.csv")],
                       n_train=int(len(tr)), n_test=int(len(te)), classes=model.classes,
                       forest=asdict(cfg))
    write_json(man, out / "manifest.json")
    return man


def load_model(run: Run) -> rf.ForestModel:
    return rf.ForestModel.from_dict(json.loads(run.require("train", "model.json").read_text("utf-8")))


def stage_evaluate(run: Run) -> dict:
    fm, _, labels = _labelled(run)
    model = load_model(run)
    split = json.loads(run.require("train", "split.json").read_text("utf-8"))
    row = {s: i for i, s in enumerate(fm.student_ids)}
    te = np.array([row[s] for s in split["test_ids"]], dtype=np.int64)
    tr = np.array([row[s] for s in split["train_ids"]], dtype=np.int64)
    report = rf.evaluate(model, fm.values[te], labels[te], fm.columns)
    cfg = rf.ForestConfig(**model.config)
    report["cross_validation"] = rf.cross_validate(fm.values[tr], labels[tr], fm.columns, cfg,
                                                   _split_config(run).k_folds, _split_config(run).seed)
    levels = dict(zip(fm.columns, fm.levels))
    inter = [t[0] for t in run.dictionary().get("interactions", [])]
    imp = rf.feature_importance(model, levels, inter)
    report["importance_level_shares"] = imp["level_shares"]
    report["importance_interaction_share"] = imp["interaction_share"]
    out = prepare_output(run.stage_dir("evaluate"), ["eval_report.json", "manifest.json"], run.force)
    write_json(report, out / "eval_report.json")
    df = pd.DataFrame(imp["ranked"])
    df.insert(0, "rank", np.arange(1, len(df) + 1))
    df["interaction"] = df["feature"].isin(inter)
    df.to_csv(out / "importance.csv", index=False, lineterminator="\n", float_format="%.17g")
    man = run.manifest("evaluate", [run.require("train", "model.json")], accuracy=report["accuracy"],
                       macro_f1=report["macro_f1"], baselines=report["baselines"])
    write_json(man, out / "manifest.json")
    return man


def stage_predict(run: Run) -> dict:
    """Score students with the frozen friction table, imputation and model."""
    model = load_model(run)
    ex_man = _read_manifest(run.require("extract", "manifest.json"))
    fr = pd.read_csv(run.require("extract", "friction.csv"), dtype={"course_id": str})
    fp = run.feature_params
    friction = friction_from_records(fr.to_dict("records"), fp.w1, fp.w2, fp.filter_threshold)
    imputation = ImputationModel.from_dict(json.loads(run.require("assemble", "imputation.json").read_text()))
    pdir = (run.config.get("predict") or {}).get("data_dir")
    if pdir:
        ds, report = load_dataset(run.path(pdir))
        if ds is None:
            raise ValidationFailed(report)
    else:
        ds = run.dataset()
    dictionary = run.dictionary()
    ex = extract_features(ds, run.vot, fp, friction=friction)
    raw = build_raw_matrix(ex, dictionary, ex_man["columns"])
    if raw.columns != ex_man["columns"]:
        raise ConfigError("feature schema differs from the extraction used for training")
    postcode = dict(zip(ds.students["student_id"], ds.students["postcode"]))
    mat = apply_imputation(raw, imputation, [region_of(postcode.get(s)) for s in raw.student_ids])
    pred, dist = rf.predict(model, mat.values, mat.columns)
    out = prepare_output(run.stage_dir("predict"), ["predictions.csv", "manifest.json"], run.force)
    lines = ["student_id,archetype," + ",".join(f"vote_{c}" for c in model.classes)]
    for sid, p, d in zip(raw.student_ids, pred, dist):
        lines.append(f"{sid},{int(p)}," + ",".join(format_float(float(v)) for v in d))
    (out / "predictions.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    man = run.manifest("predict", [run.require("train", "model.json")], n_scored=len(raw.student_ids),
                       excluded_no_enrolments=ex.excluded_no_enrolments)
    write_json(man, out / "manifest.json")
    return man


def matrix_run_fn(run: Run, dictionary):
    """Dataset -> imputed matrix, the function the leakage probe compares."""
    def fn(ds):
        ex, raw, _, excluded = _extract(run, ds, dictionary)
        return assemble_matrix(raw, ds, ex.fit_ids, dictionary, run.config, excluded,
                               run.config.get("imputation")).matrix
    return fn


def stage_probe(run: Run) -> dict:
    ds = run.dataset()
    dictionary = run.dictionary()
    fn = matrix_run_fn(run, dictionary)
    base = fn(ds)
    runs = []
    for r in range(int(run.probe["runs"])):
        ok, rep = leakage_probe(fn, ds, run.vot, seed=run.seed * 1000 + r,
                                n_inject=int(run.probe["n_inject"]), baseline=base)
        runs.append(rep)
    n_ok = sum(r["identical"] for r in runs)
    out = prepare_output(run.stage_dir("probe"), ["probe.json", "manifest.json"], run.force)
    write_json({"runs": runs, "n_runs": len(runs), "n_identical": n_ok, "passed": n_ok == len(runs)},
               out / "probe.json")
    man = run.manifest("probe", n_runs=len(runs), n_identical=n_ok)
    write_json(man, out / "manifest.json")
    if n_ok != len(runs):
        raise LeakageDetected(f"{len(runs) - n_ok} of {len(runs)} perturbation runs changed the matrix")
    return man


class LeakageDetected(Exception):
    """Post-cutoff perturbations changed the feature matrix."""


STAGES = {
    "synth": stage_synth, "validate": stage_validate, "audit": stage_audit, "extract": stage_extract,
    "assemble": stage_assemble, "cluster": stage_cluster, "validate-clusters": stage_validate_clusters,
    "train": stage_train, "evaluate": stage_evaluate, "predict": stage_predict, "probe": stage_probe,
}
ALL_ORDER = ("synth", "validate", "audit", "extract", "assemble", "cluster", "validate-clusters",
             "train", "evaluate", "predict", "probe")


def run_all(run: Run) -> dict:
    done = {}
    for stage in ALL_ORDER:
        if stage == "synth" and not run.config.get("synth"):
            continue
        t0 = time.perf_counter()
        done[stage] = STAGES[stage](run)
        log.info("%-18s %6.1fs", stage, time.perf_counter() - t0)
    return done
