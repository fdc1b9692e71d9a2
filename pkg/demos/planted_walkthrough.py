"""Planted cohort end to end in memory: features, archetypes, profiles, classifier.

    python3 demos/planted_walkthrough.py [n_students]
"""

import sys

import numpy as np

from capire.assembly import assemble
from capire.discovery import ClusterParams, discover, profile_archetypes
from capire.features import extract_features, load_dictionary
from capire.forest import ForestConfig, evaluate, feature_importance, stratified_split, train
from capire.pipeline import clustering_matrix
from capire.stats import adjusted_rand_index
from capire.synth import generate, load_scenario
from capire.vot import VotConfig, audit_eligibility

n = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
scen = load_scenario("planted")
scen["n_students"] = n
res = generate(scen)
vot = VotConfig(cutoff=3)

dictionary = load_dictionary()
tags, _ = audit_eligibility(dictionary["features"], vot)
admissible = [t.feature_name for t in tags if t.tag == "vot_admissible"]
excluded = [t.feature_name for t in tags if t.tag != "vot_admissible"]
extraction = extract_features(res.dataset, vot)
a = assemble(extraction, res.dataset, dictionary, admissible, {"seed": 0}, excluded_names=excluded)
fm = a.matrix
x, cols, dropped = clustering_matrix(fm, a.scaling)
print(f"{len(fm.student_ids)} students, {len(fm.feature_columns())} features, clustering on {len(cols)} "
      f"(excluded: {', '.join(dropped) or 'none'})")

sol = discover(x, ClusterParams())
gt = res.ground_truth.set_index("student_id").loc[fm.student_ids]
print(f"eps {sol.eps:.3f}: {sol.n_archetypes} archetypes, coverage {sol.coverage:.1%}, "
      f"ARI vs templates {adjusted_rand_index(sol.labels, gt.template_id.to_numpy()):.3f}")

feats = fm.feature_columns()
values = fm.values[:, [fm.columns.index(c) for c in feats]]
prof = profile_archetypes(values, feats, sol.labels, gt.attrition_flag.to_numpy(float))
print(f"\npopulation attrition {prof['population_attrition_rate']:.1%}")
for p in prof["profiles"]:
    k = p["archetype"]
    name = "residual" if p["residual"] else f"archetype {k}"
    top = sorted(((f, z) for f, z in p["z"].items() if z is not None), key=lambda kv: -abs(kv[1]))[:3]
    main_template = gt.template_id[sol.labels == k].value_counts().index[0]
    print(f"  {name:>12}: n={p['n_members']:4d} attrition {p['attrition_rate']:.1%} ({main_template}); "
          + ", ".join(f"{f} {z:+.2f}" for f, z in top))

keep = np.flatnonzero(sol.labels >= 0)
y = sol.labels[keep]
tr, te = stratified_split(y, 0.7, seed=0)
model = train(fm.values[keep[tr]], y[tr], fm.columns, ForestConfig(n_trees=100))
rep = evaluate(model, fm.values[keep[te]], y[te])
print(f"\nclassifier: accuracy {rep['accuracy']:.3f}, macro F1 {rep['macro_f1']:.3f}, "
      f"majority baseline {rep['baselines']['majority_accuracy']:.3f}")
imp = feature_importance(model, dict(zip(fm.columns, fm.levels)))
print("top features:", ", ".join(f"{r['feature']} ({r['importance']:.3f})" for r in imp["ranked"][:5]))
print("level shares:", {k: round(v, 3) for k, v in imp["level_shares"].items()})
