"""The leakage probe on a correct window and on an off-by-one window.

Post-cutoff events are rewritten at random; a correct window leaves the
feature matrix bit-identical, a window that reads one term too far does not.

    python3 demos/leakage_probe.py
"""

from capire.features import load_dictionary
from capire.pipeline import Run, matrix_run_fn
from capire.synth import generate, load_scenario
from capire.vot import leakage_probe

scen = load_scenario("planted")
scen["n_students"] = 400
ds = generate(scen).dataset
dictionary = load_dictionary()

correct = Run({"seed": 0, "vot": {"cutoff": 3}})
leaky = Run({"seed": 0, "vot": {"cutoff": 4}})
for name, run in (("cutoff 3 (correct)", correct), ("cutoff 4 (reads the cutoff term)", leaky)):
    fn = matrix_run_fn(run, dictionary)
    results = [leakage_probe(fn, ds, correct.vot, seed=s, n_inject=100) for s in range(5)]
    n_ok = sum(ok for ok, _ in results)
    print(f"{name}: {n_ok}/5 perturbations left the matrix identical")
    changed = next((rep for ok, rep in results if not ok), None)
    if changed:
        print("  first changed columns:", ", ".join(changed["changed_columns"][:6]))
