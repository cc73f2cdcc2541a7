"""Combining several detectors: pooled voting versus a searched merge tree.

Three detectors of uneven quality are merged by pooled voting, by voting
with per-class AP weights, and by a plan searched on mined validation folds.
"""

import numpy as np

from detkit import SearchConfig, auto_ensemble, evaluate, execute_plan, naive_ensemble
from detkit.autoensemble import plan_to_json

from _toy import detector, ground_truth

rng = np.random.default_rng(1)
gts = ground_truth(rng, n_images=300)
models = {
    "strong": detector(rng, gts, "strong", 0.9, 0.03, 0.5),
    "medium": detector(rng, gts, "medium", 0.7, 0.06, 1.5),
    "noisy": detector(rng, gts, "noisy", 0.6, 0.12, 3.0),
}
reports = {name: evaluate(d, gts) for name, d in models.items()}
for name, r in reports.items():
    print(f"{name:<8} mAP {r.map:.4f}")

pooled = naive_ensemble(list(models.values()))
weighted = naive_ensemble(list(models.values()), reports=reports)
print(f"\npooled voting            mAP {evaluate(pooled, gts).map:.4f}")
print(f"AP-weighted voting       mAP {evaluate(weighted, gts).map:.4f}")

# Search on two small folds (10% each); the tree is grown on fold A and the
# merge operators are tuned on both.
result = auto_ensemble(models, gts, cfg=SearchConfig(budget=30, seed=0))
s = result.summary()
print(f"searched plan            fold A {s['fitness_a']:.4f}, fold B {s['fitness_b']:.4f}")
print(f"  best-so-far trace      {[round(v, 4) for v in s['architecture_trace']]}")
print(f"  leaf depths            {s['leaf_depth']}")
rest = result.folds["train"]
merged = execute_plan(result.plan, models).restrict_images(rest)
print(f"  on the other 80%       mAP {evaluate(merged, gts.restrict_images(rest)).map:.4f}")
print("\nplan:\n" + plan_to_json(result.plan))
