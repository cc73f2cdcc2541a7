"""Training-side helpers on a long-tailed label set.

Class-aware sampling, expert-model negatives, anchor clustering, crop scale
sampling, and co-occurrence rescoring.
"""

import numpy as np

from detkit import (ClassifierWeights, GroundTruthSet, ScaleDistribution, build_cooccurrence, build_sampling_plan,
                    kmeans_anchors, rescore_image, select_expert_categories)
from detkit.classtools import sample_crop_scale

rng = np.random.default_rng(2)

# a long tail: category i appears on roughly 400 / (i + 1) images
ids, labels, boxes = [], [], []
for i in range(8):
    for j in range(400 // (i + 1)):
        w, h = rng.uniform(0.05, 0.5, 2)
        x0, y0 = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        ids.append(f"c{i}_{j}")
        labels.append(f"cat{i}")
        boxes.append((x0, y0, x0 + w, y0 + h))
gts = GroundTruthSet(ids, labels, boxes, np.zeros(len(ids), bool))

plan = build_sampling_plan(gts)
draws = plan.draw(20_000, seed=0)
uniform = rng.choice(gts.images, 20_000)
print("share of draws per category (class-aware vs uniform):")
for i in range(8):
    print(f"  cat{i}: {np.mean([d.startswith(f'c{i}_') for d in draws]):.3f}"
          f"  {np.mean([d.startswith(f'c{i}_') for d in uniform]):.3f}")

# classifier rows: cat1 is close to cat0, the others are unrelated
W = rng.normal(size=(8, 16))
W[1] = W[0] + 0.3 * rng.normal(size=16)
sel = select_expert_categories(["cat0"], ClassifierWeights(tuple(f"cat{i}" for i in range(8)), W), 0.25, gts)
print(f"\nexpert for cat0: negatives {sel.negative}, "
      f"{len(sel.positive_images)} positive vs {len(sel.negative_images)} negative images")

wh = np.stack([gts.boxes[:, 2] - gts.boxes[:, 0], gts.boxes[:, 3] - gts.boxes[:, 1]], axis=1) * 800
for metric in ("iou", "log"):
    a = kmeans_anchors(wh, 6, metric=metric, seed=0)
    print(f"\nanchors ({metric}), mean distance {a.mean_distance:.4f}:")
    print(np.round(a.wh[np.argsort(a.wh.prod(axis=1))], 1))

dist = ScaleDistribution.from_ground_truth(gts)
print(f"\ncrop scales: {[round(sample_crop_scale(dist, u), 3) for u in (0.05, 0.25, 0.5, 0.75, 0.95)]}")

# co-occurrence: person appears with most guitars
B = (0.1, 0.1, 0.5, 0.5)
rows = [(f"g{i}", "guitar") for i in range(10)] + [(f"g{i}", "person") for i in range(9)] + [("x", "person")]
co = build_cooccurrence(GroundTruthSet([r[0] for r in rows], [r[1] for r in rows], [B] * len(rows),
                                       np.zeros(len(rows), bool)), normalize="j")
print(f"\np(person | guitar) = {co.p('person', 'guitar'):.2f}")
for lam in (0.0, 0.5, 1.0):
    out = rescore_image(["guitar", "person"], [0.95, 0.4], co, lam)
    print(f"  lambda {lam}: person 0.40 -> {out[1]:.4f}")
