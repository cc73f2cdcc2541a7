"""Toy detectors over a synthetic annotated set, shared by the demos."""

import numpy as np

from detkit import DetectionSet, GroundTruthSet


def ground_truth(rng, n_images=200, n_cats=6, max_objects=5):
    images = [f"im{i:04d}" for i in range(n_images)]
    ids, labels, boxes = [], [], []
    for img in images:
        for _ in range(int(rng.integers(1, max_objects + 1))):
            w, h = rng.uniform(0.08, 0.4, 2)
            x0, y0 = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
            ids.append(img)
            labels.append(f"cat{rng.integers(n_cats)}")
            boxes.append((x0, y0, x0 + w, y0 + h))
    return GroundTruthSet(ids, labels, np.round(boxes, 6), np.zeros(len(ids), bool), images=images)


def detector(rng, gts, name, recall, jitter, fp_per_image, dup_rate=0.5, n_cats=6):
    """Hits each object with prob ``recall``; adds near-duplicates and random false positives."""
    ids, labels, scores, boxes = [], [], [], []

    def emit(img, lab, s, b):
        b = np.clip(b, 0, 1)
        b[2:] = np.maximum(b[2:], b[:2])
        ids.append(img), labels.append(lab), scores.append(s), boxes.append(b)

    for img, lab, b in zip(gts.image_ids.tolist(), gts.labels.tolist(), gts.boxes):
        if rng.random() >= recall:
            continue
        size = np.tile(b[2:] - b[:2], 2)
        s = rng.uniform(0.4, 1.0)
        emit(img, lab, s, b + rng.normal(0, jitter, 4) * size)
        if rng.random() < dup_rate:
            emit(img, lab, s * rng.uniform(0.5, 0.95), b + rng.normal(0, 2 * jitter, 4) * size)
    for img in gts.images:
        for _ in range(rng.poisson(fp_per_image)):
            x0, y0 = rng.uniform(0, 0.8, 2)
            emit(img, f"cat{rng.integers(n_cats)}", rng.uniform(0, 0.7), np.array([x0, y0, x0 + 0.2, y0 + 0.2]))
    return DetectionSet(ids, labels, np.round(scores, 6), np.round(boxes, 6), source_id=name, images=gts.images)
