"""AP@0.5 / mAP in the OpenImages style: hierarchy-expanded and group-of aware."""

from __future__ import annotations

import io as _io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .boxes import ioa_matrix, iou_matrix
from .data import DetectionSet, GroundTruthSet
from .hierarchy import CategoryHierarchy, expand_detections, expand_ground_truth

logger = logging.getLogger(__name__)

TP, FP, IGNORED = 1, 0, -1


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    group_of_ioa_threshold: float = 0.5
    expand_hierarchy: bool = True

    def __post_init__(self):
        for name in ("iou_threshold", "group_of_ioa_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


@dataclass
class EvalReport:
    per_category_ap: Dict[str, float]
    n_gt: Dict[str, int]
    n_tp: Dict[str, int]
    n_fp: Dict[str, int]
    n_ignored: Dict[str, int]
    excluded: Tuple[str, ...] = ()
    map: float = field(init=False)

    def __post_init__(self):
        aps = list(self.per_category_ap.values())
        self.map = float(np.mean(aps)) if aps else 0.0

    def to_csv(self) -> str:
        out = _io.StringIO()
        out.write("category,AP,n_gt,n_tp,n_fp\n")
        for c in sorted(self.per_category_ap):
            out.write(f"{c},{self.per_category_ap[c]:.6f},{self.n_gt[c]},{self.n_tp[c]},{self.n_fp[c]}\n")
        return out.getvalue()


def match_image_category(det_boxes, gt_boxes, gt_is_group_of, cfg: EvalConfig = EvalConfig()) -> np.ndarray:
    """Verdict per detection (``TP``/``FP``/``IGNORED``) for one (image, category).

    ``det_boxes`` must already be in descending score order. A detection takes
    the unmatched instance box with the highest IoU at or above the threshold
    (lowest index on ties); failing that it is ignored when it lies inside a
    group-of box by IoA, and is a false positive otherwise.
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    group = np.asarray(gt_is_group_of, dtype=bool).reshape(-1)
    n = len(det_boxes)
    verdicts = np.full(n, FP, dtype=np.int8)
    if n == 0:
        return verdicts
    inst = gt_boxes[~group]
    ious = iou_matrix(det_boxes, inst)
    in_group = np.zeros(n, dtype=bool)
    if group.any():
        in_group = ioa_matrix(det_boxes, gt_boxes[group]).max(axis=1) >= cfg.group_of_ioa_threshold
    free = np.ones(len(inst), dtype=bool)
    for d in range(n):
        if free.any():
            cand = np.where(free & (ious[d] >= cfg.iou_threshold), ious[d], -1.0)
            best = int(np.argmax(cand))
            if cand[best] >= 0.0:
                verdicts[d] = TP
                free[best] = False
                continue
        if in_group[d]:
            verdicts[d] = IGNORED
    return verdicts


def average_precision(verdicts, n_gt: int) -> Optional[float]:
    """All-point interpolated AP of a score-sorted verdict stream.

    Ignored verdicts are dropped. Returns ``None`` when ``n_gt == 0``; such a
    category is excluded from the mean rather than scored 0.
    """
    if n_gt <= 0:
        return None
    v = np.asarray(verdicts)
    v = v[v != IGNORED]
    if len(v) == 0:
        return 0.0
    is_tp = v == TP
    tp = np.cumsum(is_tp)
    precision = tp / np.arange(1, len(v) + 1)
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(interp[is_tp]) / n_gt)


def _canonical_order(scores: np.ndarray, boxes: np.ndarray, image_ids=None) -> np.ndarray:
    keys = [boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0]]
    if image_ids is not None:
        keys.append(image_ids)
    keys.append(-scores)
    return np.lexsort(keys)


def _evaluate_category(cat: str, dets: DetectionSet, gts: GroundTruthSet, det_keys, cfg: EvalConfig):
    scores, boxes, images, verdicts = [], [], [], []
    for img in det_keys:
        idx = dets.groups[(img, cat)]
        order = _canonical_order(dets.scores[idx], dets.boxes[idx])
        idx = idx[order]
        g = gts.groups.get((img, cat))
        if g is None:
            v = np.full(len(idx), FP, dtype=np.int8)
        else:
            v = match_image_category(dets.boxes[idx], gts.boxes[g], gts.is_group_of[g], cfg)
        scores.append(dets.scores[idx])
        boxes.append(dets.boxes[idx])
        images.append(np.full(len(idx), img))
        verdicts.append(v)
    n_gt = int(np.sum(~gts.is_group_of[gts.labels == cat])) if len(gts) else 0
    if scores:
        scores = np.concatenate(scores)
        boxes = np.concatenate(boxes)
        verdicts = np.concatenate(verdicts)
        order = _canonical_order(scores, boxes, np.concatenate(images))
        verdicts = verdicts[order]
    else:
        verdicts = np.zeros(0, dtype=np.int8)
    ap = average_precision(verdicts, n_gt)
    return cat, ap, n_gt, int(np.sum(verdicts == TP)), int(np.sum(verdicts == FP)), int(np.sum(verdicts == IGNORED))


def evaluate(dets: DetectionSet, gts: GroundTruthSet, hierarchy: Optional[CategoryHierarchy] = None,
             cfg: EvalConfig = EvalConfig(), threads: int = 1) -> EvalReport:
    """Per-category AP and mAP of ``dets`` against ``gts``.

    Every roster image is treated as exhaustively annotated. Detections on
    images outside the ground-truth roster, or of categories the ground truth
    never mentions, are dropped with a warning.
    """
    if cfg.expand_hierarchy and hierarchy is not None:
        dets = expand_detections(dets, hierarchy)
        gts = expand_ground_truth(gts, hierarchy)

    roster = set(gts.images)
    gt_cats = set(gts.categories)
    if len(dets):
        on_roster = np.isin(dets.image_ids, list(roster))
        if not on_roster.all():
            logger.warning("dropping %d detections on images without ground truth", int((~on_roster).sum()))
        known = np.isin(dets.labels, list(gt_cats))
        unknown = sorted(set(dets.labels[~known].tolist()))
        if unknown:
            logger.warning("categories absent from ground truth excluded: %s", unknown[:10])
        keep = on_roster & known
        if not keep.all():
            dets = dets.take(np.flatnonzero(keep))
    else:
        unknown = []

    det_images: Dict[str, List[str]] = {c: [] for c in gt_cats}
    for img, cat in dets.groups:
        det_images[cat].append(img)

    cats = sorted(gt_cats)

    def run(cat):
        return _evaluate_category(cat, dets, gts, det_images[cat], cfg)

    if threads > 1 and len(cats) > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, cats))
    else:
        results = [run(c) for c in cats]

    aps, n_gt, n_tp, n_fp, n_ign = {}, {}, {}, {}, {}
    excluded = list(unknown)
    for cat, ap, g, t, f, i in results:
        n_gt[cat], n_tp[cat], n_fp[cat], n_ign[cat] = g, t, f, i
        if ap is None:
            excluded.append(cat)
        else:
            aps[cat] = ap
    return EvalReport(aps, n_gt, n_tp, n_fp, n_ign, excluded=tuple(sorted(excluded)))
