"""Multi-model ensembling: per-class AP reweighting, top-k voting, cascade fusion."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .boxes import iou_matrix
from .data import DetectionSet
from .evaluation import EvalReport
from .nms import NmsConfig, nms_group

logger = logging.getLogger(__name__)

CASCADE_STAGE_WEIGHTS = (0.75, 1.0, 0.25, 0.25)


@dataclass(frozen=True)
class VotingConfig:
    k: int = 4
    match_iou: float = 0.5
    score_bonus: float = 0.05
    box_self_weight: float = 0.7
    box_voter_weight: float = 0.3

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if min(self.score_bonus, self.box_self_weight, self.box_voter_weight) < 0:
            raise ValueError("voting weights must be nonnegative")
        if abs(self.box_self_weight + self.box_voter_weight - 1.0) > 1e-12:
            raise ValueError("box_self_weight + box_voter_weight must equal 1")
        if not 0.0 <= self.match_iou <= 1.0:
            raise ValueError("match_iou must be in [0, 1]")


@dataclass
class ClassWeightTable:
    weight: Dict[Tuple[str, str], float] = field(default_factory=dict)

    def get(self, source: str, category: str) -> float:
        return self.weight.get((source, category), 0.0)

    def to_csv(self) -> str:
        lines = ["source,category,weight"]
        for (s, c), w in sorted(self.weight.items()):
            lines.append(f"{s},{c},{w:.6f}")
        return "\n".join(lines) + "\n"


def _ap_lookup(report) -> Mapping[str, float]:
    return report.per_category_ap if isinstance(report, EvalReport) else report


def pfdet_weights(reports: Mapping[str, object], categories: Sequence[str]) -> ClassWeightTable:
    """``weight(m, c) = AP[m, c] / max_m' AP[m', c]`` (0 when that max is 0).

    ``reports`` maps source id to an :class:`EvalReport` or a plain
    ``{category: AP}`` dict. A source without an AP for ``c`` gets weight 0.
    """
    tables = {m: _ap_lookup(r) for m, r in reports.items()}
    table = ClassWeightTable()
    for c in sorted(set(categories)):
        present = {m: t[c] for m, t in tables.items() if c in t}
        missing = [m for m in tables if m not in present]
        if missing:
            logger.warning("no validation AP for category %r in %s; weight 0", c, missing)
        best = max(present.values(), default=0.0)
        for m in tables:
            ap = present.get(m)
            table.weight[(m, c)] = 0.0 if ap is None or best <= 0 else ap / best
    return table


def apply_class_weights(dets: DetectionSet, table: ClassWeightTable) -> DetectionSet:
    if not len(dets):
        return dets
    w = np.array([table.get(dets.source_id, c) for c in dets.labels.tolist()])
    return dets.replace(scores=np.clip(dets.scores * w, 0.0, 1.0))


def pfdet_reweight(det_sets: Sequence[DetectionSet], reports: Mapping[str, object]):
    """Reweight every set's scores by its per-category AP ratio.

    Returns the weight table and the reweighted sets (same order).
    """
    cats = set()
    for d in det_sets:
        cats.update(d.categories)
    for r in reports.values():
        cats.update(_ap_lookup(r))
    table = pfdet_weights(reports, sorted(cats))
    for d in det_sets:
        if d.source_id not in reports:
            logger.warning("source %r has no validation report; all weights 0", d.source_id)
    return table, [apply_class_weights(d, table) for d in det_sets]


def fuse(score, box, voter_scores, voter_boxes, cfg: VotingConfig = VotingConfig(), bonus_mask=None):
    """Score bonus and convex box blend for one kept box and its ``j`` voters.

    ``C = S + bonus * sum(S_i)`` clamped to 1 and
    ``B = self_w * B + (voter_w / j) * sum(B_i)``; with no voters both pass
    through. ``bonus_mask`` selects the voters whose scores earn the bonus.
    """
    box = np.asarray(box, dtype=np.float64)
    voter_scores = np.asarray(voter_scores, dtype=np.float64).reshape(-1)
    voter_boxes = np.asarray(voter_boxes, dtype=np.float64).reshape(-1, 4)
    j = len(voter_scores)
    if j == 0:
        return float(score), box.copy()
    if bonus_mask is not None:
        voter_scores = voter_scores[np.asarray(bonus_mask, dtype=bool)]
    fused_score = min(1.0, float(score) + cfg.score_bonus * float(np.sum(voter_scores)))
    # B + w_v * mean(B_i - B) == w_s * B + w_v * mean(B_i) when w_s + w_v = 1
    fused_box = box + (cfg.box_voter_weight / j) * np.sum(voter_boxes - box, axis=0)
    return fused_score, fused_box


def vote_group(boxes, scores, sources, cfg: VotingConfig = VotingConfig(),
               nms_cfg: Optional[NmsConfig] = NmsConfig(), bonus_mask=None):
    """Merge one (image, category) pool of detections from several sources.

    NMS runs on the pooled list first. Each survivor then takes up to ``k``
    voters from the full pool: boxes of other sources with IoU at least
    ``match_iou``, best IoU first (higher score, then lower index on ties).

    Returns ``(rows, scores, boxes)``: the survivor rows of the pool and their
    fused scores and boxes, sorted by fused score descending.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    sources = np.asarray(sources)
    bonus = np.ones(len(scores), dtype=bool) if bonus_mask is None else np.asarray(bonus_mask, dtype=bool)
    if nms_cfg is None:
        keep = np.lexsort((np.arange(len(scores)), -scores))
        kept_scores = scores[keep]
    else:
        keep, kept_scores = nms_group(boxes, scores, nms_cfg)
    if len(keep) == 0:
        return keep, np.zeros(0), np.zeros((0, 4))
    ious = iou_matrix(boxes[keep], boxes)
    out_scores = np.empty(len(keep))
    out_boxes = np.empty((len(keep), 4))
    idx_all = np.arange(len(scores))
    for r, p in enumerate(keep):
        cand = np.flatnonzero((sources != sources[p]) & (ious[r] >= cfg.match_iou))
        if len(cand):
            order = np.lexsort((idx_all[cand], -scores[cand], -ious[r, cand]))
            cand = cand[order[:cfg.k]]
        s, b = fuse(kept_scores[r], boxes[p], scores[cand], boxes[cand], cfg, bonus[cand])
        out_scores[r] = s
        out_boxes[r] = b
    out_boxes = np.clip(out_boxes, 0.0, 1.0)
    out_boxes[:, 2:] = np.maximum(out_boxes[:, 2:], out_boxes[:, :2])
    order = np.argsort(-out_scores, kind="stable")
    return keep[order], out_scores[order], out_boxes[order]


def vote_pool(pool: DetectionSet, sources, cfg: VotingConfig = VotingConfig(),
              nms_cfg: Optional[NmsConfig] = NmsConfig(), bonus_mask=None,
              source_id: str = "ensemble") -> DetectionSet:
    """Apply :func:`vote_group` to every (image, category) group of ``pool``.

    ``sources`` holds one source tag per pool row.
    """
    if not len(pool):
        return pool.replace(source_id=source_id)
    sources = np.asarray(sources)
    bonus = np.ones(len(pool), dtype=bool) if bonus_mask is None else np.asarray(bonus_mask, dtype=bool)
    rows, scores, boxes = [], [], []
    for idx in pool.groups.values():
        r, s, b = vote_group(pool.boxes[idx], pool.scores[idx], sources[idx], cfg, nms_cfg, bonus[idx])
        rows.append(idx[r])
        scores.append(s)
        boxes.append(b)
    rows = np.concatenate(rows)
    return DetectionSet(pool.image_ids[rows], pool.labels[rows], np.concatenate(scores),
                        np.concatenate(boxes), source_id=source_id, images=pool.images)


def naive_ensemble(det_sets: Sequence[DetectionSet], cfg: VotingConfig = VotingConfig(),
                   nms_cfg: NmsConfig = NmsConfig(), reports: Optional[Mapping[str, object]] = None,
                   source_id: str = "ensemble") -> DetectionSet:
    """Optional AP reweighting, then pooled NMS + voting across all sets."""
    det_sets = list(det_sets)
    ids = [d.source_id for d in det_sets]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate source ids {ids}")
    if reports is not None:
        _, det_sets = pfdet_reweight(det_sets, reports)
    pool = DetectionSet.concat(det_sets)
    sources = np.concatenate([np.full(len(d), i) for i, d in enumerate(det_sets)]) if len(pool) else np.zeros(0)
    return vote_pool(pool, sources, cfg, nms_cfg, source_id=source_id)


def cascade_fuse(stage_scores, weights=CASCADE_STAGE_WEIGHTS):
    """Weighted mean of per-stage classification scores along the first axis."""
    s = np.asarray(stage_scores, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if s.shape[0] != w.shape[0]:
        raise ValueError(f"{s.shape[0]} stages but {w.shape[0]} weights")
    total = w.sum()
    if not np.any(w) or total == 0:
        raise ValueError("stage weights must not all be zero")
    fused = np.tensordot(w, s, axes=(0, 0)) / total
    return float(fused) if np.ndim(fused) == 0 else fused
