"""Per-group NMS variants: greedy, Gaussian soft-NMS and the two-stage adj-NMS.

Group functions take ``boxes (N, 4)`` and ``scores (N,)`` for a single
(image, category) and return ``(keep, new_scores)``: indices into the input in
descending output-score order and the matching output scores.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .boxes import areas, iou_matrix
from .data import DetectionSet

NMS_KINDS = ("naive", "soft", "adj")


@dataclass(frozen=True)
class NmsConfig:
    kind: str = "adj"
    hard_threshold: float = 0.5
    sigma: float = 0.5
    score_floor: float = 1e-5

    def __post_init__(self):
        if self.kind not in NMS_KINDS:
            raise ValueError(f"unknown NMS kind {self.kind!r}")
        if not 0.0 <= self.hard_threshold <= 1.0:
            raise ValueError("hard_threshold must be in [0, 1]")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0.0 <= self.score_floor < 1.0:
            raise ValueError("score_floor must be in [0, 1)")


def _rank(boxes: np.ndarray, scores: np.ndarray) -> np.ndarray:
    # score desc, then larger area, then input order
    return np.lexsort((np.arange(len(scores)), -areas(boxes), -scores))


def nms_naive(boxes, scores, threshold: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
    """Greedy NMS: drop a box whose IoU with a kept box exceeds ``threshold``."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if n == 0:
        return np.zeros(0, dtype=np.intp), np.zeros(0)
    order = _rank(boxes, scores)
    ious = iou_matrix(boxes[order], boxes[order])
    alive = np.ones(n, dtype=bool)
    keep = []
    for pos in range(n):
        if not alive[pos]:
            continue
        keep.append(pos)
        alive[pos + 1:] &= ious[pos, pos + 1:] <= threshold
    keep = order[np.asarray(keep, dtype=np.intp)]
    return keep, scores[keep]


def nms_soft(boxes, scores, sigma: float = 0.5, score_floor: float = 1e-5) -> Tuple[np.ndarray, np.ndarray]:
    """Iterative Gaussian soft-NMS.

    The highest-scoring remaining box is moved to the output, and every box
    still pending has its score multiplied by ``exp(-iou**2 / sigma)`` against
    it. Pending boxes whose score drops below ``score_floor`` are discarded.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    cur = np.array(scores, dtype=np.float64)
    n = len(cur)
    if n == 0:
        return np.zeros(0, dtype=np.intp), np.zeros(0)
    ious = iou_matrix(boxes, boxes)
    area = areas(boxes)
    pending = np.ones(n, dtype=bool)
    keep, out = [], []
    while pending.any():
        idx = np.flatnonzero(pending)
        # max score, ties -> larger area -> lower input index
        best = idx[np.lexsort((idx, -area[idx], -cur[idx]))[0]]
        keep.append(best)
        out.append(cur[best])
        pending[best] = False
        rest = np.flatnonzero(pending)
        if len(rest) == 0:
            break
        cur[rest] *= np.exp(-(ious[best, rest] ** 2) / sigma)
        pending[rest[cur[rest] < score_floor]] = False
    return np.asarray(keep, dtype=np.intp), np.asarray(out)


def nms_adj(boxes, scores, hard_threshold: float = 0.5, sigma: float = 0.5,
            score_floor: float = 1e-5) -> Tuple[np.ndarray, np.ndarray]:
    """Greedy NMS at ``hard_threshold``, then soft-NMS rescoring of the survivors."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    survivors, _ = nms_naive(boxes, scores, hard_threshold)
    sub_keep, new_scores = nms_soft(boxes[survivors], np.asarray(scores, dtype=np.float64)[survivors],
                                    sigma, score_floor)
    return survivors[sub_keep], new_scores


def nms_group(boxes, scores, cfg: NmsConfig) -> Tuple[np.ndarray, np.ndarray]:
    if cfg.kind == "naive":
        return nms_naive(boxes, scores, cfg.hard_threshold)
    if cfg.kind == "soft":
        return nms_soft(boxes, scores, cfg.sigma, cfg.score_floor)
    return nms_adj(boxes, scores, cfg.hard_threshold, cfg.sigma, cfg.score_floor)


def apply_nms(dets: DetectionSet, cfg: NmsConfig = NmsConfig()) -> DetectionSet:
    """Run NMS independently on every (image, category) group.

    Output rows are concatenated in sorted (image, category) order, each group
    in descending score order.
    """
    if not len(dets):
        return dets
    rows, new_scores = [], []
    for idx in dets.groups.values():
        keep, s = nms_group(dets.boxes[idx], dets.scores[idx], cfg)
        rows.append(idx[keep])
        new_scores.append(s)
    rows = np.concatenate(rows)
    out = dets.take(rows)
    return out.replace(scores=np.concatenate(new_scores))
