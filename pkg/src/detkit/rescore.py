"""Category co-occurrence statistics and co-occurrence based confidence raising."""

from __future__ import annotations

import io as _io
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .data import DetectionSet, GroundTruthSet


@dataclass(frozen=True, eq=False)
class CooccurrenceModel:
    """Object counts and conditional co-occurrence probabilities.

    ``object_count[i]`` is the number of boxes of category ``i``;
    ``pair_count[i, j]`` the number of boxes of ``i`` lying in an image that
    also holds at least one box of ``j`` (``i != j``; the diagonal is 0).
    ``cond[i, j]`` is ``pair_count[i, j] / object_count[i]`` by default, or
    ``pair_count[j, i] / object_count[j]`` with ``normalize="j"``.
    """

    categories: Tuple[str, ...]
    object_count: np.ndarray
    pair_count: np.ndarray
    cond: np.ndarray

    def __post_init__(self):
        n = len(self.categories)
        if self.cond.shape != (n, n):
            raise ValueError("cond must be square over the categories")
        if np.any(self.cond < 0) or np.any(self.cond > 1):
            raise ValueError("conditional probabilities must lie in [0, 1]")
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.categories)})

    @classmethod
    def from_matrix(cls, categories: Sequence[str], cond) -> "CooccurrenceModel":
        cats = tuple(categories)
        cond = np.asarray(cond, dtype=np.float64)
        n = len(cats)
        return cls(cats, np.zeros(n, dtype=np.int64), np.zeros((n, n), dtype=np.int64), cond)

    def index(self, category: str) -> Optional[int]:
        return self._index.get(category)

    def p(self, i: str, j: str) -> float:
        a, b = self.index(i), self.index(j)
        if a is None or b is None or a == b:
            return 0.0
        return float(self.cond[a, b])

    def to_csv(self) -> str:
        out = _io.StringIO()
        out.write("i,j,C_i,C_ij,cond\n")
        for a, ci in enumerate(self.categories):
            for b, cj in enumerate(self.categories):
                if a == b:
                    continue
                out.write(f"{ci},{cj},{self.object_count[a]},{self.pair_count[a, b]},{self.cond[a, b]:.6f}\n")
        return out.getvalue()


def build_cooccurrence(gts: GroundTruthSet, normalize: str = "i") -> CooccurrenceModel:
    if normalize not in ("i", "j"):
        raise ValueError("normalize must be 'i' or 'j'")
    cats = gts.categories
    index = {c: k for k, c in enumerate(cats)}
    n = len(cats)
    count = np.zeros(n, dtype=np.int64)
    pair = np.zeros((n, n), dtype=np.int64)
    per_image: Dict[str, np.ndarray] = {}
    for img, lab in zip(gts.image_ids.tolist(), gts.labels.tolist()):
        v = per_image.setdefault(img, np.zeros(n, dtype=np.int64))
        v[index[lab]] += 1
    for v in per_image.values():
        count += v
        present = v > 0
        pair += np.outer(v, present.astype(np.int64))
    np.fill_diagonal(pair, 0)
    cond = np.zeros((n, n))
    if normalize == "i":
        np.divide(pair, count[:, None], out=cond, where=count[:, None] > 0)
    else:
        np.divide(pair.T, count[None, :], out=cond, where=count[None, :] > 0)
    return CooccurrenceModel(cats, count, pair, cond)


def cooccurrence_bounds(top_scores: np.ndarray, cond: np.ndarray) -> np.ndarray:
    """Smallest ``t >= top_scores`` with ``t[i] >= t[j] * cond[i, j]`` for all ``j != i``.

    Fixed point of ``t <- max(t, max_j t[j] * cond[i, j])``; since every factor
    is at most 1 it is reached after at most ``len(t)`` sweeps.
    """
    t = np.asarray(top_scores, dtype=np.float64).copy()
    c = np.array(cond, dtype=np.float64)
    np.fill_diagonal(c, 0.0)
    for _ in range(len(t) + 1):
        nxt = np.maximum(t, (c * t[None, :]).max(axis=1)) if len(t) else t
        if np.array_equal(nxt, t):
            break
        t = nxt
    return np.minimum(t, 1.0)


def rescore_image(labels, scores, model: CooccurrenceModel, lam: float = 1.0) -> np.ndarray:
    """Raised scores for the detections of one image.

    For every category ``i`` present, the top-scoring box of ``i`` is moved a
    fraction ``lam`` of the way up to the co-occurrence bound of ``i``. Other
    boxes and categories already at their bound are untouched.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be in [0, 1]")
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    out = scores.copy()
    if len(scores) == 0 or lam == 0.0:
        return out
    cats = sorted(set(labels.tolist()))
    if len(cats) < 2:
        return out
    top_idx = []
    for c in cats:
        idx = np.flatnonzero(labels == c)
        top_idx.append(idx[np.argmax(scores[idx])])
    top_idx = np.asarray(top_idx)
    top = scores[top_idx]
    mi = [model.index(c) for c in cats]
    cond = np.zeros((len(cats), len(cats)))
    for a, ia in enumerate(mi):
        for b, ib in enumerate(mi):
            if a != b and ia is not None and ib is not None:
                cond[a, b] = model.cond[ia, ib]
    bound = cooccurrence_bounds(top, cond)
    raise_mask = top < bound
    new = top + lam * (bound - top)
    out[top_idx[raise_mask]] = np.clip(np.maximum(new[raise_mask], top[raise_mask]), 0.0, 1.0)
    return out


def rescore(dets: DetectionSet, model: CooccurrenceModel, lam: float = 0.5) -> DetectionSet:
    """Apply :func:`rescore_image` per image; boxes and row order are unchanged."""
    if not len(dets):
        return dets
    scores = dets.scores.copy()
    order = np.argsort(dets.image_ids, kind="stable")
    imgs = dets.image_ids[order]
    cuts = np.flatnonzero(imgs[1:] != imgs[:-1]) + 1
    for idx in np.split(order, cuts):
        scores[idx] = rescore_image(dets.labels[idx], dets.scores[idx], model, lam)
    return dets.replace(scores=scores)
