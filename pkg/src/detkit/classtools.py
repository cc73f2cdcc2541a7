"""Class-level tooling: class-aware sampling, expert-category selection,
k-means anchors and the crop-scale distribution."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import GroundTruthSet

ANCHOR_RATIOS = (0.1, 0.5, 1.0, 2.0, 4.0, 8.0)
ANCHOR_SCALES = (8, 11, 14)


# --------------------------------------------------------------------------
# class-aware sampling
# --------------------------------------------------------------------------

@dataclass
class SamplingPlan:
    image_probability: Dict[str, float]
    class_index: Dict[str, Tuple[str, ...]]

    def images_and_probs(self):
        images = list(self.image_probability)
        return images, np.array([self.image_probability[i] for i in images])

    def draw(self, n: int, seed: int = 0) -> List[str]:
        """``n`` images drawn i.i.d. from ``image_probability``."""
        images, p = self.images_and_probs()
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(images), size=n, p=p / p.sum())
        return [images[i] for i in idx]

    def draw_two_stage(self, n: int, seed: int = 0) -> List[str]:
        """Category uniformly, then an image of that category uniformly."""
        rng = np.random.default_rng(seed)
        cats = sorted(self.class_index)
        c = rng.integers(len(cats), size=n)
        u = rng.random(n)
        out = []
        for ci, ui in zip(c, u):
            imgs = self.class_index[cats[ci]]
            out.append(imgs[min(int(ui * len(imgs)), len(imgs) - 1)])
        return out

    def to_csv(self) -> str:
        lines = ["image_id,probability"]
        lines += [f"{img},{p:.12f}" for img, p in self.image_probability.items()]
        return "\n".join(lines) + "\n"


def build_sampling_plan(gts: GroundTruthSet) -> SamplingPlan:
    """Per-image probability of "uniform category, then uniform image of it".

    ``P(I) = sum over categories c of I of 1 / (n_categories * n_images(c))``.
    Images without annotations get no entry.
    """
    class_index: Dict[str, List[str]] = {}
    for img in gts.images:
        for c in sorted(gts.image_categories[img]):
            class_index.setdefault(c, []).append(img)
    if not class_index:
        raise ValueError("no annotated images")
    n_cat = len(class_index)
    prob: Dict[str, float] = {}
    for c in sorted(class_index):
        share = 1.0 / (n_cat * len(class_index[c]))
        for img in class_index[c]:
            prob[img] = prob.get(img, 0.0) + share
    ordered = {img: prob[img] for img in gts.images if img in prob}
    return SamplingPlan(ordered, {c: tuple(v) for c, v in sorted(class_index.items())})


# --------------------------------------------------------------------------
# expert categories
# --------------------------------------------------------------------------

def cosine_similarity(v1, v2) -> float:
    v1 = np.asarray(v1, dtype=np.float64).reshape(-1)
    v2 = np.asarray(v2, dtype=np.float64).reshape(-1)
    if v1.shape != v2.shape:
        raise ValueError(f"dimension mismatch {v1.shape} vs {v2.shape}")
    n1, n2 = np.linalg.norm(v1), np.linalg.norm(v2)
    if n1 == 0 or n2 == 0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.clip(np.dot(v1, v2) / (n1 * n2), -1.0, 1.0))


@dataclass
class ClassifierWeights:
    labels: Tuple[str, ...]
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.labels):
            raise ValueError("one weight row per label required")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("duplicate labels")
        self._index = {c: i for i, c in enumerate(self.labels)}

    def row(self, label: str) -> np.ndarray:
        if label not in self._index:
            raise KeyError(f"unknown category {label!r}")
        return self.matrix[self._index[label]]

    @classmethod
    def from_text(cls, text: str, labels: Optional[Sequence[str]] = None) -> "ClassifierWeights":
        """Whitespace-separated rows; a non-numeric first token is the row label."""
        rows, names = [], []
        for n, line in enumerate(text.splitlines(), 1):
            tokens = line.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            try:
                float(tokens[0])
                name = None
            except ValueError:
                name, tokens = tokens[0], tokens[1:]
            try:
                rows.append([float(t) for t in tokens])
            except ValueError:
                raise ValueError(f"line {n}: non-numeric weight") from None
            names.append(name if name is not None else str(len(rows) - 1))
        if len({len(r) for r in rows}) > 1:
            raise ValueError("weight rows differ in dimension")
        return cls(tuple(labels) if labels is not None else tuple(names), np.asarray(rows))


@dataclass
class ExpertSelection:
    positive: Tuple[str, ...]
    negative: Tuple[str, ...]
    positive_images: Tuple[str, ...] = ()
    negative_images: Tuple[str, ...] = ()

    @property
    def negative_per_positive(self) -> float:
        """``|neg images| / |pos images|``; the target is about 3."""
        if not self.positive_images:
            return float("nan")
        return len(self.negative_images) / len(self.positive_images)


def select_expert_categories(positive: Sequence[str], weights: ClassifierWeights, thr: float = 0.25,
                             gts: Optional[GroundTruthSet] = None) -> ExpertSelection:
    """Add categories whose classifier row is cosine-similar (> ``thr``) to any positive.

    With ``gts`` the image subsets are filled in: images holding a positive
    category, and images holding a negative but no positive category.
    """
    positive = tuple(dict.fromkeys(positive))
    if not positive:
        raise ValueError("need at least one positive category")
    pos_rows = np.stack([weights.row(c) for c in positive])
    pos_norm = np.linalg.norm(pos_rows, axis=1)
    if np.any(pos_norm == 0):
        raise ValueError("zero weight row for a positive category")
    pos_unit = pos_rows / pos_norm[:, None]
    negative = []
    for c in weights.labels:
        if c in positive:
            continue
        r = weights.row(c)
        n = np.linalg.norm(r)
        if n == 0:
            continue
        if np.max(pos_unit @ (r / n)) > thr:
            negative.append(c)
    sel = ExpertSelection(positive, tuple(negative))
    if gts is not None:
        pos_set, neg_set = set(positive), set(negative)
        pos_img, neg_img = [], []
        for img in gts.images:
            cats = gts.image_categories[img]
            if cats & pos_set:
                pos_img.append(img)
            elif cats & neg_set:
                neg_img.append(img)
        sel.positive_images, sel.negative_images = tuple(pos_img), tuple(neg_img)
    return sel


# --------------------------------------------------------------------------
# anchors
# --------------------------------------------------------------------------

def wh_iou(wh: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """IoU of (w, h) pairs sharing a common center, shape ``(len(wh), len(centers))``."""
    inter = np.minimum(wh[:, None, 0], centers[None, :, 0]) * np.minimum(wh[:, None, 1], centers[None, :, 1])
    union = (wh[:, 0] * wh[:, 1])[:, None] + (centers[:, 0] * centers[:, 1])[None, :] - inter
    return inter / union


def anchor_distance(wh: np.ndarray, centers: np.ndarray, metric: str) -> np.ndarray:
    if metric == "iou":
        return 1.0 - wh_iou(wh, centers)
    if metric == "log":
        d = np.log(wh)[:, None, :] - np.log(centers)[None, :, :]
        return np.sum(d * d, axis=-1)
    raise ValueError(f"unknown anchor metric {metric!r}")


@dataclass
class AnchorSet:
    wh: np.ndarray
    mean_distance: float = float("nan")
    history: List[float] = field(default_factory=list)
    grid: Optional[List[Tuple[float, float]]] = None

    def to_csv(self) -> str:
        lines = ["w,h"] if self.grid is None else ["w,h,scale,ratio"]
        for n, (w, h) in enumerate(self.wh.tolist()):
            row = f"{w:.6f},{h:.6f}"
            if self.grid is not None:
                row += f",{self.grid[n][0]:g},{self.grid[n][1]:g}"
            lines.append(row)
        return "\n".join(lines) + "\n"


def _cluster_cost(wh, center, metric):
    return float(anchor_distance(wh, center[None, :], metric).sum())


def kmeans_anchors(wh, k: int, metric: str = "iou", seed: int = 0, max_iter: int = 300) -> AnchorSet:
    """Lloyd k-means over box shapes with k-means++ seeding.

    ``metric="iou"`` uses ``1 - IoU`` of boxes sharing a center;
    ``metric="log"`` uses squared Euclidean distance of ``(log w, log h)``,
    whose cluster centers are geometric means. For the IoU metric a center
    only moves to the cluster mean when that lowers the cluster cost, so the
    objective never increases between iterations.
    """
    wh = np.asarray(wh, dtype=np.float64).reshape(-1, 2)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(wh):
        raise ValueError(f"k={k} exceeds the number of boxes ({len(wh)})")
    if np.any(wh <= 0):
        raise ValueError("box widths and heights must be positive")
    if metric not in ("iou", "log"):
        raise ValueError(f"unknown anchor metric {metric!r}")
    rng = np.random.default_rng(seed)

    centers = [wh[rng.integers(len(wh))]]
    for _ in range(1, k):
        d = anchor_distance(wh, np.asarray(centers), metric).min(axis=1)
        total = d.sum()
        if total <= 0:
            centers.append(wh[rng.integers(len(wh))])
        else:
            centers.append(wh[rng.choice(len(wh), p=d / total)])
    centers = np.asarray(centers, dtype=np.float64)

    history = []
    assign = None
    for _ in range(max_iter):
        dist = anchor_distance(wh, centers, metric)
        new_assign = np.argmin(dist, axis=1)
        history.append(float(dist[np.arange(len(wh)), new_assign].mean()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = wh[assign == c]
            if len(members) == 0:
                continue
            if metric == "log":
                centers[c] = np.exp(np.log(members).mean(axis=0))
            else:
                cand = members.mean(axis=0)
                if _cluster_cost(members, cand, metric) < _cluster_cost(members, centers[c], metric):
                    centers[c] = cand
    dist = anchor_distance(wh, centers, metric)
    final = float(dist.min(axis=1).mean())
    if not history or final != history[-1]:
        history.append(final)
    order = np.lexsort((centers[:, 1], centers[:, 0] * centers[:, 1]))
    return AnchorSet(centers[order], final, history)


def anchor_grid(base: float, scales=ANCHOR_SCALES, ratios=ANCHOR_RATIOS) -> List[Tuple[float, float, float, float]]:
    """``(w, h, scale, ratio)`` for every scale x ratio, ratio = h / w."""
    out = []
    for s in scales:
        for r in ratios:
            side = base * s
            out.append((side / np.sqrt(r), side * np.sqrt(r), s, r))
    return out


def snap_to_grid(anchors: AnchorSet, base: float, scales=ANCHOR_SCALES, ratios=ANCHOR_RATIOS) -> AnchorSet:
    """Replace each center by the nearest scale x ratio grid anchor in log space."""
    grid = anchor_grid(base, scales, ratios)
    gwh = np.array([(w, h) for w, h, _, _ in grid])
    nearest = np.argmin(anchor_distance(anchors.wh, gwh, "log"), axis=1)
    return AnchorSet(gwh[nearest], anchors.mean_distance, list(anchors.history),
                     grid=[(grid[i][2], grid[i][3]) for i in nearest])


# --------------------------------------------------------------------------
# crop scale
# --------------------------------------------------------------------------

@dataclass
class ScaleDistribution:
    """Empirical distribution of ``long side of box / long side of image``.

    The CDF is tabulated on ``bins`` equal-width bins between the smallest and
    largest observed ratio; the inverse interpolates linearly inside a bin.
    """

    edges: np.ndarray
    cdf: np.ndarray
    stat_min: float
    stat_max: float
    mem_max: float = float("inf")

    def __post_init__(self):
        if np.any(np.diff(self.cdf) < 0) or self.cdf[0] != 0 or abs(self.cdf[-1] - 1) > 1e-12:
            raise ValueError("CDF must be nondecreasing from 0 to 1")
        if not self.stat_min <= self.stat_max:
            raise ValueError("stat_min must not exceed stat_max")
        if self.stat_min > self.upper:
            raise ValueError("stat_min exceeds min(mem_max, stat_max)")

    @property
    def upper(self) -> float:
        return min(self.mem_max, self.stat_max)

    @classmethod
    def from_ratios(cls, ratios, stat_min: Optional[float] = None, stat_max: Optional[float] = None,
                    mem_max: float = float("inf"), bins: int = 1024) -> "ScaleDistribution":
        r = np.asarray(ratios, dtype=np.float64).reshape(-1)
        if len(r) == 0:
            raise ValueError("no ratios")
        lo, hi = float(r.min()), float(r.max())
        if hi == lo:
            edges = np.array([lo, hi])
            cdf = np.array([0.0, 1.0])
        else:
            counts, edges = np.histogram(r, bins=bins, range=(lo, hi))
            cdf = np.concatenate([[0.0], np.cumsum(counts) / len(r)])
            cdf[-1] = 1.0
        return cls(edges, cdf, lo if stat_min is None else stat_min,
                   hi if stat_max is None else stat_max, mem_max)

    @classmethod
    def from_ground_truth(cls, gts: GroundTruthSet, sizes: Optional[Mapping[str, Tuple[float, float]]] = None,
                          **kw) -> "ScaleDistribution":
        return cls.from_ratios(long_side_ratios(gts, sizes), **kw)

    def inverse_cdf(self, u: float) -> float:
        if self.edges[0] == self.edges[-1]:
            return float(self.edges[0])
        u = min(max(float(u), 0.0), 1.0)
        k = int(np.searchsorted(self.cdf, u, side="left"))
        if k == 0:
            return float(self.edges[0])
        lo_c, hi_c = self.cdf[k - 1], self.cdf[k]
        frac = 0.0 if hi_c == lo_c else (u - lo_c) / (hi_c - lo_c)
        return float(self.edges[k - 1] + frac * (self.edges[k] - self.edges[k - 1]))

    def sample(self, u: float) -> float:
        return sample_crop_scale(self, u)


def long_side_ratios(gts: GroundTruthSet, sizes: Optional[Mapping[str, Tuple[float, float]]] = None) -> np.ndarray:
    """``max(w_px, h_px) / max(W, H)`` per box; square images when ``sizes`` is absent."""
    b = gts.boxes
    w, h = b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]
    if sizes is None:
        return np.maximum(w, h)
    dims = np.array([sizes[i] for i in gts.image_ids.tolist()], dtype=np.float64).reshape(-1, 2)
    return np.maximum(w * dims[:, 0], h * dims[:, 1]) / dims.max(axis=1)


def sample_crop_scale(dist: ScaleDistribution, u: float) -> float:
    """Inverse-CDF draw clamped to ``[stat_min, min(mem_max, stat_max)]``."""
    return float(min(max(dist.inverse_cdf(u), dist.stat_min), dist.upper))
