"""Detection and ground-truth containers.

Both sets are stored column-wise (numpy arrays) and are immutable once built.
Grouping indices keyed by ``(image_id, label)`` are computed lazily and cached.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .boxes import BBox

GroupKey = Tuple[str, str]


def _str_array(values) -> np.ndarray:
    arr = np.asarray(list(values) if not isinstance(values, np.ndarray) else values)
    if arr.size == 0:
        return np.array([], dtype="U1")
    if arr.dtype.kind != "U":
        arr = arr.astype(str)
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


def _check_boxes(boxes: np.ndarray, what: str):
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise ValueError(f"{what}: boxes must have shape (N, 4), got {boxes.shape}")
    if not np.all(np.isfinite(boxes)):
        raise ValueError(f"{what}: non-finite box coordinate")
    bad = (
        (boxes[:, 0] < 0) | (boxes[:, 1] < 0) | (boxes[:, 2] > 1) | (boxes[:, 3] > 1)
        | (boxes[:, 0] > boxes[:, 2]) | (boxes[:, 1] > boxes[:, 3])
    )
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"{what}: box {i} {boxes[i].tolist()} violates 0<=min<=max<=1")


def _first_appearance(values: np.ndarray) -> Tuple[str, ...]:
    if values.size == 0:
        return ()
    uniq, first = np.unique(values, return_index=True)
    return tuple(str(u) for u in uniq[np.argsort(first, kind="stable")])


def _group_index(images: np.ndarray, labels: np.ndarray) -> Dict[GroupKey, np.ndarray]:
    if images.size == 0:
        return {}
    order = np.lexsort((labels, images))
    img_s, lab_s = images[order], labels[order]
    change = np.ones(len(order), dtype=bool)
    change[1:] = (img_s[1:] != img_s[:-1]) | (lab_s[1:] != lab_s[:-1])
    starts = np.flatnonzero(change)
    ends = np.append(starts[1:], len(order))
    return {
        (str(img_s[s]), str(lab_s[s])): order[s:e]
        for s, e in zip(starts, ends)
    }


@dataclass(frozen=True)
class Detection:
    image_id: str
    category: str
    score: float
    box: BBox

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: str
    category: str
    box: BBox
    is_group_of: bool = False


@dataclass(frozen=True, eq=False)
class DetectionSet:
    """All detections of one model, stored as parallel columns.

    ``images`` is the corpus roster the set covers; it may include images with
    no detections and defaults to the images in first-appearance order.
    """

    image_ids: np.ndarray
    labels: np.ndarray
    scores: np.ndarray
    boxes: np.ndarray
    source_id: str = ""
    images: Tuple[str, ...] = field(default=None)

    def __post_init__(self):
        image_ids = _str_array(self.image_ids)
        labels = _str_array(self.labels)
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        n = len(scores)
        if not (len(image_ids) == len(labels) == len(boxes) == n):
            raise ValueError("column lengths differ")
        if n and (not np.all(np.isfinite(scores)) or scores.min() < 0 or scores.max() > 1):
            raise ValueError("detection scores must lie in [0, 1]")
        _check_boxes(boxes, f"DetectionSet {self.source_id!r}")
        roster = self.images
        if roster is None:
            roster = _first_appearance(image_ids)
        else:
            roster = tuple(str(r) for r in roster)
            missing = set(np.unique(image_ids).tolist()) - set(roster)
            if missing:
                raise ValueError(f"detections reference images outside the roster: {sorted(missing)[:5]}")
        object.__setattr__(self, "image_ids", _frozen(image_ids))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "scores", _frozen(scores))
        object.__setattr__(self, "boxes", _frozen(boxes))
        object.__setattr__(self, "images", roster)

    @classmethod
    def empty(cls, source_id: str = "", images: Sequence[str] = ()) -> "DetectionSet":
        return cls(np.array([], dtype="U1"), np.array([], dtype="U1"), np.zeros(0), np.zeros((0, 4)),
                   source_id=source_id, images=tuple(images))

    @classmethod
    def from_detections(cls, dets: Iterable[Detection], source_id: str = "",
                        images: Optional[Sequence[str]] = None) -> "DetectionSet":
        dets = list(dets)
        if not dets:
            return cls.empty(source_id, images or ())
        return cls(
            [d.image_id for d in dets],
            [d.category for d in dets],
            [d.score for d in dets],
            [d.box.as_tuple() for d in dets],
            source_id=source_id,
            images=images,
        )

    def __len__(self) -> int:
        return len(self.scores)

    def __getitem__(self, i: int) -> Detection:
        return Detection(str(self.image_ids[i]), str(self.labels[i]), float(self.scores[i]),
                         BBox(*map(float, self.boxes[i])))

    def __iter__(self) -> Iterator[Detection]:
        for i in range(len(self)):
            yield self[i]

    @cached_property
    def groups(self) -> Dict[GroupKey, np.ndarray]:
        """Row indices per ``(image_id, label)``, keys in sorted order."""
        return _group_index(self.image_ids, self.labels)

    @cached_property
    def categories(self) -> Tuple[str, ...]:
        return tuple(sorted(set(self.labels.tolist())))

    def take(self, idx, images: Optional[Sequence[str]] = None) -> "DetectionSet":
        idx = np.asarray(idx, dtype=np.intp)
        return DetectionSet(self.image_ids[idx], self.labels[idx], self.scores[idx], self.boxes[idx],
                            source_id=self.source_id, images=self.images if images is None else images)

    def replace(self, scores=None, boxes=None, source_id=None) -> "DetectionSet":
        return DetectionSet(
            self.image_ids, self.labels,
            self.scores if scores is None else scores,
            self.boxes if boxes is None else boxes,
            source_id=self.source_id if source_id is None else source_id,
            images=self.images,
        )

    def restrict_images(self, images: Iterable[str]) -> "DetectionSet":
        keep = set(images)
        roster = tuple(i for i in self.images if i in keep)
        mask = np.isin(self.image_ids, list(keep)) if len(self) else np.zeros(0, dtype=bool)
        return self.take(np.flatnonzero(mask), images=roster)

    def sorted(self) -> "DetectionSet":
        """Canonical row order: image, label, score descending, then box corners."""
        if not len(self):
            return self
        b = self.boxes
        order = np.lexsort((b[:, 3], b[:, 2], b[:, 1], b[:, 0], -self.scores, self.labels, self.image_ids))
        return self.take(order)

    @staticmethod
    def concat(sets: Sequence["DetectionSet"], source_id: str = "") -> "DetectionSet":
        roster: List[str] = []
        seen = set()
        for s in sets:
            for img in s.images:
                if img not in seen:
                    seen.add(img)
                    roster.append(img)
        nonempty = [s for s in sets if len(s)]
        if not nonempty:
            return DetectionSet.empty(source_id, roster)
        return DetectionSet(
            np.concatenate([s.image_ids for s in nonempty]),
            np.concatenate([s.labels for s in nonempty]),
            np.concatenate([s.scores for s in nonempty]),
            np.concatenate([s.boxes for s in nonempty]),
            source_id=source_id,
            images=roster,
        )


@dataclass(frozen=True, eq=False)
class GroundTruthSet:
    """Annotated boxes plus the roster of annotated images (some may be empty)."""

    image_ids: np.ndarray
    labels: np.ndarray
    boxes: np.ndarray
    is_group_of: np.ndarray
    images: Tuple[str, ...] = field(default=None)

    def __post_init__(self):
        image_ids = _str_array(self.image_ids)
        labels = _str_array(self.labels)
        boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        group = np.asarray(self.is_group_of, dtype=bool).reshape(-1)
        if not (len(image_ids) == len(labels) == len(boxes) == len(group)):
            raise ValueError("column lengths differ")
        _check_boxes(boxes, "GroundTruthSet")
        roster = self.images
        if roster is None:
            roster = _first_appearance(image_ids)
        else:
            roster = tuple(str(r) for r in roster)
            missing = set(np.unique(image_ids).tolist()) - set(roster)
            if missing:
                raise ValueError(f"ground truth references images outside the roster: {sorted(missing)[:5]}")
        object.__setattr__(self, "image_ids", _frozen(image_ids))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "boxes", _frozen(boxes))
        object.__setattr__(self, "is_group_of", _frozen(group))
        object.__setattr__(self, "images", roster)

    @classmethod
    def from_boxes(cls, gts: Iterable[GroundTruthBox], images: Optional[Sequence[str]] = None) -> "GroundTruthSet":
        gts = list(gts)
        if not gts:
            return cls(np.array([], dtype="U1"), np.array([], dtype="U1"), np.zeros((0, 4)),
                       np.zeros(0, dtype=bool), images=tuple(images or ()))
        return cls(
            [g.image_id for g in gts],
            [g.category for g in gts],
            [g.box.as_tuple() for g in gts],
            [g.is_group_of for g in gts],
            images=images,
        )

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> GroundTruthBox:
        return GroundTruthBox(str(self.image_ids[i]), str(self.labels[i]),
                              BBox(*map(float, self.boxes[i])), bool(self.is_group_of[i]))

    def __iter__(self) -> Iterator[GroundTruthBox]:
        for i in range(len(self)):
            yield self[i]

    @cached_property
    def groups(self) -> Dict[GroupKey, np.ndarray]:
        return _group_index(self.image_ids, self.labels)

    @cached_property
    def categories(self) -> Tuple[str, ...]:
        return tuple(sorted(set(self.labels.tolist())))

    @cached_property
    def image_categories(self) -> Dict[str, frozenset]:
        """Per-image set of annotated categories (every roster image present)."""
        out: Dict[str, set] = {img: set() for img in self.images}
        for img, lab in zip(self.image_ids.tolist(), self.labels.tolist()):
            out[img].add(lab)
        return {k: frozenset(v) for k, v in out.items()}

    def take(self, idx, images: Optional[Sequence[str]] = None) -> "GroundTruthSet":
        idx = np.asarray(idx, dtype=np.intp)
        return GroundTruthSet(self.image_ids[idx], self.labels[idx], self.boxes[idx], self.is_group_of[idx],
                              images=self.images if images is None else images)

    def restrict_images(self, images: Iterable[str]) -> "GroundTruthSet":
        keep = set(images)
        roster = tuple(i for i in self.images if i in keep)
        mask = np.isin(self.image_ids, list(keep)) if len(self) else np.zeros(0, dtype=bool)
        return self.take(np.flatnonzero(mask), images=roster)
