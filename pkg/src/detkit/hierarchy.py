"""Category hierarchy (child -> parent forest) and parent-class expansion."""

from __future__ import annotations

from functools import cached_property
from typing import Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from .data import DetectionSet, GroundTruthSet


class HierarchyError(ValueError):
    pass


class CategoryHierarchy:
    """Directed child -> parent edges over a label universe.

    A label may have several parents. Cycles are rejected at construction.
    """

    def __init__(self, edges: Iterable[Tuple[str, str]] = (), labels: Iterable[str] = ()):
        parents: Dict[str, list] = {}
        universe = set(labels)
        for child, parent in edges:
            if child == parent:
                raise HierarchyError(f"self-loop on {child!r}")
            universe.update((child, parent))
            ps = parents.setdefault(child, [])
            if parent not in ps:
                ps.append(parent)
        self._parents = {c: tuple(ps) for c, ps in parents.items()}
        self.labels = frozenset(universe)
        self._check_acyclic()

    @property
    def edges(self) -> Tuple[Tuple[str, str], ...]:
        return tuple((c, p) for c in sorted(self._parents) for p in self._parents[c])

    def parents(self, label: str) -> Tuple[str, ...]:
        return self._parents.get(label, ())

    def _check_acyclic(self):
        state: Dict[str, int] = {}
        for start in sorted(self._parents):
            if state.get(start) == 2:
                continue
            stack = [(start, iter(self._parents.get(start, ())))]
            state[start] = 1
            while stack:
                node, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    state[node] = 2
                    stack.pop()
                elif state.get(nxt) == 1:
                    raise HierarchyError(f"cycle through {nxt!r}")
                elif state.get(nxt) is None:
                    state[nxt] = 1
                    stack.append((nxt, iter(self._parents.get(nxt, ()))))

    @cached_property
    def _ancestors(self) -> Dict[str, Tuple[str, ...]]:
        memo: Dict[str, Tuple[str, ...]] = {}

        def visit(label):
            if label in memo:
                return memo[label]
            seen = []
            for p in self._parents.get(label, ()):
                for a in (p,) + visit(p):
                    if a not in seen:
                        seen.append(a)
            memo[label] = tuple(seen)
            return memo[label]

        for label in sorted(self.labels):
            visit(label)
        return memo

    def ancestors(self, label: str) -> Tuple[str, ...]:
        """All ancestors of ``label`` (transitive, excluding the label itself)."""
        if label not in self.labels:
            raise HierarchyError(f"unknown category {label!r}")
        return self._ancestors[label]

    @classmethod
    def from_nested(cls, doc: Mapping, include_root: bool = False,
                    child_keys=("Subcategory", "Part")) -> "CategoryHierarchy":
        """Build from nested ``{"LabelName": ..., "Subcategory": [...]}`` records.

        The top-level record of the OpenImages hierarchy is a synthetic root; it
        is dropped unless ``include_root`` is set.
        """
        edges = []
        labels = set()

        def walk(node, parent):
            name = node["LabelName"]
            labels.add(name)
            if parent is not None:
                edges.append((name, parent))
            for key in child_keys:
                for child in node.get(key, ()) or ():
                    walk(child, name)

        if include_root:
            walk(doc, None)
        else:
            for key in child_keys:
                for child in doc.get(key, ()) or ():
                    walk(child, None)
        return cls(edges, labels)

    def to_nested(self, root: str = "/m/0bl9f") -> dict:
        children: Dict[str, list] = {}
        for c, ps in self._parents.items():
            for p in ps:
                children.setdefault(p, []).append(c)

        def build(label):
            rec = {"LabelName": label}
            kids = sorted(children.get(label, ()))
            if kids:
                rec["Subcategory"] = [build(k) for k in kids]
            return rec

        tops = sorted(lab for lab in self.labels if not self._parents.get(lab))
        return {"LabelName": root, "Subcategory": [build(t) for t in tops]}


def _expand_rows(image_ids: np.ndarray, labels: np.ndarray, boxes: np.ndarray,
                 extra_key: Optional[np.ndarray], hierarchy: CategoryHierarchy):
    """Source row index and label for each expanded row.

    Originals come first in input order. Ancestor copies are appended unless a
    row with the same (image, label, box[, extra]) already exists.
    """
    img_list = image_ids.tolist()
    lab_list = labels.tolist()
    box_list = [tuple(b) for b in boxes.tolist()]
    extra_list = None if extra_key is None else extra_key.tolist()

    def key_of(i, label):
        k = (img_list[i], label, box_list[i])
        return k if extra_list is None else k + (extra_list[i],)

    present = {}
    for i, lab in enumerate(lab_list):
        if lab not in hierarchy.labels:
            raise HierarchyError(f"row {i}: category {lab!r} not in hierarchy")
        present.setdefault(key_of(i, lab), i)

    src, new_labels = list(range(len(lab_list))), list(lab_list)
    added = {}
    for i, lab in enumerate(lab_list):
        for anc in hierarchy.ancestors(lab):
            k = key_of(i, anc)
            if k in present:
                continue
            if k in added:
                added[k].append(i)
                continue
            added[k] = [i]
    return src, new_labels, added


def expand_detections(dets: DetectionSet, hierarchy: CategoryHierarchy) -> DetectionSet:
    """Add one copy of every detection per ancestor category.

    Copies keep the box and score. When several children produce the same
    (image, ancestor, box), a single copy with the highest score is kept, and
    nothing is added if that triple is already present.
    """
    if not len(dets):
        return dets
    src, labels, added = _expand_rows(dets.image_ids, dets.labels, dets.boxes, None, hierarchy)
    for k, rows in added.items():
        best = max(rows, key=lambda r: (dets.scores[r], -r))
        src.append(best)
        labels.append(k[1])
    src = np.asarray(src, dtype=np.intp)
    return DetectionSet(dets.image_ids[src], labels, dets.scores[src], dets.boxes[src],
                        source_id=dets.source_id, images=dets.images)


def expand_ground_truth(gts: GroundTruthSet, hierarchy: CategoryHierarchy) -> GroundTruthSet:
    """Ancestor copies of annotated boxes, keeping the group-of flag."""
    if not len(gts):
        return gts
    src, labels, added = _expand_rows(gts.image_ids, gts.labels, gts.boxes, gts.is_group_of, hierarchy)
    for k, rows in added.items():
        src.append(rows[0])
        labels.append(k[1])
    src = np.asarray(src, dtype=np.intp)
    return GroundTruthSet(gts.image_ids[src], labels, gts.boxes[src], gts.is_group_of[src], images=gts.images)


def expand_hierarchy(obj, hierarchy: CategoryHierarchy):
    if isinstance(obj, GroundTruthSet):
        return expand_ground_truth(obj, hierarchy)
    return expand_detections(obj, hierarchy)
