"""Readers and writers for detection, annotation and hierarchy files.

Supported formats:

* submission CSV  ``ImageId,PredictionString`` where the prediction string is a
  space-separated repetition of ``Label Score XMin YMin XMax YMax``;
* flat CSV        ``image_id,label,score,x_min,y_min,x_max,y_max``;
* annotation CSV  ``ImageID,LabelName,XMin,XMax,YMin,YMax,IsGroupOf`` (extra
  columns are ignored on read);
* hierarchy       nested JSON records or a two-column ``child,parent`` CSV.

Floats are always written with 6 decimals, so write -> read -> write is
byte-stable.
"""

from __future__ import annotations

import csv
import io as _io
import json
import os
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .data import DetectionSet, GroundTruthSet
from .hierarchy import CategoryHierarchy

PathLike = Union[str, os.PathLike]

SUBMISSION_HEADER = ["ImageId", "PredictionString"]
FLAT_HEADER = ["image_id", "label", "score", "x_min", "y_min", "x_max", "y_max"]
ANNOTATION_HEADER = ["ImageID", "LabelName", "XMin", "XMax", "YMin", "YMax", "IsGroupOf"]
PREDICTION_FIELDS = ["Label", "Score", "XMin", "YMin", "XMax", "YMax"]


class FormatError(ValueError):
    """Malformed input; carries the file, 1-based line number and field name."""

    def __init__(self, message: str, path=None, line: Optional[int] = None, field: Optional[str] = None):
        self.path, self.line, self.field = path, line, field
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


def fmt(x: float) -> str:
    s = f"{x:.6f}"
    return "0.000000" if s == "-0.000000" else s


def _read_text(path: PathLike) -> str:
    with open(path, newline="") as f:
        return f.read()


def _parse_float(token: str, path, line, field) -> float:
    try:
        v = float(token)
    except ValueError:
        raise FormatError(f"not a number: {token!r}", path, line, field) from None
    if not np.isfinite(v):
        raise FormatError(f"non-finite value {token!r}", path, line, field)
    return v


def _check_unit(v: float, clamp: bool, path, line, field) -> float:
    if 0.0 <= v <= 1.0:
        return v
    if clamp:
        return min(max(v, 0.0), 1.0)
    raise FormatError(f"value {v} outside [0, 1]", path, line, field)


def _check_box(box: List[float], path, line):
    if box[0] > box[2]:
        raise FormatError(f"XMin {box[0]} > XMax {box[2]}", path, line, "XMax")
    if box[1] > box[3]:
        raise FormatError(f"YMin {box[1]} > YMax {box[3]}", path, line, "YMax")


def _scale_box(box: List[float], image_id: str, sizes, path, line) -> List[float]:
    if sizes is None:
        return box
    if image_id not in sizes:
        raise FormatError(f"no image size for {image_id!r}", path, line, "ImageId")
    w, h = sizes[image_id]
    return [box[0] / w, box[1] / h, box[2] / w, box[3] / h]


def sniff_detection_format(header: Sequence[str]) -> str:
    cols = [c.strip() for c in header]
    if cols == SUBMISSION_HEADER:
        return "submission"
    if cols == FLAT_HEADER:
        return "flat"
    raise FormatError(f"unrecognised detection header {','.join(cols)!r}", line=1)


def parse_detections(text: str, source_id: str = "", clamp: bool = False,
                     sizes: Optional[Mapping[str, Tuple[float, float]]] = None, path=None) -> DetectionSet:
    """Parse detection CSV text (submission or flat format, chosen by header).

    ``sizes`` maps image id to ``(width, height)`` when coordinates are in pixels.
    """
    reader = csv.reader(_io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("empty file, expected a header", path, 1) from None
    try:
        kind = sniff_detection_format(header)
    except FormatError as e:
        raise FormatError(str(e).split(": ", 1)[-1], path, 1) from None

    images, labels, scores, boxes, roster = [], [], [], [], []
    seen = set()
    for row in reader:
        line = reader.line_num
        if not row or (len(row) == 1 and not row[0].strip() and kind == "flat"):
            continue
        if kind == "submission":
            if len(row) != 2:
                raise FormatError(f"expected 2 columns, got {len(row)}", path, line)
            image_id = row[0].strip()
            if not image_id:
                raise FormatError("empty image id", path, line, "ImageId")
            if image_id not in seen:
                seen.add(image_id)
                roster.append(image_id)
            tokens = row[1].split()
            if len(tokens) % 6:
                raise FormatError(f"{len(tokens)} tokens is not a multiple of 6", path, line, "PredictionString")
            for k in range(0, len(tokens), 6):
                label = tokens[k]
                score = _check_unit(_parse_float(tokens[k + 1], path, line, "Score"), clamp, path, line, "Score")
                box = [_parse_float(tokens[k + 2 + j], path, line, PREDICTION_FIELDS[2 + j]) for j in range(4)]
                box = _scale_box(box, image_id, sizes, path, line)
                box = [_check_unit(v, clamp, path, line, PREDICTION_FIELDS[2 + j]) for j, v in enumerate(box)]
                _check_box(box, path, line)
                images.append(image_id)
                labels.append(label)
                scores.append(score)
                boxes.append(box)
        else:
            if len(row) != 7:
                raise FormatError(f"expected 7 columns, got {len(row)}", path, line)
            image_id, label = row[0].strip(), row[1].strip()
            if not image_id:
                raise FormatError("empty image id", path, line, "image_id")
            if not label:
                raise FormatError("empty label", path, line, "label")
            if image_id not in seen:
                seen.add(image_id)
                roster.append(image_id)
            score = _check_unit(_parse_float(row[2], path, line, "score"), clamp, path, line, "score")
            box = [_parse_float(row[3 + j], path, line, FLAT_HEADER[3 + j]) for j in range(4)]
            box = _scale_box(box, image_id, sizes, path, line)
            box = [_check_unit(v, clamp, path, line, FLAT_HEADER[3 + j]) for j, v in enumerate(box)]
            _check_box(box, path, line)
            images.append(image_id)
            labels.append(label)
            scores.append(score)
            boxes.append(box)
    if not scores:
        return DetectionSet.empty(source_id, roster)
    return DetectionSet(images, labels, scores, boxes, source_id=source_id, images=roster)


def load_detections(path: PathLike, source_id: Optional[str] = None, clamp: bool = False,
                    sizes: Optional[Mapping[str, Tuple[float, float]]] = None) -> DetectionSet:
    if source_id is None:
        source_id = Path(path).stem
    return parse_detections(_read_text(path), source_id=source_id, clamp=clamp, sizes=sizes, path=path)


def _check_label(label: str):
    if not label or any(c.isspace() for c in label) or "," in label:
        raise ValueError(f"label {label!r} cannot be written (empty, whitespace or comma)")


def format_detections(dets: DetectionSet, kind: str = "submission") -> str:
    """Render detections as submission (grouped by roster image) or flat CSV."""
    out = _io.StringIO()
    if kind == "submission":
        out.write(",".join(SUBMISSION_HEADER) + "\n")
        per_image: Dict[str, List[str]] = {img: [] for img in dets.images}
        for img, lab, s, b in zip(dets.image_ids.tolist(), dets.labels.tolist(),
                                  dets.scores.tolist(), dets.boxes.tolist()):
            _check_label(lab)
            per_image[img].append(" ".join([lab, fmt(s)] + [fmt(v) for v in b]))
        for img in dets.images:
            out.write(f"{img},{' '.join(per_image[img])}\n")
    elif kind == "flat":
        out.write(",".join(FLAT_HEADER) + "\n")
        for img, lab, s, b in zip(dets.image_ids.tolist(), dets.labels.tolist(),
                                  dets.scores.tolist(), dets.boxes.tolist()):
            _check_label(lab)
            out.write(",".join([img, lab, fmt(s)] + [fmt(v) for v in b]) + "\n")
    else:
        raise ValueError(f"unknown detection format {kind!r}")
    return out.getvalue()


def save_detections(dets: DetectionSet, path: PathLike, kind: str = "submission"):
    with open(path, "w", newline="") as f:
        f.write(format_detections(dets, kind))


def parse_annotations(text: str, clamp: bool = False, images: Optional[Sequence[str]] = None,
                      sizes: Optional[Mapping[str, Tuple[float, float]]] = None, path=None) -> GroundTruthSet:
    reader = csv.reader(_io.StringIO(text))
    try:
        header = [c.strip() for c in next(reader)]
    except StopIteration:
        raise FormatError("empty file, expected a header", path, 1) from None
    missing = [c for c in ANNOTATION_HEADER if c not in header]
    if missing:
        raise FormatError(f"missing columns {missing}", path, 1)
    col = {c: header.index(c) for c in ANNOTATION_HEADER}

    image_ids, labels, boxes, group = [], [], [], []
    roster: List[str] = []
    seen = set()
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != len(header):
            raise FormatError(f"expected {len(header)} columns, got {len(row)}", path, line)
        image_id, label = row[col["ImageID"]].strip(), row[col["LabelName"]].strip()
        if not image_id:
            raise FormatError("empty image id", path, line, "ImageID")
        if not label:
            raise FormatError("empty label", path, line, "LabelName")
        xmin, xmax, ymin, ymax = (_parse_float(row[col[c]], path, line, c) for c in ("XMin", "XMax", "YMin", "YMax"))
        box = _scale_box([xmin, ymin, xmax, ymax], image_id, sizes, path, line)
        box = [_check_unit(v, clamp, path, line, f) for v, f in zip(box, ("XMin", "YMin", "XMax", "YMax"))]
        _check_box(box, path, line)
        flag = row[col["IsGroupOf"]].strip()
        if flag not in ("0", "1"):
            raise FormatError(f"IsGroupOf must be 0 or 1, got {flag!r}", path, line, "IsGroupOf")
        if image_id not in seen:
            seen.add(image_id)
            roster.append(image_id)
        image_ids.append(image_id)
        labels.append(label)
        boxes.append(box)
        group.append(flag == "1")
    if images is not None:
        given = set(images)
        roster = list(images) + [i for i in roster if i not in given]
    if not labels:
        return GroundTruthSet(np.array([], dtype="U1"), np.array([], dtype="U1"), np.zeros((0, 4)),
                              np.zeros(0, dtype=bool), images=roster)
    return GroundTruthSet(image_ids, labels, boxes, group, images=roster)


def load_annotations(path: PathLike, clamp: bool = False, images: Optional[Sequence[str]] = None,
                     sizes: Optional[Mapping[str, Tuple[float, float]]] = None) -> GroundTruthSet:
    return parse_annotations(_read_text(path), clamp=clamp, images=images, sizes=sizes, path=path)


def format_annotations(gts: GroundTruthSet) -> str:
    out = _io.StringIO()
    out.write(",".join(ANNOTATION_HEADER) + "\n")
    for img, lab, b, g in zip(gts.image_ids.tolist(), gts.labels.tolist(),
                              gts.boxes.tolist(), gts.is_group_of.tolist()):
        _check_label(lab)
        out.write(",".join([img, lab, fmt(b[0]), fmt(b[2]), fmt(b[1]), fmt(b[3]), "1" if g else "0"]) + "\n")
    return out.getvalue()


def save_annotations(gts: GroundTruthSet, path: PathLike):
    with open(path, "w", newline="") as f:
        f.write(format_annotations(gts))


def parse_hierarchy(text: str, path=None, include_root: bool = False) -> CategoryHierarchy:
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise FormatError(f"invalid JSON: {e.msg}", path, e.lineno) from None
        try:
            return CategoryHierarchy.from_nested(doc, include_root=include_root)
        except KeyError as e:
            raise FormatError(f"record without {e.args[0]}", path) from None
    edges = []
    reader = csv.reader(_io.StringIO(text))
    for row in reader:
        line = reader.line_num
        if not row or not "".join(row).strip():
            continue
        if len(row) != 2:
            raise FormatError(f"expected child,parent, got {len(row)} columns", path, line)
        child, parent = row[0].strip(), row[1].strip()
        if line == 1 and (child, parent) == ("child", "parent"):
            continue
        if not child:
            raise FormatError("empty child label", path, line, "child")
        if not parent:
            raise FormatError("empty parent label", path, line, "parent")
        edges.append((child, parent))
    return CategoryHierarchy(edges)


def load_hierarchy(path: PathLike, include_root: bool = False) -> CategoryHierarchy:
    return parse_hierarchy(_read_text(path), path=path, include_root=include_root)


def save_hierarchy(hierarchy: CategoryHierarchy, path: PathLike):
    path = Path(path)
    with open(path, "w", newline="") as f:
        if path.suffix == ".csv":
            f.write("child,parent\n")
            for c, p in hierarchy.edges:
                f.write(f"{c},{p}\n")
        else:
            json.dump(hierarchy.to_nested(), f, indent=1)
            f.write("\n")


def load_image_sizes(path: PathLike) -> Dict[str, Tuple[float, float]]:
    """Sidecar ``image_id,width,height`` used to normalise pixel coordinates."""
    sizes = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = [c.strip() for c in next(reader, [])]
        if header != ["image_id", "width", "height"]:
            raise FormatError("expected header image_id,width,height", path, 1)
        for row in reader:
            if not row:
                continue
            if len(row) != 3:
                raise FormatError(f"expected 3 columns, got {len(row)}", path, reader.line_num)
            w = _parse_float(row[1], path, reader.line_num, "width")
            h = _parse_float(row[2], path, reader.line_num, "height")
            if w <= 0 or h <= 0:
                raise FormatError("image dimensions must be positive", path, reader.line_num)
            sizes[row[0].strip()] = (w, h)
    return sizes


def load_ap_table(path: PathLike) -> Dict[str, Dict[str, float]]:
    """``source,category,ap`` rows -> ``{source: {category: ap}}``."""
    table: Dict[str, Dict[str, float]] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = [c.strip() for c in next(reader, [])]
        if header != ["source", "category", "ap"]:
            raise FormatError("expected header source,category,ap", path, 1)
        for row in reader:
            if not row:
                continue
            if len(row) != 3:
                raise FormatError(f"expected 3 columns, got {len(row)}", path, reader.line_num)
            ap = _parse_float(row[2], path, reader.line_num, "ap")
            table.setdefault(row[0].strip(), {})[row[1].strip()] = ap
    return table
