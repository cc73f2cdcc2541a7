"""``detkit`` command line.

Every subcommand writes its artifacts into ``--out-dir`` together with a
``manifest.json`` describing the run. Options can also come from an INI file
(``--config``): the ``[detkit]`` section holds global options and a section
named after the subcommand holds its options. Command-line flags win.

Exit codes: 0 success, 1 usage error, 2 invalid input, 3 internal invariant
violation.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from . import io as dio
from .autoensemble import SearchConfig, auto_ensemble, execute_plan, plan_from_json, plan_to_json
from .classtools import (ClassifierWeights, ScaleDistribution, build_sampling_plan, kmeans_anchors,
                         long_side_ratios, sample_crop_scale, select_expert_categories, snap_to_grid)
from .data import DetectionSet
from .dhops import RoiSpec, cml_cls, cml_reg, dhpool_cls, dhpool_reg, roi_avg_pool
from .ensemble import VotingConfig, naive_ensemble, pfdet_reweight
from .evaluation import EvalConfig, evaluate
from .hierarchy import HierarchyError, expand_hierarchy
from .nms import NMS_KINDS, NmsConfig, apply_nms
from .rescore import build_cooccurrence, rescore

logger = logging.getLogger("detkit")

THREADS_ENV = "DETKIT_THREADS"
EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_INVARIANT = 0, 1, 2, 3
GLOBAL_DEFAULTS = {"seed": 0, "out_dir": "detkit-out", "config": None, "verbose": False}


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class InvariantError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# run bookkeeping
# --------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    def __init__(self, args):
        self.args = args
        self.out_dir = Path(args.out_dir)
        self.inputs: List[str] = []
        self.artifacts: List[str] = []
        self.started = time.time()

    def input(self, path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise InputError(f"{p}: no such file")
        if str(p) not in self.inputs:
            self.inputs.append(str(p))
        return p

    def path(self, name) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.out_dir / p

    def write(self, name, text: str) -> Path:
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "w", newline="\n") as f:
            f.write(text)
        self.artifacts.append(str(p))
        return p

    def manifest(self, status: str) -> Path:
        params = {k: v for k, v in sorted(vars(self.args).items()) if k not in ("func",)}
        doc = {
            "command": self.args.command,
            "argv": sys.argv[1:],
            "params": json.loads(json.dumps(params, default=str)),
            "seed": self.args.seed,
            "threads": self.args.threads,
            "inputs": [{"path": p, "sha256": sha256_file(p)} for p in self.inputs],
            "artifacts": [{"path": p, "sha256": sha256_file(p)} for p in self.artifacts],
            "versions": {"detkit": __version__, "python": platform.python_version(), "numpy": np.__version__},
            "status": status,
            "wall_time_s": round(time.time() - self.started, 6),
        }
        self.out_dir.mkdir(parents=True, exist_ok=True)
        p = self.out_dir / "manifest.json"
        with open(p, "w", newline="\n") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
        return p


def _need(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, [], "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _load_dets(run: Run, path, args) -> DetectionSet:
    sizes = dio.load_image_sizes(run.input(args.sizes)) if getattr(args, "sizes", None) else None
    return dio.load_detections(run.input(path), clamp=args.clamp, sizes=sizes)


def _load_gts(run: Run, path, args):
    sizes = dio.load_image_sizes(run.input(args.sizes)) if getattr(args, "sizes", None) else None
    return dio.load_annotations(run.input(path), clamp=args.clamp, sizes=sizes)


def _load_hierarchy(run: Run, args):
    if getattr(args, "hierarchy", None):
        return dio.load_hierarchy(run.input(args.hierarchy))
    return None


def _nms_cfg(args) -> NmsConfig:
    try:
        return NmsConfig(args.nms, args.nms_thr, args.sigma, args.score_floor)
    except ValueError as e:
        raise UsageError(str(e)) from None


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_eval(run: Run, args) -> int:
    _need(args, "dets", "gt")
    dets = _load_dets(run, args.dets, args)
    gts = _load_gts(run, args.gt, args)
    h = _load_hierarchy(run, args)
    cfg = EvalConfig(args.iou_thr, args.ioa_thr, not args.no_expand)
    report = evaluate(dets, gts, h, cfg, threads=args.threads)
    if not 0.0 <= report.map <= 1.0:
        raise InvariantError(f"mAP {report.map} outside [0, 1]")
    run.write("report.csv", report.to_csv())
    print(f"mAP {report.map:.6f} over {len(report.per_category_ap)} categories")
    return EXIT_OK


def cmd_nms(run: Run, args) -> int:
    _need(args, "dets")
    dets = _load_dets(run, args.dets, args)
    out = apply_nms(dets, _nms_cfg(args))
    run.write("nms.csv", dio.format_detections(out, args.format))
    print(f"{len(dets)} -> {len(out)} detections ({args.nms})")
    return EXIT_OK


def _load_inputs(run: Run, paths, args) -> Dict[str, DetectionSet]:
    sets = {}
    for p in paths:
        d = _load_dets(run, p, args)
        if d.source_id in sets:
            raise InputError(f"{p}: duplicate source id {d.source_id!r} (file stems must differ)")
        sets[d.source_id] = d
    return sets


def cmd_ensemble(run: Run, args) -> int:
    _need(args, "dets")
    inputs = _load_inputs(run, args.dets, args)
    try:
        vote = VotingConfig(k=args.k, match_iou=args.match_iou)
    except ValueError as e:
        raise UsageError(str(e)) from None
    nms_cfg = _nms_cfg(args)
    if args.plan:
        try:
            plan = plan_from_json(run.input(args.plan).read_text())
        except (ValueError, KeyError, TypeError) as e:
            raise InputError(f"{args.plan}: invalid plan ({e})") from None
        missing = [s for s in plan.leaves if s not in inputs]
        if missing:
            raise InputError(f"{args.plan}: plan leaves without --dets input: {missing}")
        if args.ap_table:
            table = dio.load_ap_table(run.input(args.ap_table))
            w, sets = pfdet_reweight(list(inputs.values()), table)
            inputs = {d.source_id: d for d in sets}
            run.write("class_weights.csv", w.to_csv())
        out = execute_plan(plan, inputs, vote, nms_cfg)
    else:
        reports = dio.load_ap_table(run.input(args.ap_table)) if args.ap_table else None
        if reports is not None:
            w, _ = pfdet_reweight(list(inputs.values()), reports)
            run.write("class_weights.csv", w.to_csv())
        out = naive_ensemble(list(inputs.values()), vote, nms_cfg, reports)
    if len(out) and (out.scores.max() > 1.0 or out.scores.min() < 0.0):
        raise InvariantError("ensemble produced a score outside [0, 1]")
    run.write("ensemble.csv", dio.format_detections(out, args.format))
    print(f"{len(inputs)} inputs -> {len(out)} detections")
    return EXIT_OK


def _float_list(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).replace(",", " ").split())


def cmd_search(run: Run, args) -> int:
    _need(args, "dets", "gt")
    if args.folds != 2:
        raise UsageError("only --folds 2 (fold A for the tree, folds A and B for operators) is supported")
    inputs = _load_inputs(run, args.dets, args)
    gts = _load_gts(run, args.gt, args)
    h = _load_hierarchy(run, args)
    try:
        cfg = SearchConfig(budget=args.budget, seed=args.seed, threads=args.threads,
                           weight_grid=_float_list(args.weight_grid),
                           match_iou_grid=_float_list(args.match_iou_grid),
                           max_passes=args.max_passes)
    except ValueError as e:
        raise UsageError(str(e)) from None
    result = auto_ensemble(inputs, gts, h, cfg)
    summary = result.summary()
    trace = summary["architecture_trace"]
    if any(b < a for a, b in zip(trace, trace[1:])):
        raise InvariantError("architecture fitness trace decreased")
    run.write(args.out, plan_to_json(result.plan))
    run.write("search_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    folds = ["image_id,fold"] + [f"{img},{name}" for name, imgs in result.folds.items() for img in imgs]
    run.write("folds.csv", "\n".join(folds) + "\n")
    print(f"plan over {len(result.plan.leaves)} leaves: fold A mAP {summary['fitness_a']:.6f}, "
          f"fold B mAP {summary['fitness_b']:.6f}")
    return EXIT_OK


def cmd_rescore(run: Run, args) -> int:
    _need(args, "dets", "gt")
    if not 0.0 <= args.lam <= 1.0:
        raise UsageError("--lambda must be in [0, 1]")
    dets = _load_dets(run, args.dets, args)
    model = build_cooccurrence(_load_gts(run, args.gt, args), normalize=args.normalize)
    out = rescore(dets, model, args.lam)
    if len(out) and (np.any(out.scores < dets.scores) or out.scores.max() > 1.0):
        raise InvariantError("rescoring lowered a score or exceeded 1")
    run.write("cooccurrence.csv", model.to_csv())
    run.write("rescored.csv", dio.format_detections(out, args.format))
    print(f"{int(np.sum(out.scores > dets.scores))} of {len(dets)} scores raised (lambda {args.lam})")
    return EXIT_OK


def cmd_expand(run: Run, args) -> int:
    _need(args, "hierarchy")
    if bool(args.dets) == bool(args.gt):
        raise UsageError("give exactly one of --dets or --gt")
    h = _load_hierarchy(run, args)
    if args.dets:
        obj = _load_dets(run, args.dets, args)
        out = expand_hierarchy(obj, h)
        run.write("expanded.csv", dio.format_detections(out, args.format))
    else:
        obj = _load_gts(run, args.gt, args)
        out = expand_hierarchy(obj, h)
        run.write("expanded.csv", dio.format_annotations(out))
    print(f"{len(obj)} -> {len(out)} rows")
    return EXIT_OK


def cmd_sample_plan(run: Run, args) -> int:
    _need(args, "gt")
    gts = _load_gts(run, args.gt, args)
    plan = build_sampling_plan(gts)
    total = sum(plan.image_probability.values())
    if abs(total - 1.0) > 1e-9:
        raise InvariantError(f"sampling probabilities sum to {total}")
    run.write(args.out, plan.to_csv())
    if args.draws:
        draws = plan.draw(args.draws, seed=args.seed)
        run.write("draws.csv", "\n".join(["image_id"] + draws) + "\n")
    print(f"{len(plan.image_probability)} images over {len(plan.class_index)} categories")
    return EXIT_OK


def cmd_expert_classes(run: Run, args) -> int:
    _need(args, "weights", "pos")
    labels = None
    if args.labels:
        labels = [ln.strip() for ln in run.input(args.labels).read_text().splitlines() if ln.strip()]
    try:
        w = ClassifierWeights.from_text(run.input(args.weights).read_text(), labels)
    except ValueError as e:
        raise InputError(f"{args.weights}: {e}") from None
    pos = [c for c in args.pos.split(",") if c]
    gts = _load_gts(run, args.gt, args) if args.gt else None
    try:
        sel = select_expert_categories(pos, w, args.thr, gts)
    except KeyError as e:
        raise InputError(f"{args.weights}: {e.args[0]}") from None
    lines = ["category,role"] + [f"{c},positive" for c in sel.positive] + [f"{c},negative" for c in sel.negative]
    run.write("expert_classes.csv", "\n".join(lines) + "\n")
    msg = f"{len(sel.positive)} positive, {len(sel.negative)} negative categories"
    if gts is not None:
        msg += (f"; images {len(sel.positive_images)}:{len(sel.negative_images)} "
                f"(1:{sel.negative_per_positive:.2f}, target about 1:3)")
    print(msg)
    return EXIT_OK


def cmd_anchors(run: Run, args) -> int:
    _need(args, "gt")
    gts = _load_gts(run, args.gt, args)
    b = gts.boxes
    wh = np.stack([b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]], axis=1)
    if args.image_sizes:
        sizes = dio.load_image_sizes(run.input(args.image_sizes))
        try:
            dims = np.array([sizes[i] for i in gts.image_ids.tolist()], dtype=np.float64).reshape(-1, 2)
        except KeyError as e:
            raise InputError(f"{args.image_sizes}: no size for image {e.args[0]!r}") from None
        wh = wh * dims
    wh = wh[(wh > 0).all(axis=1)]
    if args.k > len(wh):
        raise InputError(f"{args.gt}: {len(wh)} non-degenerate boxes, fewer than --k {args.k}")
    anchors = kmeans_anchors(wh, args.k, metric=args.metric, seed=args.seed)
    if any(b > a + 1e-12 for a, b in zip(anchors.history, anchors.history[1:])):
        raise InvariantError("k-means objective increased")
    if args.snap_base:
        anchors = snap_to_grid(anchors, args.snap_base)
    run.write("anchors.csv", anchors.to_csv())
    print(f"{args.k} anchors, mean distance {anchors.mean_distance:.6f} ({args.metric})")
    return EXIT_OK


def cmd_crop_scale(run: Run, args) -> int:
    _need(args, "gt")
    gts = _load_gts(run, args.gt, args)
    sizes = dio.load_image_sizes(run.input(args.image_sizes)) if args.image_sizes else None
    try:
        ratios = long_side_ratios(gts, sizes)
    except KeyError as e:
        raise InputError(f"{args.image_sizes}: no size for image {e.args[0]!r}") from None
    try:
        dist = ScaleDistribution.from_ratios(ratios, args.min, args.max,
                                             args.mem_max if args.mem_max is not None else float("inf"))
    except ValueError as e:
        raise UsageError(str(e)) from None
    rng = np.random.default_rng(args.seed)
    draws = [sample_crop_scale(dist, u) for u in rng.random(args.n)]
    if any(not dist.stat_min <= s <= dist.upper for s in draws):
        raise InvariantError("crop scale outside the clamp interval")
    run.write("crop_scales.csv", "\n".join(["scale"] + [dio.fmt(s) for s in draws]) + "\n")
    print(f"{args.n} scales in [{dist.stat_min:.6f}, {dist.upper:.6f}]")
    return EXIT_OK


def _read_matrix(run: Run, path, what) -> np.ndarray:
    try:
        return np.loadtxt(run.input(path), dtype=np.float64, ndmin=2)
    except ValueError as e:
        raise InputError(f"{path}: cannot read {what} ({e})") from None


def cmd_dh_demo(run: Run, args) -> int:
    _need(args, "grid", "roi")
    H, W, C = args.grid
    if min(H, W, C) < 1:
        raise UsageError("--grid H W CH must be positive")
    if args.grid_file:
        flat = _read_matrix(run, args.grid_file, "feature grid")
        if flat.size != H * W * C:
            raise InputError(f"{args.grid_file}: {flat.size} values, expected {H}x{W}x{C}")
        X = flat.reshape(H, W, C)
    else:
        X = np.random.default_rng(args.seed).normal(size=(H, W, C))
    k = args.bins
    try:
        roi = RoiSpec(*args.roi, k=k)
        roi.check_inside(X.shape)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if args.offset_file:
        off = _read_matrix(run, args.offset_file, "offsets")
        if off.shape != (k * k, 2):
            raise InputError(f"{args.offset_file}: expected {k * k} rows of 'dx dy', got shape {off.shape}")
        off = off.reshape(k, k, 2)
    else:
        off = np.zeros((k, k, 2))
    if not np.all(np.isfinite(off)):
        raise InputError(f"{args.offset_file}: non-finite offset")
    reg = np.asarray(args.reg_offset, dtype=np.float64)
    cls_out = dhpool_cls(X, roi, off, args.sampling)
    reg_out = dhpool_reg(X, roi, reg, args.sampling)
    avg = roi_avg_pool(X, roi, args.sampling)
    if np.any(np.abs(dhpool_cls(X, roi, np.zeros_like(off), args.sampling) - avg) > 1e-9):
        raise InvariantError("zero-offset pooling differs from average pooling")
    lines = ["i,j,channel,cls,reg,avg"]
    for i in range(k):
        for j in range(k):
            for c in range(C):
                lines.append(f"{i},{j},{c},{cls_out[i, j, c]:.9f},{reg_out[i, j, c]:.9f},{avg[i, j, c]:.9f}")
    run.write("dh_pooled.csv", "\n".join(lines) + "\n")
    np.set_printoptions(precision=6, suppress=True)
    print("classification pooling (per-bin offsets):")
    print(np.moveaxis(cls_out, 2, 0))
    print("regression pooling (global offset):")
    print(np.moveaxis(reg_out, 2, 0))
    s_o, s = args.scores
    i_o, i = args.ious
    lc, lr = cml_cls(s_o, s, args.m_c), cml_reg(i_o, i, args.m_r)
    print(f"CML cls max(0, {s_o} - {s} + {args.m_c}) = {lc:.6f}")
    print(f"CML reg max(0, {i_o} - {i} + {args.m_r}) = {lr:.6f}")
    run.write("cml.csv", f"loss,value\ncls,{lc:.9f}\nreg,{lr:.9f}\n")
    return EXIT_OK


def cmd_validate(run: Run, args) -> int:
    if not (args.dets or args.gt or args.hierarchy):
        raise UsageError("give at least one of --dets, --gt, --hierarchy")
    summary, problems = {}, []
    for p in args.dets or []:
        d = _load_dets(run, p, args)
        w, h = d.boxes[:, 2] - d.boxes[:, 0], d.boxes[:, 3] - d.boxes[:, 1]
        degenerate = int(np.sum((w <= 0) | (h <= 0)))
        summary[p] = {"detections": len(d), "images": len(d.images), "categories": len(d.categories),
                      "degenerate_boxes": degenerate}
        if degenerate:
            problems.append(f"{p}: {degenerate} degenerate boxes")
    if args.gt:
        g = _load_gts(run, args.gt, args)
        w, h = g.boxes[:, 2] - g.boxes[:, 0], g.boxes[:, 3] - g.boxes[:, 1]
        degenerate = int(np.sum((w <= 0) | (h <= 0)))
        summary[args.gt] = {"boxes": len(g), "images": len(g.images), "categories": len(g.categories),
                            "group_of": int(g.is_group_of.sum()), "degenerate_boxes": degenerate}
        if degenerate:
            problems.append(f"{args.gt}: {degenerate} degenerate boxes")
    if args.hierarchy:
        hier = _load_hierarchy(run, args)
        summary[args.hierarchy] = {"labels": len(hier.labels), "edges": len(hier.edges)}
        if args.gt:
            unknown = sorted(set(g.categories) - hier.labels)
            if unknown:
                problems.append(f"{args.gt}: {len(unknown)} categories missing from hierarchy, e.g. {unknown[:3]}")
    run.write("validate.json", json.dumps({"summary": summary, "problems": problems}, indent=2, sort_keys=True) + "\n")
    for path, counts in summary.items():
        print(f"{path}: " + ", ".join(f"{k} {v}" for k, v in counts.items()))
    for msg in problems:
        print(f"problem: {msg}", file=sys.stderr)
    return EXIT_INPUT if problems and not args.allow_degenerate else EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _global_options(p):
    d = argparse.SUPPRESS
    p.add_argument("--config", default=d, help="INI file with [detkit] and per-subcommand sections")
    p.add_argument("--seed", type=int, default=d, help="global random seed (default 0)")
    p.add_argument("--threads", type=int, default=d, help=f"worker threads (default ${THREADS_ENV} or 1)")
    p.add_argument("--out-dir", default=d, help="directory for artifacts and manifest (default detkit-out)")
    p.add_argument("-v", "--verbose", action="store_true", default=d)


def _io_options(p):
    p.add_argument("--clamp", action="store_true", help="clamp out-of-range coordinates instead of failing")
    p.add_argument("--sizes", help="image_id,width,height sidecar for pixel-space inputs")
    p.add_argument("--format", choices=("submission", "flat"), default="submission", help="detection output format")


def _nms_options(p, default="adj"):
    p.add_argument("--nms", choices=NMS_KINDS, default=default)
    p.add_argument("--nms-thr", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--score-floor", type=float, default=1e-5)


def build_parser() -> Parser:
    parser = Parser(prog="detkit", description="Detection post-processing, evaluation and ensembling toolkit.")
    parser.add_argument("--version", action="version", version=f"detkit {__version__}")
    _global_options(parser)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        _global_options(p)
        p.set_defaults(func=func)
        return p

    p = add("eval", cmd_eval, "AP@0.5 per category and mAP")
    p.add_argument("--dets")
    p.add_argument("--gt")
    p.add_argument("--hierarchy")
    p.add_argument("--no-expand", action="store_true", help="skip hierarchy expansion")
    p.add_argument("--iou-thr", type=float, default=0.5)
    p.add_argument("--ioa-thr", type=float, default=0.5)
    _io_options(p)

    p = add("nms", cmd_nms, "per-(image, category) NMS")
    p.add_argument("--dets")
    _nms_options(p)
    _io_options(p)

    p = add("ensemble", cmd_ensemble, "merge several detection files by voting, or replay a searched plan")
    p.add_argument("--dets", nargs="+")
    p.add_argument("--ap-table", help="source,category,ap table for per-class reweighting")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--match-iou", type=float, default=0.5)
    p.add_argument("--plan", help="plan.json from the search command")
    _nms_options(p)
    _io_options(p)

    p = add("search", cmd_search, "search an ensemble plan on mined validation folds")
    p.add_argument("--dets", nargs="+")
    p.add_argument("--gt")
    p.add_argument("--hierarchy")
    p.add_argument("--folds", type=int, default=2)
    p.add_argument("--budget", type=int, default=50, help="operator evaluations per merge node")
    p.add_argument("--max-passes", type=int, default=3)
    p.add_argument("--weight-grid", default="0.25,0.5,0.75,1.0,1.25,1.5")
    p.add_argument("--match-iou-grid", default="0.4,0.5,0.6")
    p.add_argument("--out", default="plan.json")
    _io_options(p)

    p = add("rescore", cmd_rescore, "raise scores with category co-occurrence statistics")
    p.add_argument("--dets")
    p.add_argument("--gt")
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--normalize", choices=("i", "j"), default="i", help="denominator C_i (default) or C_j")
    _io_options(p)

    p = add("expand", cmd_expand, "add parent-category copies of detections or annotations")
    p.add_argument("--dets")
    p.add_argument("--gt")
    p.add_argument("--hierarchy")
    _io_options(p)

    p = add("sample-plan", cmd_sample_plan, "class-aware image sampling probabilities")
    p.add_argument("--gt")
    p.add_argument("--out", default="plan.csv")
    p.add_argument("--draws", type=int, default=0, help="also write this many seeded draws")
    _io_options(p)

    p = add("expert-classes", cmd_expert_classes, "negative categories for an expert model")
    p.add_argument("--weights", help="classifier weight rows, optionally prefixed by a label")
    p.add_argument("--labels", help="one label per weight row")
    p.add_argument("--pos", help="comma-separated positive categories")
    p.add_argument("--thr", type=float, default=0.25)
    p.add_argument("--gt", help="annotations for image subset sizes")
    _io_options(p)

    p = add("anchors", cmd_anchors, "k-means anchor shapes")
    p.add_argument("--gt")
    p.add_argument("--k", type=int, default=18)
    p.add_argument("--metric", choices=("iou", "log"), default="iou")
    p.add_argument("--image-sizes", help="image_id,width,height; cluster in pixels instead of normalised units")
    p.add_argument("--snap-base", type=float, help="snap centers to the scale x ratio grid with this base size")
    _io_options(p)

    p = add("crop-scale", cmd_crop_scale, "sample crop scales from the box-size distribution")
    p.add_argument("--gt")
    p.add_argument("--min", type=float)
    p.add_argument("--max", type=float)
    p.add_argument("--mem-max", type=float)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--image-sizes")
    _io_options(p)

    p = add("dh-demo", cmd_dh_demo, "offset-shifted RoI pooling and margin losses on a toy grid")
    p.add_argument("--grid", nargs=3, type=int, metavar=("H", "W", "CH"))
    p.add_argument("--grid-file", help="H*W rows of CH values (row-major)")
    p.add_argument("--roi", nargs=4, type=float, metavar=("X", "Y", "W", "H"))
    p.add_argument("--bins", type=int, default=2)
    p.add_argument("--offset-file", help="k*k rows of 'dx dy' for the per-bin offsets")
    p.add_argument("--reg-offset", nargs=2, type=float, default=[0.0, 0.0], metavar=("DX", "DY"))
    p.add_argument("--sampling", choices=("lattice", "align"), default="lattice")
    p.add_argument("--scores", nargs=2, type=float, default=[0.5, 0.55], metavar=("S_O", "S"))
    p.add_argument("--ious", nargs=2, type=float, default=[0.6, 0.9], metavar=("IOU_O", "IOU"))
    p.add_argument("--m-c", type=float, default=0.2)
    p.add_argument("--m-r", type=float, default=0.2)

    p = add("validate", cmd_validate, "check input files and print summary counts")
    p.add_argument("--dets", nargs="+")
    p.add_argument("--gt")
    p.add_argument("--hierarchy")
    p.add_argument("--allow-degenerate", action="store_true")
    _io_options(p)
    return parser


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def _subparser(parser: Parser, name: str) -> Optional[Parser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices.get(name)
    return None


def _convert(action: argparse.Action, raw: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        v = raw.strip().lower()
        if v not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise UsageError(f"config: {action.dest} expects a boolean, got {raw!r}")
        return v in ("1", "true", "yes", "on")
    conv = action.type or str
    if action.nargs in ("+", "*") or isinstance(action.nargs, int):
        return [conv(t) for t in raw.split()]
    return conv(raw.strip())


def _read_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    if not Path(path).is_file():
        raise InputError(f"{path}: no such config file")
    try:
        cp.read(path)
    except configparser.Error as e:
        raise InputError(f"{path}: {e}") from None
    return cp


def _apply_config(parser: Parser, argv: Sequence[str]) -> Dict[str, str]:
    """Load ``--config`` (if any) into subparser defaults; returns the [detkit] section."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return {}
    cp = _read_config(known.config)
    command = next((a for a in argv if not a.startswith("-") and _subparser(parser, a) is not None), None)
    if command and cp.has_section(command):
        sp = _subparser(parser, command)
        by_dest = {a.dest: a for a in sp._actions}
        defaults = {}
        for key, raw in cp.items(command):
            dest = "lam" if key == "lambda" else key.replace("-", "_")
            if dest not in by_dest:
                raise UsageError(f"{known.config}: unknown option {key!r} in [{command}]")
            try:
                defaults[dest] = _convert(by_dest[dest], raw)
            except ValueError as e:
                raise UsageError(f"{known.config}: [{command}] {key}: {e}") from None
        sp.set_defaults(**defaults)
    return dict(cp.items("detkit")) if cp.has_section("detkit") else {}


def _resolve_globals(args, file_globals: Dict[str, str]):
    for key in ("seed", "out_dir", "config", "verbose"):
        if not hasattr(args, key):
            raw = file_globals.get(key, file_globals.get(key.replace("_", "-")))
            if raw is None:
                value = GLOBAL_DEFAULTS[key]
            elif key == "seed":
                value = int(raw)
            elif key == "verbose":
                value = raw.strip().lower() in ("1", "true", "yes", "on")
            else:
                value = raw
            setattr(args, key, value)
    if not hasattr(args, "threads"):
        raw = file_globals.get("threads") or os.environ.get(THREADS_ENV) or "1"
        try:
            args.threads = int(raw)
        except ValueError:
            raise UsageError(f"threads must be an integer, got {raw!r}") from None
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        file_globals = _apply_config(parser, argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"detkit: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as e:
        print(f"detkit: error: {e}", file=sys.stderr)
        return EXIT_INPUT
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        print("detkit: error: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        _resolve_globals(args, file_globals)
    except (UsageError, ValueError) as e:
        print(f"detkit: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = Run(args)
    status, code = "ok", EXIT_OK
    try:
        code = args.func(run, args)
        if code != EXIT_OK:
            status = "failed"
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"detkit {args.command}: error: {e}", file=sys.stderr)
        status, code = "usage error", EXIT_USAGE
    except (InputError, dio.FormatError, HierarchyError, ValueError, OSError, KeyError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"detkit {args.command}: invalid input: {msg}", file=sys.stderr)
        status, code = "invalid input", EXIT_INPUT
    except InvariantError as e:
        print(f"detkit {args.command}: invariant violated: {e}", file=sys.stderr)
        status, code = "invariant violation", EXIT_INVARIANT
    except Exception as e:  # pragma: no cover - defensive
        logger.exception("unexpected failure")
        print(f"detkit {args.command}: internal error: {e}", file=sys.stderr)
        status, code = "internal error", EXIT_INVARIANT
    run.manifest(status)
    return code


if __name__ == "__main__":
    sys.exit(main())
