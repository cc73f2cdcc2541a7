"""Search over binary ensemble plans.

A plan is a binary tree: leaves name detection sets, internal nodes merge
their two children with a :class:`MergeParams` operator. Search runs in two
stages: greedy pairwise agglomeration with default operators, then
coordinate descent over each merge node's operator on the fixed tree.
"""

from __future__ import annotations

import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .boxes import iou_matrix
from .data import DetectionSet, GroundTruthSet
from .ensemble import VotingConfig, vote_pool
from .evaluation import EvalConfig, evaluate
from .hierarchy import CategoryHierarchy
from .nms import NMS_KINDS, NmsConfig

logger = logging.getLogger(__name__)

SOURCES = ("both", "left_only", "right_only")
DEFAULT_WEIGHT_GRID = (0.25, 0.5, 0.75, 1.0, 1.25, 1.5)
DEFAULT_MATCH_IOU_GRID = (0.4, 0.5, 0.6)


@dataclass(frozen=True)
class MergeParams:
    """Operator of a merge node.

    ``box_source``/``score_source`` implement element dropout: a child outside
    ``box_source`` contributes scores only, a child outside ``score_source``
    contributes boxes only (its scores earn no voting bonus).
    """

    score_weight_left: float = 1.0
    score_weight_right: float = 1.0
    box_source: str = "both"
    score_source: str = "both"
    nms_kind: str = "adj"
    match_iou: float = 0.5

    def __post_init__(self):
        for w in (self.score_weight_left, self.score_weight_right):
            if not 0.0 <= w <= 2.0:
                raise ValueError(f"score weight {w} outside [0, 2]")
        if self.box_source not in SOURCES or self.score_source not in SOURCES:
            raise ValueError("box_source/score_source must be one of " + ", ".join(SOURCES))
        if self.box_source != "both" and self.box_source == self.score_source:
            raise ValueError("element dropout would ignore a child entirely")
        if self.nms_kind not in NMS_KINDS:
            raise ValueError(f"unknown NMS kind {self.nms_kind!r}")
        if not 0.0 <= self.match_iou <= 1.0:
            raise ValueError("match_iou must be in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "score_weight_left": self.score_weight_left,
            "score_weight_right": self.score_weight_right,
            "box_source": self.box_source,
            "score_source": self.score_source,
            "nms_kind": self.nms_kind,
            "match_iou": self.match_iou,
        }


@dataclass(frozen=True)
class Leaf:
    source_id: str

    @property
    def leaves(self) -> Tuple[str, ...]:
        return (self.source_id,)


@dataclass(frozen=True)
class Merge:
    left: "EnsemblePlan"
    right: "EnsemblePlan"
    params: MergeParams = MergeParams()

    def __post_init__(self):
        dup = set(self.left.leaves) & set(self.right.leaves)
        if dup:
            raise ValueError(f"source(s) {sorted(dup)} used by both children")

    @property
    def leaves(self) -> Tuple[str, ...]:
        return self.left.leaves + self.right.leaves


EnsemblePlan = Union[Leaf, Merge]


def plan_to_dict(plan: EnsemblePlan) -> dict:
    if isinstance(plan, Leaf):
        return {"leaf": plan.source_id}
    return {"merge": {"left": plan_to_dict(plan.left), "right": plan_to_dict(plan.right),
                      "params": plan.params.to_dict()}}


def plan_from_dict(doc: Mapping) -> EnsemblePlan:
    if "leaf" in doc:
        return Leaf(str(doc["leaf"]))
    m = doc["merge"]
    return Merge(plan_from_dict(m["left"]), plan_from_dict(m["right"]), MergeParams(**m.get("params", {})))


def plan_to_json(plan: EnsemblePlan) -> str:
    return json.dumps(plan_to_dict(plan), indent=2, sort_keys=True) + "\n"


def plan_from_json(text: str) -> EnsemblePlan:
    return plan_from_dict(json.loads(text))


def plan_key(plan: EnsemblePlan) -> str:
    """Compact canonical string; used for deterministic tie-breaking."""
    return json.dumps(plan_to_dict(plan), sort_keys=True, separators=(",", ":"))


def leaf_depths(plan: EnsemblePlan, depth: int = 0) -> Dict[str, int]:
    if isinstance(plan, Leaf):
        return {plan.source_id: depth}
    out = leaf_depths(plan.left, depth + 1)
    out.update(leaf_depths(plan.right, depth + 1))
    return out


def _scale(dets: DetectionSet, w: float) -> DetectionSet:
    if w == 1.0 or not len(dets):
        return dets
    return dets.replace(scores=np.minimum(dets.scores * w, 1.0))


def _relocate(score_only: DetectionSet, partner: DetectionSet, match_iou: float) -> DetectionSet:
    """Give each score-only detection the box of its best-IoU partner box.

    Detections with no partner at ``match_iou`` or above are dropped.
    """
    if not len(score_only):
        return score_only
    rows, boxes = [], []
    for key, idx in score_only.groups.items():
        pidx = partner.groups.get(key)
        if pidx is None:
            continue
        ious = iou_matrix(score_only.boxes[idx], partner.boxes[pidx])
        best = np.argmax(ious, axis=1)
        ok = ious[np.arange(len(idx)), best] >= match_iou
        rows.append(idx[ok])
        boxes.append(partner.boxes[pidx[best[ok]]])
    if not rows:
        return score_only.take(np.zeros(0, dtype=np.intp))
    rows = np.concatenate(rows)
    return score_only.take(rows).replace(boxes=np.concatenate(boxes).reshape(-1, 4))


def merge_sets(left: DetectionSet, right: DetectionSet, params: MergeParams,
               vote_cfg: VotingConfig = VotingConfig(), nms_cfg: NmsConfig = NmsConfig(),
               source_id: str = "merge") -> DetectionSet:
    """Apply one merge operator to two child detection sets."""
    left = _scale(left, params.score_weight_left)
    right = _scale(right, params.score_weight_right)
    if params.box_source == "left_only":
        right = _relocate(right, left, params.match_iou)
    elif params.box_source == "right_only":
        left = _relocate(left, right, params.match_iou)
    pool = DetectionSet.concat([left, right])
    sources = np.concatenate([np.zeros(len(left), dtype=np.int8), np.ones(len(right), dtype=np.int8)])
    bonus = np.ones(len(pool), dtype=bool)
    if params.score_source == "left_only":
        bonus[len(left):] = False
    elif params.score_source == "right_only":
        bonus[:len(left)] = False
    vcfg = replace(vote_cfg, match_iou=params.match_iou)
    ncfg = replace(nms_cfg, kind=params.nms_kind)
    return vote_pool(pool, sources, vcfg, ncfg, bonus_mask=bonus, source_id=source_id)


class PlanExecutor:
    """Evaluates plans bottom-up over fixed inputs, caching every subtree."""

    def __init__(self, inputs: Mapping[str, DetectionSet], vote_cfg: VotingConfig = VotingConfig(),
                 nms_cfg: NmsConfig = NmsConfig()):
        self.inputs = dict(inputs)
        self.vote_cfg = vote_cfg
        self.nms_cfg = nms_cfg
        self._cache: Dict[EnsemblePlan, DetectionSet] = {}

    def __call__(self, plan: EnsemblePlan) -> DetectionSet:
        hit = self._cache.get(plan)
        if hit is not None:
            return hit
        if isinstance(plan, Leaf):
            if plan.source_id not in self.inputs:
                raise KeyError(f"plan leaf {plan.source_id!r} has no input detection set")
            out = self.inputs[plan.source_id]
        else:
            out = merge_sets(self(plan.left), self(plan.right), plan.params, self.vote_cfg, self.nms_cfg,
                             source_id="+".join(plan.leaves))
        self._cache[plan] = out
        return out


def execute_plan(plan: EnsemblePlan, inputs: Mapping[str, DetectionSet],
                 vote_cfg: VotingConfig = VotingConfig(), nms_cfg: NmsConfig = NmsConfig()) -> DetectionSet:
    return PlanExecutor(inputs, vote_cfg, nms_cfg)(plan)


@dataclass(frozen=True)
class SearchConfig:
    fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    budget: int = 50
    weight_grid: Tuple[float, ...] = DEFAULT_WEIGHT_GRID
    match_iou_grid: Tuple[float, ...] = DEFAULT_MATCH_IOU_GRID
    nms_kinds: Tuple[str, ...] = NMS_KINDS
    source_options: Tuple[str, ...] = SOURCES
    max_passes: int = 3
    seed: int = 0
    threads: int = 1
    eval_cfg: EvalConfig = EvalConfig()
    vote_cfg: VotingConfig = VotingConfig()
    nms_cfg: NmsConfig = NmsConfig()

    def __post_init__(self):
        if len(self.fractions) != 3 or min(self.fractions) < 0 or abs(sum(self.fractions) - 1) > 1e-9:
            raise ValueError("fractions must be three nonnegative numbers summing to 1")
        if self.budget < 0:
            raise ValueError("budget must be >= 0")
        if not set(self.source_options) <= set(SOURCES):
            raise ValueError("source_options must be drawn from " + ", ".join(SOURCES))


class Fitness:
    """mAP of a plan on one validation fold, cached per plan."""

    def __init__(self, inputs: Mapping[str, DetectionSet], gts: GroundTruthSet,
                 hierarchy: Optional[CategoryHierarchy] = None, cfg: SearchConfig = SearchConfig()):
        images = set(gts.images)
        self.gts = gts
        self.hierarchy = hierarchy
        self.eval_cfg = cfg.eval_cfg
        self.executor = PlanExecutor({k: v.restrict_images(images) for k, v in inputs.items()},
                                     cfg.vote_cfg, cfg.nms_cfg)
        self._cache: Dict[EnsemblePlan, float] = {}
        self.evaluations = 0

    def __call__(self, plan: EnsemblePlan) -> float:
        hit = self._cache.get(plan)
        if hit is not None:
            return hit
        self.evaluations += 1
        value = evaluate(self.executor(plan), self.gts, self.hierarchy, self.eval_cfg).map
        self._cache[plan] = value
        return value


def _map_ordered(fn: Callable, items: Sequence, threads: int) -> List:
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


@dataclass
class ArchitectureResult:
    plan: EnsemblePlan
    fitness: float
    trace: List[float] = field(default_factory=list)
    leaf_fitness: Dict[str, float] = field(default_factory=dict)


def search_architecture(leaves: Sequence[str], fitness: Callable[[EnsemblePlan], float],
                        threads: int = 1) -> ArchitectureResult:
    """Greedy agglomeration of plans with default (equal-contribution) operators.

    At every step the pair whose merge scores best is fused. The best plan
    seen at any step, singletons included, is returned; ``trace`` records the
    best fitness so far after each step and is therefore non-decreasing.
    """
    if not leaves:
        raise ValueError("need at least one leaf")
    if len(set(leaves)) != len(leaves):
        raise ValueError("duplicate leaf ids")
    pool: List[EnsemblePlan] = [Leaf(s) for s in sorted(leaves)]
    scores = _map_ordered(fitness, pool, threads)
    leaf_fitness = {p.source_id: s for p, s in zip(pool, scores)}
    best_plan, best = max(zip(pool, scores), key=lambda ps: (ps[1], _neg_key(ps[0])))
    trace = [best]
    while len(pool) > 1:
        pairs = list(itertools.combinations(range(len(pool)), 2))
        cands = [Merge(pool[i], pool[j]) for i, j in pairs]
        cand_scores = _map_ordered(fitness, cands, threads)
        k = max(range(len(cands)), key=lambda n: (cand_scores[n], _neg_key(cands[n])))
        i, j = pairs[k]
        pool = [p for n, p in enumerate(pool) if n not in (i, j)] + [cands[k]]
        if cand_scores[k] > best:
            best_plan, best = cands[k], cand_scores[k]
        trace.append(best)
        logger.debug("architecture step: merged %s (%.6f), best %.6f", cands[k].leaves, cand_scores[k], best)
    return ArchitectureResult(best_plan, best, trace, leaf_fitness)


class _Neg:
    """Reverses string order so that ``max`` picks the lexicographically smallest key."""

    __slots__ = ("s",)

    def __init__(self, s):
        self.s = s

    def __lt__(self, other):
        return self.s > other.s

    def __gt__(self, other):
        return self.s < other.s

    def __eq__(self, other):
        return self.s == other.s


def _neg_key(plan: EnsemblePlan) -> _Neg:
    return _Neg(plan_key(plan))


def _merge_paths(plan: EnsemblePlan, path: Tuple[str, ...] = ()) -> List[Tuple[str, ...]]:
    """Post-order (bottom-up) paths of merge nodes."""
    if isinstance(plan, Leaf):
        return []
    return _merge_paths(plan.left, path + ("L",)) + _merge_paths(plan.right, path + ("R",)) + [path]


def _node_at(plan: EnsemblePlan, path) -> Merge:
    for step in path:
        plan = plan.left if step == "L" else plan.right
    return plan


def _with_params(plan: EnsemblePlan, path, params: MergeParams) -> EnsemblePlan:
    if not path:
        return Merge(plan.left, plan.right, params)
    if path[0] == "L":
        return Merge(_with_params(plan.left, path[1:], params), plan.right, plan.params)
    return Merge(plan.left, _with_params(plan.right, path[1:], params), plan.params)


def _coordinate_candidates(p: MergeParams, cfg: SearchConfig) -> List[List[MergeParams]]:
    dims = [
        [replace(p, score_weight_left=w) for w in cfg.weight_grid],
        [replace(p, score_weight_right=w) for w in cfg.weight_grid],
    ]
    box, score = [], []
    for s in cfg.source_options:
        # combinations that would drop a child entirely are skipped
        try:
            box.append(replace(p, box_source=s))
        except ValueError:
            pass
        try:
            score.append(replace(p, score_source=s))
        except ValueError:
            pass
    dims += [box, score,
             [replace(p, nms_kind=k) for k in cfg.nms_kinds],
             [replace(p, match_iou=m) for m in cfg.match_iou_grid]]
    return [[c for c in dim if c != p] for dim in dims]


@dataclass
class OperatorResult:
    plan: EnsemblePlan
    fitness: float
    fitness_a: float
    fitness_b: float
    initial_fitness_a: float
    initial_fitness_b: float
    evaluations: Dict[Tuple[str, ...], int] = field(default_factory=dict)


def search_operators(plan: EnsemblePlan, fitness_a: Callable, fitness_b: Callable,
                     cfg: SearchConfig = SearchConfig()) -> OperatorResult:
    """Coordinate descent over merge operators, bottom-up, on a fixed tree.

    Fitness is the mean mAP over folds A and B. Each node may spend at most
    ``cfg.budget`` candidate evaluations; a candidate replaces the current
    operator only when strictly better, so fitness never decreases.
    """
    def mean_fit(p):
        return 0.5 * (fitness_a(p) + fitness_b(p))

    init_a, init_b = fitness_a(plan), fitness_b(plan)
    current, best = plan, 0.5 * (init_a + init_b)
    paths = _merge_paths(plan)
    used = {path: 0 for path in paths}
    if cfg.budget > 0:
        for _ in range(cfg.max_passes):
            improved = False
            for path in paths:
                for dim in range(6):
                    node = _node_at(current, path)
                    cands = _coordinate_candidates(node.params, cfg)[dim]
                    room = cfg.budget - used[path]
                    if room <= 0:
                        break
                    cands = cands[:room]
                    plans = [_with_params(current, path, c) for c in cands]
                    used[path] += len(plans)
                    fits = _map_ordered(mean_fit, plans, cfg.threads)
                    if not fits:
                        continue
                    k = max(range(len(plans)), key=lambda n: (fits[n], _neg_key(plans[n])))
                    if fits[k] > best:
                        current, best = plans[k], fits[k]
                        improved = True
            if not improved:
                break
    return OperatorResult(current, best, fitness_a(current), fitness_b(current), init_a, init_b, used)


def mine_folds(gts: GroundTruthSet, fractions=(0.8, 0.1, 0.1), seed: int = 0,
               names=("train", "fold_a", "fold_b")) -> Dict[str, List[str]]:
    """Stratified image split keeping per-category box counts proportional.

    Iterative stratification: images are visited rarest category first (ties
    in a seeded random order) and each goes to the split with the largest
    remaining demand for that category, then for images overall.
    """
    rng = np.random.default_rng(seed)
    images = list(gts.images)
    perm = rng.permutation(len(images))
    images = [images[i] for i in perm]
    counts: Dict[str, Dict[str, int]] = {img: {} for img in images}
    for img, lab in zip(gts.image_ids.tolist(), gts.labels.tolist()):
        counts[img][lab] = counts[img].get(lab, 0) + 1
    totals: Dict[str, int] = {}
    for c in counts.values():
        for lab, n in c.items():
            totals[lab] = totals.get(lab, 0) + n
    fr = np.asarray(fractions, dtype=np.float64)
    want_images = fr * len(images)
    want = {lab: fr * n for lab, n in totals.items()}
    splits: List[List[str]] = [[] for _ in fractions]

    def rarest(img):
        labs = counts[img]
        return min((totals[lab], lab) for lab in labs) if labs else (np.inf, "")

    order = sorted(range(len(images)), key=lambda i: (rarest(images[i])[0], i))
    for i in order:
        img = images[i]
        lab = rarest(img)[1]
        if lab:
            demand = want[lab]
            key = [(demand[s], want_images[s], -s) for s in range(len(fractions))]
        else:
            key = [(want_images[s], 0.0, -s) for s in range(len(fractions))]
        s = max(range(len(fractions)), key=lambda s: key[s])
        splits[s].append(img)
        want_images[s] -= 1
        for l2, n in counts[img].items():
            want[l2][s] -= n
    roster_pos = {img: n for n, img in enumerate(gts.images)}
    return {name: sorted(split, key=roster_pos.__getitem__) for name, split in zip(names, splits)}


@dataclass
class SearchResult:
    plan: EnsemblePlan
    folds: Dict[str, List[str]]
    architecture: ArchitectureResult
    operators: OperatorResult
    leaf_depth: Dict[str, int]

    def summary(self) -> dict:
        return {
            "plan": plan_to_dict(self.plan),
            "architecture_trace": self.architecture.trace,
            "leaf_fitness_a": self.architecture.leaf_fitness,
            "leaf_depth": self.leaf_depth,
            "fitness_a": self.operators.fitness_a,
            "fitness_b": self.operators.fitness_b,
            "default_params_fitness_a": self.operators.initial_fitness_a,
            "default_params_fitness_b": self.operators.initial_fitness_b,
            "fold_sizes": {k: len(v) for k, v in self.folds.items()},
        }


def auto_ensemble(inputs: Mapping[str, DetectionSet], gts: GroundTruthSet,
                  hierarchy: Optional[CategoryHierarchy] = None,
                  cfg: SearchConfig = SearchConfig()) -> SearchResult:
    """Mine two validation folds, search the tree on fold A, tune operators on A and B."""
    folds = mine_folds(gts, cfg.fractions, cfg.seed)
    fit_a = Fitness(inputs, gts.restrict_images(folds["fold_a"]), hierarchy, cfg)
    fit_b = Fitness(inputs, gts.restrict_images(folds["fold_b"]), hierarchy, cfg)
    arch = search_architecture(sorted(inputs), fit_a, cfg.threads)
    ops = search_operators(arch.plan, fit_a, fit_b, cfg)
    depth = leaf_depths(ops.plan)
    for src in sorted(depth):
        logger.info("leaf %s depth %d fold-A mAP %.6f", src, depth[src], arch.leaf_fitness.get(src, float("nan")))
    return SearchResult(ops.plan, folds, arch, ops, depth)
