import json

import numpy as np
import pytest

from detkit import (DetectionSet, Leaf, Merge, MergeParams, NmsConfig, SearchConfig, auto_ensemble,
                    evaluate, execute_plan, search_architecture, search_operators)
from detkit.autoensemble import (Fitness, PlanExecutor, leaf_depths, merge_sets, mine_folds, plan_from_json,
                                 plan_key, plan_to_json)

import synth
from conftest import make_dets, make_gts


def unit_fold_fitness(inputs, gts, cfg=SearchConfig()):
    return Fitness(inputs, gts, None, cfg)


class TestPlanTypes:
    def test_duplicate_leaf_forbidden(self):
        with pytest.raises(ValueError):
            Merge(Leaf("x"), Leaf("x"))
        with pytest.raises(ValueError):
            Merge(Merge(Leaf("x"), Leaf("y")), Leaf("y"))

    @pytest.mark.parametrize("kw", [{"score_weight_left": 2.5}, {"score_weight_right": -0.1},
                                    {"box_source": "left_only", "score_source": "left_only"},
                                    {"nms_kind": "fancy"}, {"box_source": "none"}])
    def test_invalid_params(self, kw):
        with pytest.raises(ValueError):
            MergeParams(**kw)

    def test_score_only_and_box_only_combo_allowed(self):
        MergeParams(box_source="left_only", score_source="right_only")

    def test_json_round_trip(self):
        plan = Merge(Merge(Leaf("a"), Leaf("b"), MergeParams(0.5, 1.25, "left_only", "both", "soft", 0.4)),
                     Leaf("c"))
        text = plan_to_json(plan)
        assert plan_from_json(text) == plan
        assert plan_to_json(plan_from_json(text)) == text
        assert json.loads(text)["merge"]["right"] == {"leaf": "c"}

    def test_leaf_depths(self):
        plan = Merge(Merge(Leaf("a"), Leaf("b")), Leaf("c"))
        assert leaf_depths(plan) == {"a": 2, "b": 2, "c": 1}


class TestExecute:
    def test_single_leaf_identity(self, rng):
        gts = synth.ground_truth(rng, 5)
        d = synth.leaf(rng, gts, "a", 0.8, 0.05, 1)
        assert execute_plan(Leaf("a"), {"a": d}) is d

    def test_missing_source(self):
        with pytest.raises(KeyError):
            execute_plan(Leaf("zz"), {})

    def test_disjoint_union(self, rng):
        gts = synth.ground_truth(rng, 10)
        half = gts.images[:5], gts.images[5:]
        # one detection per (image, category) so naive NMS cannot remove anything
        def clean(src, imgs):
            seen, rows = set(), []
            for img, lab, b in zip(gts.image_ids.tolist(), gts.labels.tolist(), gts.boxes.tolist()):
                if img in imgs and (img, lab) not in seen:
                    seen.add((img, lab))
                    rows.append((img, lab, float(rng.uniform(0.1, 0.9)), tuple(b)))
            return make_dets(rows, source_id=src, images=gts.images)
        a, b = clean("a", half[0]), clean("b", half[1])
        plan = Merge(Leaf("a"), Leaf("b"), MergeParams(nms_kind="naive"))
        out = execute_plan(plan, {"a": a, "b": b})
        rows = lambda d: sorted((x.image_id, x.category, x.score, x.box.as_tuple()) for x in d)
        assert rows(out) == sorted(rows(a) + rows(b))

    def test_deterministic(self, rng):
        gts = synth.ground_truth(rng, 10)
        inputs = {s: synth.leaf(rng, gts, s, 0.7, 0.1, 2) for s in "abc"}
        plan = Merge(Merge(Leaf("a"), Leaf("c"), MergeParams(0.5, 1.5, "both", "left_only")), Leaf("b"))
        x, y = execute_plan(plan, inputs), execute_plan(plan, inputs)
        np.testing.assert_array_equal(x.scores, y.scores)
        np.testing.assert_array_equal(x.boxes, y.boxes)

    def test_cache_matches_fresh(self, rng):
        gts = synth.ground_truth(rng, 10)
        inputs = {s: synth.leaf(rng, gts, s, 0.7, 0.1, 2) for s in "abc"}
        plan = Merge(Merge(Leaf("a"), Leaf("b")), Leaf("c"))
        ex = PlanExecutor(inputs)
        ex(plan.left)
        cached = ex(plan)
        fresh = PlanExecutor(inputs)(plan)
        np.testing.assert_array_equal(cached.scores, fresh.scores)
        fit = unit_fold_fitness(inputs, gts)
        assert fit(plan) == fit(plan) == evaluate(fresh, gts).map
        assert fit.evaluations == 1


class TestElementDropout:
    box_l = (0.1, 0.1, 0.5, 0.5)
    box_r = (0.12, 0.1, 0.5, 0.52)

    def sets(self):
        left = make_dets([("i", "c", 0.6, self.box_l)], source_id="L")
        right = make_dets([("i", "c", 0.8, self.box_r), ("i", "c", 0.7, (0.7, 0.7, 0.9, 0.9))], source_id="R")
        return left, right

    def test_score_only_child_uses_partner_boxes(self):
        left, right = self.sets()
        out = merge_sets(left, right, MergeParams(box_source="left_only", nms_kind="naive"))
        # right's matched box moves onto left's box; its unmatched box is dropped
        assert len(out) == 1
        np.testing.assert_allclose(out.boxes[0], self.box_l, atol=1e-12)
        assert out.scores[0] == pytest.approx(0.8 + 0.05 * 0.6)

    def test_box_only_child_earns_no_bonus(self):
        left, right = self.sets()
        out = merge_sets(left, right, MergeParams(score_source="right_only", nms_kind="naive"))
        top = int(np.argmax(out.scores))
        assert out.scores[top] == 0.8
        full = merge_sets(left, right, MergeParams(nms_kind="naive"))
        assert full.scores.max() == pytest.approx(0.83)

    def test_weights_scale_scores(self):
        _, right = self.sets()
        left = make_dets([("i", "c", 0.6, (0.0, 0.6, 0.3, 0.9))], source_id="L")
        out = merge_sets(left, right, MergeParams(0.5, 1.0, nms_kind="naive"))
        assert sorted(out.scores.tolist()) == [0.3, 0.7, 0.8]


class TestArchitecture:
    def test_one_leaf(self):
        r = search_architecture(["a"], lambda p: 0.3)
        assert r.plan == Leaf("a") and r.trace == [0.3]

    def test_identical_sets(self, rng):
        gts = synth.ground_truth(rng, 20)
        rows, seen = [], set()
        for img, lab, b in zip(gts.image_ids.tolist(), gts.labels.tolist(), gts.boxes.tolist()):
            if (img, lab) not in seen and rng.random() < 0.8:
                seen.add((img, lab))
                rows.append((img, lab, float(rng.uniform(0.05, 0.9)), tuple(b)))
        a = make_dets(rows, source_id="a", images=gts.images)
        b = make_dets(rows, source_id="b", images=gts.images)
        fit = unit_fold_fitness({"a": a, "b": b}, gts)
        merged = Merge(Leaf("a"), Leaf("b"))
        assert fit(merged) == pytest.approx(fit(Leaf("a")), abs=1e-12)
        r = search_architecture(["a", "b"], fit)
        assert r.fitness == pytest.approx(fit(Leaf("a")), abs=1e-12)

    def test_dominant_leaf(self, rng):
        gts = synth.ground_truth(rng, 40)
        inputs = {
            "strong": synth.leaf(rng, gts, "strong", 0.95, 0.03, 0.2),
            "weak1": synth.leaf(rng, gts, "weak1", 0.4, 0.3, 3),
            "weak2": synth.leaf(rng, gts, "weak2", 0.3, 0.4, 4),
        }
        fit = unit_fold_fitness(inputs, gts)
        r = search_architecture(list(inputs), fit)
        assert r.fitness >= max(r.leaf_fitness.values())
        assert r.leaf_fitness["strong"] == max(r.leaf_fitness.values())
        assert all(b >= a for a, b in zip(r.trace, r.trace[1:]))
        assert fit(r.plan) == r.fitness

    def test_threads_same_result(self, rng):
        gts = synth.ground_truth(rng, 15)
        inputs = {s: synth.leaf(rng, gts, s, 0.6, 0.1, 1) for s in "abcd"}
        r1 = search_architecture(list(inputs), unit_fold_fitness(inputs, gts), threads=1)
        r4 = search_architecture(list(inputs), unit_fold_fitness(inputs, gts), threads=4)
        assert plan_key(r1.plan) == plan_key(r4.plan) and r1.trace == r4.trace


class TestOperators:
    def noisy_pair(self, rng):
        gts_a = synth.ground_truth(rng, 20)
        gts_b = synth.ground_truth(np.random.default_rng(99), 20)
        gts_b = make_gts([(f"b{r[0]}",) + r[1:] for r in
                          zip(gts_b.image_ids.tolist(), gts_b.labels.tolist(), map(tuple, gts_b.boxes.tolist()),
                              gts_b.is_group_of.tolist())])
        inputs = {}
        for src, kw in (("good", dict(recall=0.9, noise=0.02, fp_rate=0, tp_scores=(0.3, 0.4))),
                        ("noisy", dict(recall=0.0, noise=0.0, fp_rate=4, fp_scores=(0.9, 0.99)))):
            parts = [synth.leaf(rng, g, src, **kw) for g in (gts_a, gts_b)]
            inputs[src] = DetectionSet.concat(parts, source_id=src)
        return inputs, gts_a, gts_b

    def test_budget_zero_unchanged(self, rng):
        inputs, ga, gb = self.noisy_pair(rng)
        plan = Merge(Leaf("good"), Leaf("noisy"))
        fa, fb = unit_fold_fitness(inputs, ga), unit_fold_fitness(inputs, gb)
        r = search_operators(plan, fa, fb, SearchConfig(budget=0))
        assert r.plan == plan
        assert r.fitness_a == fa(plan) and r.fitness_b == fb(plan)

    def test_single_leaf_unchanged(self):
        r = search_operators(Leaf("a"), lambda p: 0.4, lambda p: 0.6)
        assert r.plan == Leaf("a") and r.fitness == 0.5

    def test_default_only_grid(self, rng):
        inputs, ga, gb = self.noisy_pair(rng)
        plan = Merge(Leaf("good"), Leaf("noisy"))
        cfg = SearchConfig(weight_grid=(1.0,), match_iou_grid=(0.5,), nms_kinds=("adj",), source_options=("both",))
        r = search_operators(plan, unit_fold_fitness(inputs, ga), unit_fold_fitness(inputs, gb), cfg)
        assert r.plan == plan
        assert sum(r.evaluations.values()) == 0
        assert r.fitness_a == r.initial_fitness_a

    def test_down_weights_noisy_child(self, rng):
        inputs, ga, gb = self.noisy_pair(rng)
        plan = Merge(Leaf("good"), Leaf("noisy"))
        fa, fb = unit_fold_fitness(inputs, ga), unit_fold_fitness(inputs, gb)
        cfg = SearchConfig()
        r = search_operators(plan, fa, fb, cfg)
        # exhaustive oracle over the noisy child's weight with everything else default
        grid = {w: 0.5 * (fa(p) + fb(p)) for w in cfg.weight_grid
                for p in [Merge(Leaf("good"), Leaf("noisy"), MergeParams(score_weight_right=w))]}
        best_w = max(grid, key=lambda w: (grid[w], -w))
        assert best_w < 1.0
        assert r.plan.params.score_weight_right < 1.0
        default = 0.5 * (r.initial_fitness_a + r.initial_fitness_b)
        assert r.fitness >= default
        assert r.fitness >= grid[best_w] - 1e-12
        assert r.fitness == pytest.approx(0.5 * (r.fitness_a + r.fitness_b))
        assert all(v <= cfg.budget for v in r.evaluations.values())

    def test_budget_respected(self, rng):
        gts = synth.ground_truth(rng, 10)
        inputs = {s: synth.leaf(rng, gts, s, 0.6, 0.1, 1) for s in "abc"}
        plan = Merge(Merge(Leaf("a"), Leaf("b")), Leaf("c"))
        fit = unit_fold_fitness(inputs, gts)
        r = search_operators(plan, fit, fit, SearchConfig(budget=7))
        assert set(r.evaluations) == {("L",), ()}
        assert all(v <= 7 for v in r.evaluations.values())


class TestFolds:
    def test_fractions_and_stratification(self, rng):
        gts = synth.ground_truth(rng, 300, n_cats=6)
        folds = mine_folds(gts, seed=3)
        sizes = {k: len(v) for k, v in folds.items()}
        assert sum(sizes.values()) == 300
        assert sizes["train"] == pytest.approx(240, abs=6)
        assert sizes["fold_a"] == pytest.approx(30, abs=6)
        all_imgs = folds["train"] + folds["fold_a"] + folds["fold_b"]
        assert sorted(all_imgs) == sorted(gts.images)
        total = {c: int(np.sum(gts.labels == c)) for c in gts.categories}
        for name in ("fold_a", "fold_b"):
            sub = gts.restrict_images(folds[name])
            for c, n in total.items():
                got = int(np.sum(sub.labels == c))
                assert abs(got - 0.1 * n) <= 0.2 * 0.1 * n + 1

    def test_seeded(self, rng):
        gts = synth.ground_truth(rng, 50)
        assert mine_folds(gts, seed=1) == mine_folds(gts, seed=1)


class TestAutoEnsemble:
    def test_end_to_end(self, rng):
        gts = synth.ground_truth(rng, 60)
        inputs = {s: synth.leaf(rng, gts, s, q, 0.05, 1) for s, q in (("a", 0.8), ("b", 0.6), ("c", 0.5))}
        cfg = SearchConfig(budget=10, seed=1)
        r = auto_ensemble(inputs, gts, cfg=cfg)
        s = r.summary()
        assert r.architecture.fitness >= max(s["leaf_fitness_a"].values())
        assert s["fitness_a"] + s["fitness_b"] >= s["default_params_fitness_a"] + s["default_params_fitness_b"]
        assert set(s["fold_sizes"]) == {"train", "fold_a", "fold_b"}
        json.dumps(s)
        r2 = auto_ensemble(inputs, gts, cfg=SearchConfig(budget=10, seed=1, threads=4))
        assert plan_key(r.plan) == plan_key(r2.plan)
