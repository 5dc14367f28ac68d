import itertools
from unittest.mock import patch

import numpy as np
from django.core.cache import caches
from django.test import SimpleTestCase, override_settings

from mvtune import oracle, planner
from mvtune.domain import Configuration, IndexDescriptor, Query, QueryPlan
from mvtune.estimators import ColumnFit, RecallModel, inflate_ek
from mvtune.exceptions import InfeasiblePlanError, InvalidInputError
from mvtune.planner import DpState, PlanningContext, RelevantEk
from test_project.factories import linear_models, make_dataset, make_query

X1, X2, X3 = IndexDescriptor.of(1), IndexDescriptor.of(2), IndexDescriptor.of(3)
X12, X123 = IndexDescriptor.of(1, 2), IndexDescriptor.of(1, 2, 3)


def ek_cost(q, x, ek):
    return float(ek)


def tiny_query(vid=(1, 2, 3), k=3, dim=1):
    return Query(frozenset(vid), {i: np.ones(dim) for i in vid}, k, qid="t")


def grid_optimum(q, X, rel, threshold, cost_idx, ek_map=lambda x, rank: rank):
    """Exhaustive enumeration of every combination of relevant grid positions."""
    need = planner.coverage_needed(threshold, rel.k)
    best = None
    for eks in itertools.product(*(rel.grid(x) for x in X)):
        limits = dict(zip(X, eks))
        if bin(rel.covered(limits)).count("1") < need:
            continue
        cost = 0.0
        for x, rank in limits.items():
            if rank:
                ek = ek_map(x, rank)
                cost += cost_idx(q, x, ek) + q.dim * ek
        if best is None or cost < best:
            best = cost
    return best


class CoverageTest(SimpleTestCase):
    def test_coverage_needed(self):
        self.assertEqual(planner.coverage_needed(0.9, 10), 9)
        self.assertEqual(planner.coverage_needed(1.0, 3), 3)
        self.assertEqual(planner.coverage_needed(0.7, 8), 6)
        self.assertEqual(planner.coverage_needed(0.3, 10), 3)
        with self.assertRaises(InvalidInputError):
            planner.coverage_needed(0.0, 10)


class RelevantEkTest(SimpleTestCase):
    def setUp(self):
        # ranks of ground-truth items 1..3 in x^{1} and x^{3}
        self.rel = RelevantEk(3, {X1: (31, 6, 183), X3: (116, 230, 8)})

    def test_entries_and_grid(self):
        self.assertEqual(self.rel.entries(X1), [(0, None), (6, 2), (31, 1), (183, 3)])
        self.assertEqual(self.rel.grid(X3), [0, 8, 116, 230])
        self.assertEqual(self.rel.cumulative_masks(X1), [0, 0b010, 0b011, 0b111])

    def test_covered(self):
        self.assertEqual(self.rel.covered({X1: 31, X3: 8}), 0b111)
        self.assertEqual(self.rel.covered({X1: 30, X3: 8}), 0b110)
        self.assertEqual(self.rel.covered({X1: 0, X3: 0}), 0)

    def test_rank_validation(self):
        with self.assertRaises(InvalidInputError):
            RelevantEk(3, {X1: (1, 2)})
        with self.assertRaises(InvalidInputError):
            RelevantEk(2, {X1: (0, 2)})

    def test_dp_state(self):
        state = DpState.initial(3)
        self.assertEqual(len(state), 8)
        self.assertEqual(state.cost[0], 0.0)
        self.assertEqual(state.ranks[0], ())
        self.assertIsNone(state.ranks[5])


class WorkedExampleTest(SimpleTestCase):
    """Two single-column indexes where neither alone is the cheap way to cover."""

    def setUp(self):
        self.q = tiny_query(vid=(1, 3), k=3, dim=2)
        self.rel = RelevantEk(3, {X1: (31, 6, 183), X3: (116, 230, 8)})

    def test_search_splits_items_between_indexes(self):
        plan = planner.plan_search(self.q, [X1, X3], self.rel, 1.0, ek_cost)
        self.assertEqual(plan.ek, {X1: 31, X3: 8})
        self.assertEqual(plan.estimated_cost, 39 + 4 * 39)
        self.assertEqual(plan.estimated_recall, 1.0)
        self.assertEqual(plan.algorithm, "search")

    def test_dp_agrees(self):
        plan = planner.plan_dp(self.q, [X1, X3], self.rel, 1.0, 3, 3, ek_cost)
        self.assertEqual(plan.ek, {X1: 31, X3: 8})
        self.assertEqual(plan.algorithm, "dp")
        self.assertFalse(plan.sample_based)

    def test_lower_threshold_needs_fewer_items(self):
        plan = planner.plan_search(self.q, [X1, X3], self.rel, 0.6, ek_cost)
        # two items: rank 8 in x^{3} and rank 6 in x^{1}
        self.assertEqual(plan.ek, {X1: 6, X3: 8})

    def test_single_index(self):
        plan = planner.plan_search(self.q, [X3], self.rel, 1.0, ek_cost)
        self.assertEqual(plan.ek, {X3: 230})

    def test_no_index(self):
        with self.assertRaises(InfeasiblePlanError):
            planner.plan_search(self.q, [], self.rel, 1.0, ek_cost)


class PlannerOptimalityTest(SimpleTestCase):
    def test_search_and_dp_match_exhaustive_grid(self):
        """Random rank tables: search, DP with k' = k and the full grid agree."""
        rng = np.random.default_rng(1234)
        pool = [X1, X2, X3, X12]
        q = tiny_query(k=8)
        for trial in range(200):
            k = int(rng.integers(1, 9))
            X = pool[: int(rng.integers(2, 4))]
            ranks = {
                x: tuple(int(r) for r in rng.choice(np.arange(1, 60), size=k, replace=False))
                for x in X
            }
            weights = {x: int(rng.integers(1, 6)) for x in X}

            def cost_idx(q, x, ek, weights=weights):
                return float(weights[x] * ek)

            rel = RelevantEk(k, ranks)
            threshold = float(rng.choice([0.7, 0.9, 1.0]))
            with self.subTest(trial=trial, k=k, indexes=len(X), threshold=threshold):
                expected = grid_optimum(q, X, rel, threshold, cost_idx)
                found = planner.plan_search(q, X, rel, threshold, cost_idx)
                self.assertEqual(found.estimated_cost, expected)
                dp = planner.plan_dp(q, X, rel, threshold, k, 3, cost_idx)
                self.assertEqual(dp.estimated_cost, expected)
                covered = rel.covered(found.ek)
                self.assertGreaterEqual(
                    bin(covered).count("1"), planner.coverage_needed(threshold, k)
                )

    def test_search_and_dp_match_exhaustive_grid_with_inflation(self):
        """Recall-inflated scan depths, where the raw ek / recall dips with depth."""
        recall = RecallModel(
            {
                1: ColumnFit(1, 1, 1.0, 0.0, 0.3, -1.0),
                2: ColumnFit(2, 1, 1.0, 0.0, 0.5, -1.5),
                3: ColumnFit(3, 1, 1.0, 0.0, 0.2, -0.3),
            }
        )

        def ek_map(x, rank):
            return inflate_ek(recall, x, rank, 10**6)

        rng = np.random.default_rng(4321)
        pool = [X1, X2, X3, X12]
        q = tiny_query(k=8)
        for trial in range(200):
            k = int(rng.integers(1, 9))
            X = pool[: int(rng.integers(2, 4))]
            ranks = {
                x: tuple(int(r) for r in rng.choice(np.arange(1, 120), size=k, replace=False))
                for x in X
            }
            rel = RelevantEk(k, ranks)
            threshold = float(rng.choice([0.5, 0.7, 0.9, 1.0]))
            with self.subTest(trial=trial, k=k, indexes=len(X), threshold=threshold):
                expected = grid_optimum(q, X, rel, threshold, ek_cost, ek_map)
                found = planner.plan_search(q, X, rel, threshold, ek_cost, ek_map)
                self.assertEqual(found.estimated_cost, expected)
                dp = planner.plan_dp(q, X, rel, threshold, k, 3, ek_cost, ek_map)
                self.assertEqual(dp.estimated_cost, expected)

    def test_deeper_rank_with_shallower_scan(self):
        recall = RecallModel({i: ColumnFit(i, 1, 1.0, 0.0, 0.3, -1.0) for i in (1, 2)})

        def ek_map(x, rank):
            return inflate_ek(recall, x, rank, 10**6)

        q = tiny_query(vid=(1, 2), k=2)
        rel = RelevantEk(2, {X1: (500, 501), X2: (40, 60)})
        expected = grid_optimum(q, [X1, X2], rel, 0.5, ek_cost, ek_map)
        found = planner.plan_search(q, [X1, X2], rel, 0.5, ek_cost, ek_map)
        dp = planner.plan_dp(q, [X1, X2], rel, 0.5, 2, 3, ek_cost, ek_map)
        self.assertEqual(found.ek, {X2: 254})
        self.assertEqual(found.estimated_cost, expected)
        self.assertEqual(dp.estimated_cost, expected)

    def test_dp_on_a_sample_of_items(self):
        rel = RelevantEk(8, {X1: (1, 2, 3, 4, 5, 6, 7, 8), X2: (8, 7, 6, 5, 4, 3, 2, 1)})
        q = tiny_query(k=8)
        first = planner.plan_dp(q, [X1, X2], rel, 1.0, 3, 3, ek_cost, seed=5)
        again = planner.plan_dp(q, [X1, X2], rel, 1.0, 3, 3, ek_cost, seed=5)
        self.assertTrue(first.sample_based)
        self.assertEqual(first, again)
        with self.assertRaises(InvalidInputError):
            planner.plan_dp(q, [X1, X2], rel, 1.0, 0, 3, ek_cost)


class CandidateIndexesTest(SimpleTestCase):
    def test_filter_by_missing_columns(self):
        ds = make_dataset(rows=120)
        q = make_query(ds, {1, 2, 3})
        conf = [X1, X2, X12, X123, IndexDescriptor.of(2, 4)]
        self.assertEqual(planner.candidate_indexes(q, conf, 0), {X123})
        self.assertEqual(planner.candidate_indexes(q, conf, 1), {X12, X123})
        self.assertEqual(planner.candidate_indexes(q, conf, None), {X1, X2, X12, X123})
        with self.assertRaises(InvalidInputError):
            planner.candidate_indexes(q, conf, -1)


class RelevantEkCacheTest(SimpleTestCase):
    def setUp(self):
        caches["default"].clear()
        self.ds = make_dataset(rows=150)
        self.q = make_query(self.ds, {1, 2}, k=5)
        self.gt = oracle.ground_truth(self.q, self.ds)

    def test_matches_rank_table(self):
        rel = planner.relevant_ek(self.q, [X1, X2], self.gt, self.ds)
        table = oracle.rank_table(self.q, self.gt, [X1, X2], self.ds)
        self.assertEqual(rel, RelevantEk.from_table(table))

    def test_cached_ranks_are_reused(self):
        first = planner.relevant_ek(self.q, [X1, X2], self.gt, self.ds, "test")
        with patch(
            "mvtune.planner.oracle.ranks_under", wraps=oracle.ranks_under
        ) as ranks_under:
            again = planner.relevant_ek(self.q, [X1, X2, X12], self.gt, self.ds, "test")
        self.assertEqual(ranks_under.call_count, 1)
        self.assertEqual(again.ranks[X1], first.ranks[X1])

    def test_no_prefix_means_no_cache(self):
        planner.relevant_ek(self.q, [X1], self.gt, self.ds)
        with patch(
            "mvtune.planner.oracle.ranks_under", wraps=oracle.ranks_under
        ) as ranks_under:
            planner.relevant_ek(self.q, [X1], self.gt, self.ds)
        self.assertEqual(ranks_under.call_count, 1)


class PlanTest(SimpleTestCase):
    def setUp(self):
        caches["default"].clear()
        self.ds = make_dataset(rows=200)
        self.models = linear_models(self.ds)
        self.ctx = PlanningContext.create(self.ds, self.models, di=None)
        self.q = make_query(self.ds, {1, 2}, k=10)

    def test_exact_index_scans_exactly_k(self):
        plan = planner.plan(self.q, [X12], self.ctx, 1.0)
        self.assertEqual(plan.ek, {X12: 10})
        # scan 14 * 10 plus re-rank 14 * 10
        self.assertEqual(plan.estimated_cost, 280.0)

    def test_dispatch(self):
        q = make_query(self.ds, {1, 2, 3}, k=10)
        self.assertEqual(
            planner.plan(q, Configuration.of([1], [2], [3]), self.ctx, 0.9).algorithm,
            "search",
        )
        self.assertEqual(
            planner.plan(q, Configuration.of([1], [2], [3], [1, 2]), self.ctx, 0.9).algorithm,
            "dp",
        )

    def test_no_candidate(self):
        with self.assertRaises(InfeasiblePlanError):
            planner.plan(self.q, [X3], self.ctx, 0.9)

    def test_cheaper_baseline_is_kept(self):
        cheap = QueryPlan.of({X1: 3}, estimated_cost=1.0, query_id="old")
        plan = planner.plan(self.q, [X1, X2], self.ctx, 0.9, baseline=cheap)
        self.assertEqual(plan.ek, {X1: 3})
        self.assertEqual(plan.query_id, self.q.qid)
        # a baseline using an index that is gone is ignored
        gone = QueryPlan.of({X12: 3}, estimated_cost=1.0)
        plan = planner.plan(self.q, [X1, X2], self.ctx, 0.9, baseline=gone)
        self.assertNotIn(X12, plan.indexes)

    def test_more_indexes_never_cost_more(self):
        one = planner.plan(self.q, [X1], self.ctx, 0.9)
        two = planner.plan(self.q, [X1, X2], self.ctx, 0.9)
        three = planner.plan(self.q, [X1, X2, X12], self.ctx, 0.9)
        self.assertLessEqual(two.estimated_cost, one.estimated_cost)
        self.assertLessEqual(three.estimated_cost, two.estimated_cost)


class PlanningContextTest(SimpleTestCase):
    def setUp(self):
        self.ds = make_dataset(rows=300)
        self.models = linear_models(self.ds)

    def test_exact_mode(self):
        ctx = PlanningContext.create(self.ds, self.models)
        self.assertFalse(ctx.sample_based)
        self.assertIs(ctx.dataset, self.ds)
        self.assertEqual(ctx.ek_map(X1, 7), 7)
        self.assertEqual(ctx.di, 2)
        self.assertTrue(ctx.cache_prefix.startswith("mvtune:relek:"))

    @override_settings(MVTUNE_EXACT_PLANNING_ROWS=100)
    def test_sample_mode_scales_ranks(self):
        ctx = PlanningContext.create(self.ds, self.models)
        self.assertTrue(ctx.sample_based)
        self.assertEqual(ctx.dataset.num_rows, 200)
        self.assertEqual(ctx.scale_factor, 1.5)
        self.assertEqual(ctx.ek_map(X1, 4), 6)
        q = make_query(self.ds, {1}, k=30)
        self.assertEqual(ctx.ground_truth_size(q), 30)
        self.assertEqual(len(ctx.ground_truth(q).ids), 30)
        # a k larger than the sample keeps every sample row
        self.assertEqual(ctx.ground_truth_size(make_query(self.ds, {1}, k=250)), 200)
        plan = planner.plan(q, [X1], ctx, 0.9)
        self.assertTrue(plan.sample_based)

    @override_settings(MVTUNE_USE_CACHE=False)
    def test_cache_switch(self):
        ctx = PlanningContext.create(self.ds, self.models)
        self.assertIsNone(ctx.cache_prefix)

    def test_ground_truth_is_memoized(self):
        ctx = PlanningContext.create(self.ds, self.models)
        q = make_query(self.ds, {1, 2})
        self.assertIs(ctx.ground_truth(q), ctx.ground_truth(q))
        self.assertIsNone(ctx.without_column_filter().di)
