import itertools
import math

import numpy as np
from django.test import SimpleTestCase, override_settings

from mvtune import planner, searcher
from mvtune.domain import Configuration, IndexDescriptor, Workload
from mvtune.exceptions import (
    ConfigurationError,
    InfeasibleWorkloadError,
    InvalidInputError,
)
from mvtune.searcher import PlanCache, SearchParams, TunerResult
from mvtune.synthetic import generate_preset
from test_project.factories import linear_models, make_dataset, make_query, make_workload

WIDE = SearchParams(di=2, se=2, beam_width=16, improvement=0.0, max_iterations=3)


def exhaustive_best(W, pool, ctx):
    """Cheapest configuration of at most ``budget`` indexes, by enumeration."""
    best = None
    for size in range(1, int(W.storage_budget) + 1):
        for combo in itertools.combinations(pool, size):
            conf = Configuration(frozenset(combo))
            terms = []
            for q in W.queries:
                X = planner.candidate_indexes(q, conf, ctx.di)
                if not X:
                    break
                p = planner.plan(q, X, ctx, W.threshold_for(q))
                terms.append(q.probability * p.estimated_cost)
            else:
                cost = math.fsum(terms)
                if best is None or cost < best:
                    best = cost
    return best


class SearchParamsTest(SimpleTestCase):
    def test_validation(self):
        for bad in [dict(di=-1), dict(se=0), dict(beam_width=0), dict(improvement=1.0)]:
            with self.subTest(**bad):
                with self.assertRaises(InvalidInputError):
                    SearchParams(**bad)

    @override_settings(MVTUNE_BEAM_WIDTH=7)
    def test_from_settings_ignores_unset_overrides(self):
        params = SearchParams.from_settings(beam_width=None, se=3)
        self.assertEqual(params.beam_width, 7)
        self.assertEqual(params.se, 3)


class CandidatePoolTest(SimpleTestCase):
    def setUp(self):
        self.ds = make_dataset(rows=120)
        self.W = make_workload(self.ds, [{1, 2, 3}, {2}])

    def test_pool_respects_di(self):
        self.assertEqual(
            searcher.candidate_pool(self.W, 0),
            {IndexDescriptor.of(1, 2, 3), IndexDescriptor.of(2)},
        )
        self.assertEqual(len(searcher.candidate_pool(self.W, 1)), 5)
        self.assertEqual(len(searcher.candidate_pool(self.W, 2)), 7)

    def test_pool_size_guard(self):
        with self.assertRaises(ConfigurationError):
            searcher.candidate_pool(self.W, 2, max_pool=3)

    def test_seed_configs(self):
        W = make_workload(self.ds, [{1, 2}])
        pool = searcher.candidate_pool(W, 1)
        self.assertEqual(len(searcher.seed_configs(W, pool, 1, di=1)), 3)
        seeds = searcher.seed_configs(W, pool, 2, di=1)
        self.assertEqual(len(seeds), 6)
        self.assertIn(Configuration.of([1], [1, 2]), seeds)
        with self.assertRaises(InvalidInputError):
            searcher.seed_configs(W, pool, 0)


class PlanCacheTest(SimpleTestCase):
    def test_counts_and_switch(self):
        cache = PlanCache()
        key = PlanCache.key("q1", [IndexDescriptor.of(2), IndexDescriptor.of(1)])
        self.assertEqual(key, ("q1", ((1,), (2,))))
        self.assertIsNone(cache.get(key))
        cache.put(key, "plan")
        self.assertEqual(cache.get(key), "plan")
        self.assertEqual((cache.hits, cache.misses), (1, 1))
        off = PlanCache(enabled=False)
        off.put(key, "plan")
        self.assertIsNone(off.get(key))
        self.assertEqual(len(off), 0)


class TuneTest(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.ds = make_dataset(rows=200)
        cls.models = linear_models(cls.ds)
        cls.W = make_workload(cls.ds, [{1, 2}, {2, 3}], storage_budget=2)
        cls.ctx = planner.PlanningContext.create(cls.ds, cls.models, di=2)
        cls.result = searcher.tune(cls.W, cls.ds, cls.models, WIDE, cls.ctx, threads=1)

    def test_matches_exhaustive_enumeration(self):
        pool = sorted(searcher.candidate_pool(self.W, 2), key=lambda x: x.sort_key)
        expected = exhaustive_best(self.W, pool, self.ctx)
        self.assertAlmostEqual(self.result.workload_cost, expected)

    def test_result_shape(self):
        result = self.result
        self.assertLessEqual(result.storage_used, 2)
        self.assertEqual(set(result.plans), {"q1", "q2"})
        used = set()
        for qid, plan in result.plans.items():
            self.assertEqual(plan.query_id, qid)
            used |= plan.indexes
        # every index of the result is used by some plan
        self.assertEqual(used, set(result.configuration))
        self.assertEqual(result.trace[-1], result.workload_cost)
        self.assertGreater(result.evaluated, 0)

    def test_result_document_round_trip(self):
        data = self.result.to_dict()
        self.assertEqual(TunerResult.from_dict(data).to_dict(), data)
        with self.assertRaises(InvalidInputError):
            TunerResult.from_dict({"plans": []})

    def test_threads_do_not_change_the_result(self):
        again = searcher.tune(self.W, self.ds, self.models, WIDE, self.ctx, threads=3)
        self.assertEqual(again.configuration, self.result.configuration)
        self.assertEqual(again.workload_cost, self.result.workload_cost)

    def test_plan_caches_do_not_change_the_result(self):
        with override_settings(MVTUNE_USE_CACHE=False):
            ctx = planner.PlanningContext.create(self.ds, self.models, di=2)
        self.assertIsNone(ctx.cache_prefix)
        uncached = searcher.tune(self.W, self.ds, self.models, WIDE, ctx)
        self.assertEqual(uncached.configuration, self.result.configuration)
        self.assertEqual(uncached.workload_cost, self.result.workload_cost)

    def test_not_worse_than_exact_indexes(self):
        per_query = searcher.baseline_per_query(self.W, self.ds, self.models, self.ctx)
        self.assertLessEqual(self.result.workload_cost, per_query.workload_cost + 1e-9)


class BaselineTest(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.ds = make_dataset(rows=200)
        cls.models = linear_models(cls.ds)
        cls.W = make_workload(cls.ds, [{1, 2}, {2, 3}], storage_budget=2)

    def test_per_column(self):
        result = searcher.baseline_per_column(self.W, self.ds, self.models)
        self.assertEqual(result.label, "per-column")
        self.assertFalse(result.reference)
        self.assertEqual(result.configuration, Configuration.of([1], [2], [3]))
        for plan in result.plans.values():
            self.assertTrue(all(len(x.vid) == 1 for x in plan.indexes))

    def test_per_query_scans_exactly_the_needed_ranks(self):
        """With unit slopes the exact index scans ceil(0.9 * k) rows, twice the cost."""
        result = searcher.baseline_per_query(self.W, self.ds, self.models)
        self.assertTrue(result.reference)
        self.assertEqual(result.configuration, Configuration.of([1, 2], [2, 3]))
        for q in self.W.queries:
            self.assertEqual(result.plans[q.qid].indexes, {IndexDescriptor(q.vid)})
        expected = sum(q.probability * 2 * q.dim * 9 for q in self.W.queries)
        self.assertAlmostEqual(result.workload_cost, expected)


class InfeasibleTest(SimpleTestCase):
    def setUp(self):
        self.ds = make_dataset(rows=150)
        self.models = linear_models(self.ds)

    def test_storage(self):
        queries = (make_query(self.ds, {1, 2}),)
        W = Workload(queries, 0.9, 10, storage_unit="bytes")
        with self.assertRaises(InfeasibleWorkloadError) as cm:
            searcher.tune(W, self.ds, self.models, WIDE)
        self.assertEqual(cm.exception.constraint, "storage")
        self.assertEqual(cm.exception.detail["budget"], 10)

    def test_every_query_needs_an_index(self):
        W = make_workload(self.ds, [{1}, {2}, {3}], storage_budget=2)
        with self.assertRaises(InfeasibleWorkloadError) as cm:
            searcher.tune(W, self.ds, self.models, WIDE)
        self.assertEqual(cm.exception.constraint, "recall")


class SweepTest(SimpleTestCase):
    def test_cost_never_grows_with_budget(self):
        ds = make_dataset(rows=200)
        models = linear_models(ds)
        W = make_workload(ds, [{1, 2}, {2, 3}, {1, 3}], storage_budget=2)
        results = searcher.sweep(W, ds, models, [4, 2, 3], WIDE)
        self.assertEqual([r.storage_budget for r in results], [2, 3, 4])
        costs = [r.workload_cost for r in results]
        self.assertEqual(costs, sorted(costs, reverse=True))
        for r in results:
            self.assertLessEqual(r.storage_used, r.storage_budget)

    def test_no_budgets(self):
        ds = make_dataset(rows=120)
        W = make_workload(ds, [{1}])
        with self.assertRaises(InvalidInputError):
            searcher.sweep(W, ds, linear_models(ds), [])


FULL_BEAM = SearchParams(di=2, se=2, beam_width=64, improvement=0.0, max_iterations=3)


class RandomWorkloadTest(SimpleTestCase):
    """On three columns a 64-wide beam keeps every configuration, so tune is exact."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.ds = make_dataset(rows=120)
        cls.models = linear_models(cls.ds)
        cls.ctx = planner.PlanningContext.create(cls.ds, cls.models, di=2)

    def test_matches_exhaustive_enumeration(self):
        rng = np.random.default_rng(7)
        subsets = [s for n in (1, 2, 3) for s in itertools.combinations((1, 2, 3), n)]
        for trial in range(24):
            picks = rng.choice(len(subsets), size=int(rng.integers(1, 4)))
            vids = [set(subsets[i]) for i in picks]
            budget = int(rng.integers(1, 4))
            W = make_workload(self.ds, vids, storage_budget=budget, seed=10 * trial)
            pool = sorted(searcher.candidate_pool(W, 2), key=lambda x: x.sort_key)
            expected = exhaustive_best(W, pool, self.ctx)
            with self.subTest(trial=trial, vids=vids, budget=budget):
                if expected is None:
                    with self.assertRaises(InfeasibleWorkloadError):
                        searcher.tune(W, self.ds, self.models, FULL_BEAM, self.ctx)
                    continue
                result = searcher.tune(W, self.ds, self.models, FULL_BEAM, self.ctx)
                self.assertAlmostEqual(result.workload_cost, expected)
                self.assertLessEqual(len(result.configuration), budget)


class NaivePresetTest(SimpleTestCase):
    """Single, two- and three-column queries over three columns, three indexes."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.ds, workload = generate_preset("naive", rows=1000, clusters=4, k=20)
        cls.W = workload.to_workload(cls.ds)
        cls.models = linear_models(cls.ds)
        cls.ctx = planner.PlanningContext.create(cls.ds, cls.models, di=2)
        cls.tuned = searcher.tune(cls.W, cls.ds, cls.models, FULL_BEAM, cls.ctx)
        cls.per_column = searcher.baseline_per_column(cls.W, cls.ds, cls.models, cls.ctx)

    def test_not_worse_than_per_column(self):
        self.assertLessEqual(len(self.tuned.configuration), 3)
        self.assertLessEqual(
            self.tuned.workload_cost, self.per_column.workload_cost + 1e-9
        )

    def test_multi_column_query_scans_fewer_items(self):
        (q,) = [q for q in self.W.queries if len(q.vid) == 3]
        tuned = self.tuned.plan_for(q.qid)
        per_column = self.per_column.plan_for(q.qid)
        self.assertTrue(any(len(x.vid) > 1 for x in tuned.indexes))
        self.assertLessEqual(tuned.total_ek, 0.6 * per_column.total_ek)
