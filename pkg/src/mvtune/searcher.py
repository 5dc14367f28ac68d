"""
Configuration search: a beam search over sets of (possibly multi-column) indexes.
Each round adds one candidate index to every configuration in the beam, plans the
whole workload against the result, drops indexes no plan uses and keeps the
cheapest configurations that fit the storage budget.
"""
import dataclasses
import itertools
import logging
import math
import threading
import time
import typing as T
from concurrent.futures import ThreadPoolExecutor

from mvtune import planner
from mvtune.domain import (
    Configuration,
    Dataset,
    IndexDescriptor,
    QueryPlan,
    Workload,
)
from mvtune.estimators import StorageModel, TunerModels, est_storage
from mvtune.exceptions import (
    ConfigurationError,
    InfeasiblePlanError,
    InfeasibleWorkloadError,
    InvalidInputError,
)

logger = logging.getLogger("mvtune.searcher")


@dataclasses.dataclass(frozen=True)
class SearchParams:
    di: int = 2
    se: int = 2
    beam_width: int = 4
    improvement: float = 0.05
    max_iterations: int = 20

    def __post_init__(self):
        if self.di < 0:
            raise InvalidInputError("di must be >= 0")
        if self.se < 1:
            raise InvalidInputError("se must be >= 1")
        if self.beam_width < 1:
            raise InvalidInputError("beam width must be at least 1")
        if not 0 <= self.improvement < 1:
            raise InvalidInputError("improvement threshold must be in [0, 1)")
        if self.max_iterations < 1:
            raise InvalidInputError("max iterations must be >= 1")

    @classmethod
    def from_settings(cls, **overrides) -> "SearchParams":
        from mvtune.apps import get_config

        conf = get_config()
        values = dict(
            di=conf.di,
            se=conf.se,
            beam_width=conf.beam_width,
            improvement=conf.improvement,
            max_iterations=conf.max_iterations,
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self) -> T.Dict[str, T.Any]:
        return dataclasses.asdict(self)


class PlanCache:
    """Raw planner output per (query id, candidate index columns)."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.hits = 0
        self.misses = 0
        self._plans: T.Dict[T.Tuple, QueryPlan] = {}
        self._lock = threading.Lock()

    @staticmethod
    def key(qid: str, X: T.Iterable[IndexDescriptor]) -> T.Tuple:
        return (qid, tuple(sorted(x.columns for x in X)))

    def get(self, key) -> T.Optional[QueryPlan]:
        if not self.enabled:
            return None
        with self._lock:
            found = self._plans.get(key)
            if found is None:
                self.misses += 1
            else:
                self.hits += 1
            return found

    def put(self, key, value: QueryPlan) -> None:
        if self.enabled:
            with self._lock:
                self._plans[key] = value

    def __len__(self):
        return len(self._plans)


@dataclasses.dataclass(frozen=True)
class TunerResult:
    configuration: Configuration
    plans: T.Mapping[str, QueryPlan]
    workload_cost: float
    storage_used: float
    storage_budget: float
    storage_unit: str = "index-count"
    trace: T.Tuple[T.Optional[float], ...] = ()
    label: str = "tuned"
    reference: bool = False
    evaluated: int = 0

    def plan_for(self, qid: str) -> QueryPlan:
        return self.plans[qid]

    def to_dict(self) -> T.Dict[str, T.Any]:
        return {
            "label": self.label,
            "reference": self.reference,
            "config": self.configuration.as_lists(),
            "plans": [plan.to_dict() for plan in self.plans.values()],
            "workload_cost": self.workload_cost,
            "storage": {
                "used": self.storage_used,
                "budget": self.storage_budget,
                "unit": self.storage_unit,
            },
            "trace": list(self.trace),
            "evaluated": self.evaluated,
        }

    @classmethod
    def from_dict(cls, data: T.Mapping[str, T.Any]) -> "TunerResult":
        try:
            plans = [QueryPlan.from_dict(p) for p in data["plans"]]
            storage = data.get("storage", {})
            return cls(
                configuration=Configuration.of(*data["config"]),
                plans={p.query_id: p for p in plans},
                workload_cost=float(data["workload_cost"]),
                storage_used=float(storage.get("used", len(data["config"]))),
                storage_budget=float(storage.get("budget", len(data["config"]))),
                storage_unit=storage.get("unit", "index-count"),
                trace=tuple(data.get("trace", ())),
                label=data.get("label", "tuned"),
                reference=bool(data.get("reference", False)),
                evaluated=int(data.get("evaluated", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed tuning result: {exc}") from exc


def candidate_pool(
    W: Workload, di: int, max_pool: T.Optional[int] = None
) -> T.FrozenSet[IndexDescriptor]:
    """Every column subset of every query missing at most ``di`` of its columns."""
    if max_pool is None:
        from mvtune.apps import get_config

        max_pool = get_config().max_pool
    pool = set()
    for q in W.queries:
        cols = q.columns
        for size in range(max(1, len(cols) - di), len(cols) + 1):
            for combo in itertools.combinations(cols, size):
                pool.add(IndexDescriptor(frozenset(combo)))
                if len(pool) > max_pool:
                    raise ConfigurationError(
                        f"candidate pool exceeds {max_pool} indexes; use a smaller di"
                    )
    return frozenset(pool)


def seed_configs(
    W: Workload,
    pool: T.Iterable[IndexDescriptor],
    se: int,
    di: T.Optional[int] = None,
) -> T.FrozenSet[Configuration]:
    """All non-empty sets of at most ``se`` candidate indexes of any one query."""
    if se < 1:
        raise InvalidInputError("se must be >= 1")
    if di is None:
        from mvtune.apps import get_config

        di = get_config().di
    pool = frozenset(pool)
    seeds = set()
    for q in W.queries:
        cand = sorted(planner.candidate_indexes(q, pool, di), key=lambda x: x.sort_key)
        for size in range(1, min(se, len(cand)) + 1):
            for combo in itertools.combinations(cand, size):
                seeds.add(Configuration(frozenset(combo)))
    return frozenset(seeds)


@dataclasses.dataclass(frozen=True)
class _Scored:
    configuration: Configuration
    plans: T.Mapping[str, T.Optional[QueryPlan]]
    cost: float
    storage: float

    @property
    def complete(self) -> bool:
        return all(p is not None for p in self.plans.values())

    @property
    def key(self):
        return (self.cost, self.configuration.sort_key)


class _Evaluator:
    """
    Plans the workload against configurations. A query with no candidate index is
    charged a full scan of every row so incomplete configurations can still be
    ranked; they are never returned as a result.
    """

    def __init__(
        self,
        W: Workload,
        ds: Dataset,
        ctx: planner.PlanningContext,
        storage: StorageModel,
        cache: PlanCache,
        threads: int = 1,
    ):
        self.W = W
        self.ds = ds
        self.ctx = ctx
        self.storage = storage
        self.cache = cache
        self.threads = max(threads, 1)
        self.evaluated = 0
        self._lock = threading.Lock()

    def storage_of(self, conf: Configuration) -> float:
        return est_storage(self.storage, conf, self.ds)

    def pruned(self, scored: _Scored) -> _Scored:
        """Drop indexes that no query plan uses."""
        used = set()
        for p in scored.plans.values():
            if p is not None:
                used |= p.indexes
        conf = scored.configuration.restricted_to(used)
        if conf == scored.configuration:
            return scored
        return dataclasses.replace(
            scored, configuration=conf, storage=self.storage_of(conf)
        )

    def fits(self, storage: float) -> bool:
        return storage <= self.W.storage_budget + 1e-9

    def evaluate(
        self, conf: Configuration, parent: T.Optional[_Scored] = None
    ) -> T.Optional[_Scored]:
        storage = self.storage_of(conf)
        if not self.fits(storage):
            return None
        with self._lock:
            self.evaluated += 1
        plans = {}
        terms = []
        for q in self.W.queries:
            X = planner.candidate_indexes(q, conf, self.ctx.di)
            found = None
            if X:
                key = PlanCache.key(q.qid, X)
                found = self.cache.get(key)
                if found is None:
                    try:
                        found = planner.plan(q, X, self.ctx, self.W.threshold_for(q))
                    except InfeasiblePlanError:
                        found = None
                    else:
                        self.cache.put(key, found)
                if found is not None and parent is not None:
                    found = planner.keep_cheaper(q, found, parent.plans.get(q.qid), X)
            plans[q.qid] = found
            cost = found.estimated_cost if found else q.dim * self.ctx.num_rows
            terms.append(q.probability * cost)
        return _Scored(conf, plans, math.fsum(terms), storage)

    def evaluate_all(
        self, items: T.Sequence[T.Tuple[Configuration, T.Optional[_Scored]]]
    ) -> T.List[T.Optional[_Scored]]:
        if self.threads == 1:
            return [self.evaluate(conf, parent) for conf, parent in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(lambda item: self.evaluate(*item), items))


def _cheapest(scored: T.Iterable[_Scored], width: int) -> T.List[_Scored]:
    best = {}
    for s in scored:
        seen = best.get(s.configuration)
        if seen is None or s.key < seen.key:
            best[s.configuration] = s
    return sorted(best.values(), key=lambda s: s.key)[:width]


def _result(
    best: _Scored,
    W: Workload,
    storage: StorageModel,
    trace,
    evaluated: int,
    label: str = "tuned",
    reference: bool = False,
) -> TunerResult:
    return TunerResult(
        configuration=best.configuration,
        plans={q.qid: best.plans[q.qid] for q in W.queries},
        workload_cost=best.cost,
        storage_used=best.storage,
        storage_budget=W.storage_budget,
        storage_unit=storage.unit,
        trace=tuple(trace),
        label=label,
        reference=reference,
        evaluated=evaluated,
    )


def _storage_model(models: TunerModels, W: Workload) -> StorageModel:
    return dataclasses.replace(models.storage, unit=W.storage_unit)


def _context(ds, models, ctx, di):
    if ctx is None:
        return planner.PlanningContext.create(ds, models, di=di)
    return ctx if ctx.di == di else dataclasses.replace(ctx, di=di)


def tune(
    W: Workload,
    ds: Dataset,
    models: TunerModels,
    params: T.Optional[SearchParams] = None,
    ctx: T.Optional[planner.PlanningContext] = None,
    initial: T.Iterable[TunerResult] = (),
    threads: T.Optional[int] = None,
) -> TunerResult:
    """
    Beam search for the cheapest configuration within the workload's storage
    budget. ``initial`` results (from a smaller budget) join the seeds with their
    plans unchanged.
    """
    from mvtune.apps import get_config

    params = params or SearchParams.from_settings()
    threads = get_config().threads if threads is None else threads
    W.validate_for(ds)
    ctx = _context(ds, models, ctx, params.di)
    storage = _storage_model(models, W)
    evaluator = _Evaluator(W, ds, ctx, storage, PlanCache(ctx.use_cache), threads)
    started = time.perf_counter()

    pool = sorted(candidate_pool(W, params.di), key=lambda x: x.sort_key)
    seeds = sorted(seed_configs(W, pool, params.se, params.di), key=lambda c: c.sort_key)
    logger.info(
        "Tuning %d queries: %d candidate indexes, %d seed configurations",
        len(W.queries),
        len(pool),
        len(seeds),
    )

    scored = [
        s for s in evaluator.evaluate_all([(c, None) for c in seeds]) if s is not None
    ]
    for previous in initial:
        storage_used = evaluator.storage_of(previous.configuration)
        if evaluator.fits(storage_used) and len(previous.configuration):
            scored.append(
                _Scored(
                    previous.configuration,
                    dict(previous.plans),
                    previous.workload_cost,
                    storage_used,
                )
            )
    if not scored:
        smallest = min((evaluator.storage_of(c) for c in seeds), default=0.0)
        raise InfeasibleWorkloadError(
            f"no seed configuration fits the storage budget {W.storage_budget:g}",
            "storage",
            {"budget": W.storage_budget, "smallest_seed": smallest},
        )

    complete = [s for s in scored if s.complete]
    best = min(complete, key=lambda s: s.key) if complete else None
    beam = _cheapest(scored, params.beam_width)
    trace = [best.cost if best else None]

    for iteration in range(1, params.max_iterations + 1):
        parents = {}
        for member in beam:
            for x in pool:
                if x not in member.configuration:
                    parents.setdefault(member.configuration.with_index(x), member)
        if not parents:
            break
        expanded = evaluator.evaluate_all(list(parents.items()))
        candidates = [
            evaluator.pruned(s) for s in expanded if s is not None and len(s.configuration)
        ]
        candidates = [s for s in candidates if len(s.configuration)]
        if not candidates:
            logger.info("Iteration %d: no expansion fits the budget", iteration)
            break

        for s in candidates:
            if s.complete and (best is None or s.key < best.key):
                best = s
        trace.append(best.cost if best else None)

        previous = beam[0].cost
        beam = _cheapest(candidates, params.beam_width)
        gain = (previous - beam[0].cost) / previous if previous > 0 else 0.0
        logger.info(
            "Iteration %d: %d expansion(s), beam best %.1f, improvement %.2f%%",
            iteration,
            len(parents),
            beam[0].cost,
            100 * gain,
        )
        if iteration > 1 and gain <= params.improvement and best is not None:
            break

    if best is None:
        raise InfeasibleWorkloadError(
            "no configuration within the storage budget gives every query a "
            "usable index",
            "recall",
            {"budget": W.storage_budget, "evaluated": evaluator.evaluated},
        )
    best = evaluator.pruned(best)
    logger.info(
        "Tuned configuration %s: cost %.1f, storage %g/%g, %d configuration(s) "
        "evaluated in %.2fs (plan cache %d hit(s), %d miss(es))",
        best.configuration,
        best.cost,
        best.storage,
        W.storage_budget,
        evaluator.evaluated,
        time.perf_counter() - started,
        evaluator.cache.hits,
        evaluator.cache.misses,
    )
    return _result(best, W, storage, trace, evaluator.evaluated)


def _fixed(W, ds, storage, conf, plan_for, label, reference):
    plans = {}
    for q in W.queries:
        plans[q.qid] = plan_for(q)
    cost = math.fsum(q.probability * plans[q.qid].estimated_cost for q in W.queries)
    scored = _Scored(conf, plans, cost, est_storage(storage, conf, ds))
    return _result(scored, W, storage, [cost], 1, label, reference)


def baseline_per_column(
    W: Workload,
    ds: Dataset,
    models: TunerModels,
    ctx: T.Optional[planner.PlanningContext] = None,
) -> TunerResult:
    """One single-column index per column any query uses."""
    W.validate_for(ds)
    ctx = _context(ds, models, ctx, None)
    conf = Configuration.of(*[[i] for i in sorted(W.column_ids)])
    return _fixed(
        W,
        ds,
        _storage_model(models, W),
        conf,
        lambda q: planner.plan(q, conf, ctx, W.threshold_for(q)),
        "per-column",
        False,
    )


def baseline_per_query(
    W: Workload,
    ds: Dataset,
    models: TunerModels,
    ctx: T.Optional[planner.PlanningContext] = None,
) -> TunerResult:
    """One index per distinct query column set; a reference that ignores storage."""
    W.validate_for(ds)
    ctx = _context(ds, models, ctx, None)
    conf = Configuration(frozenset(IndexDescriptor(q.vid) for q in W.queries))
    return _fixed(
        W,
        ds,
        _storage_model(models, W),
        conf,
        lambda q: planner.plan(q, [IndexDescriptor(q.vid)], ctx, W.threshold_for(q)),
        "per-query",
        True,
    )


def sweep(
    W: Workload,
    ds: Dataset,
    models: TunerModels,
    budgets: T.Iterable[float],
    params: T.Optional[SearchParams] = None,
    ctx: T.Optional[planner.PlanningContext] = None,
    threads: T.Optional[int] = None,
) -> T.List[TunerResult]:
    """Tune at increasing budgets, seeding every run with the previous result."""
    budgets = sorted(set(budgets))
    if not budgets:
        raise InvalidInputError("sweep needs at least one budget")
    params = params or SearchParams.from_settings()
    ctx = _context(ds, models, ctx, params.di)
    results = []
    for budget in budgets:
        run = dataclasses.replace(W, storage_budget=budget)
        results.append(
            tune(run, ds, models, params, ctx, initial=results[-1:], threads=threads)
        )
    return results
