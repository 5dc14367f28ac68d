"""
What-if query planning. For a query and the indexes of a configuration, find the
per-index extended-k values (EK) of minimum estimated cost whose retrieved sets
still cover enough ground-truth items. Only the ranks at which ground-truth items
appear in each index matter, so the search runs over that "relevant ek" grid.
"""
import dataclasses
import hashlib
import itertools
import logging
import math
import threading
import typing as T
from functools import cached_property

import numpy as np
from django.conf import settings
from django.core.cache import caches

from mvtune import oracle
from mvtune.domain import Configuration, CostIdx, Dataset, IndexDescriptor, Query, QueryPlan
from mvtune.estimators import TrainingSample, TunerModels, inflate_ek, scale_rank
from mvtune.exceptions import InfeasiblePlanError, InvalidInputError

logger = logging.getLogger("mvtune.planner")

EkMap = T.Callable[[IndexDescriptor, int], int]


def _identity(x: IndexDescriptor, rank: int) -> int:
    return rank


def _popcount(mask: int) -> int:
    return bin(mask).count("1")


def coverage_needed(threshold: float, k: int) -> int:
    """Number of ground-truth items a plan must cover: ceil(threshold * k)."""
    if not 0 < threshold <= 1:
        raise InvalidInputError(f"recall threshold {threshold} not in (0, 1]")
    return math.ceil(threshold * k - 1e-9)


@dataclasses.dataclass(frozen=True)
class RelevantEk:
    """
    ``ranks[x][j]`` is the rank in ``x`` of the j-th ground-truth item (0-based j).
    :meth:`entries` gives the sorted (rank, item) list with the (0, None) sentinel.
    """

    k: int
    ranks: T.Mapping[IndexDescriptor, T.Tuple[int, ...]]

    def __post_init__(self):
        for x, ranks in self.ranks.items():
            if len(ranks) != self.k:
                raise InvalidInputError(f"{x} has {len(ranks)} ranks, expected {self.k}")
            if any(r < 1 for r in ranks):
                raise InvalidInputError(f"{x} has a rank below 1")

    @classmethod
    def from_table(cls, table: oracle.RankTable) -> "RelevantEk":
        return cls(
            table.ground_truth.k,
            {x: tuple(int(r) for r in ranks) for x, ranks in table.ranks.items()},
        )

    @property
    def indexes(self) -> T.List[IndexDescriptor]:
        return sorted(self.ranks, key=lambda x: x.sort_key)

    def entries(self, x: IndexDescriptor) -> T.List[T.Tuple[int, T.Optional[int]]]:
        """(rank, 1-based ground-truth position) pairs, ascending, after (0, None)."""
        pairs = sorted((r, j + 1) for j, r in enumerate(self.ranks[x]))
        return [(0, None)] + pairs

    def grid(self, x: IndexDescriptor) -> T.List[int]:
        return [r for r, _ in self.entries(x)]

    def cumulative_masks(self, x: IndexDescriptor) -> T.List[int]:
        """Bitmask of ground-truth items covered at each grid position."""
        masks = [0]
        for _, j in self.entries(x)[1:]:
            masks.append(masks[-1] | (1 << (j - 1)))
        return masks

    def covered(self, ek: T.Mapping[IndexDescriptor, int]) -> int:
        """Bitmask of ground-truth items with rank <= ek in at least one index."""
        mask = 0
        for x, limit in ek.items():
            for j, r in enumerate(self.ranks[x]):
                if r <= limit:
                    mask |= 1 << j
        return mask


@dataclasses.dataclass(frozen=True)
class DpState:
    """One DP layer: cost and chosen ranks per cover bitmask of the sampled items."""

    cost: T.Tuple[float, ...]
    ranks: T.Tuple[T.Optional[T.Tuple[int, ...]], ...]

    @classmethod
    def initial(cls, kprime: int) -> "DpState":
        size = 1 << kprime
        return cls(
            (0.0,) + (math.inf,) * (size - 1),
            ((),) + (None,) * (size - 1),
        )

    def __len__(self):
        return len(self.cost)


def candidate_indexes(
    q: Query, conf: T.Iterable[IndexDescriptor], di: T.Optional[int]
) -> T.FrozenSet[IndexDescriptor]:
    """Indexes usable for q that miss at most ``di`` of its columns."""
    if di is not None and di < 0:
        raise InvalidInputError("di must be >= 0")
    floor = 0 if di is None else len(q.vid) - di
    return frozenset(x for x in conf if x.vid <= q.vid and len(x.vid) >= floor)


def relevant_ek(
    q: Query,
    X: T.Iterable[IndexDescriptor],
    gt: oracle.GroundTruth,
    ds: Dataset,
    cache_prefix: T.Optional[str] = None,
    cache_alias: str = "default",
) -> RelevantEk:
    """
    Ranks of every ground-truth item in every index of X. With ``cache_prefix`` the
    per-index rank lists are read from and stored in the Django cache.
    """
    X = list(X)
    if not X:
        raise InvalidInputError("relevant ek needs at least one index")
    cache = caches[cache_alias] if cache_prefix else None
    ranks = {}
    for x in X:
        key = None
        if cache is not None:
            key = f"{cache_prefix}:{q.fingerprint}:{'-'.join(map(str, x.columns))}"
            cached = cache.get(key)
            if cached is not None:
                ranks[x] = tuple(cached)
                continue
        ranks[x] = tuple(int(r) for r in oracle.ranks_under(q, x, ds, gt.ids))
        if cache is not None:
            cache.set(key, list(ranks[x]), None)
    return RelevantEk(gt.k, ranks)


def _grid_costs(q, x, rel, cost_idx, ek_map):
    eks, costs = [], []
    for rank in rel.grid(x):
        ek = ek_map(x, rank) if rank else 0
        eks.append(ek)
        costs.append(cost_idx(q, x, ek) + q.dim * ek if ek else 0.0)
    return eks, costs, rel.cumulative_masks(x)


def _plan_key(cost: float, eks: T.Sequence[int]):
    return (cost, sum(1 for e in eks if e), tuple(eks))


def plan_search(
    q: Query,
    X: T.Iterable[IndexDescriptor],
    rel: RelevantEk,
    threshold: float,
    cost_idx: CostIdx,
    ek_map: EkMap = _identity,
) -> QueryPlan:
    """
    Enumerate the relevant grid of every index but the last; for the last index
    keep the smallest grid position that still reaches the coverage target,
    moving it down as the other indexes cover more.
    """
    X = sorted(X, key=lambda x: x.sort_key)
    if not X:
        raise InfeasiblePlanError(f"no usable index for query {q.qid}")
    k = rel.k
    need = coverage_needed(threshold, k)
    tables = [_grid_costs(q, x, rel, cost_idx, ek_map) for x in X]
    *outer, (last_eks, last_costs, last_masks) = tables

    best = None
    pointer = k
    for combo in itertools.product(range(k + 1), repeat=len(outer)):
        if not combo or combo[-1] == 0:
            pointer = k
        union = 0
        cost = 0.0
        for (_, costs, masks), p in zip(outer, combo):
            union |= masks[p]
            cost += costs[p]
        if _popcount(union | last_masks[pointer]) < need:
            continue
        while pointer > 0 and _popcount(union | last_masks[pointer - 1]) >= need:
            pointer -= 1
        positions = combo + (pointer,)
        eks = [table[0][p] for table, p in zip(tables, positions)]
        key = _plan_key(cost + last_costs[pointer], eks)
        if best is None or key < best[0]:
            best = (key, positions)

    if best is None:
        raise InfeasiblePlanError(f"query {q.qid}: recall target unreachable")
    (cost, _, eks), positions = best
    covered = 0
    for (_, _, masks), p in zip(tables, positions):
        covered |= masks[p]
    return QueryPlan.of(
        dict(zip(X, eks)),
        estimated_cost=cost,
        estimated_recall=_popcount(covered) / k,
        algorithm="search",
        query_id=q.qid,
    )


def _sample_items(k: int, kprime: int, num_samples: int, seed: int):
    if kprime >= k:
        return [tuple(range(k))]
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(num_samples):
        items = tuple(sorted(int(j) for j in rng.choice(k, size=kprime, replace=False)))
        if items not in samples:
            samples.append(items)
    return samples


def _dp_over_sample(q, X, rel, items, need, cost_idx, ek_map):
    kp = len(items)
    full = (1 << kp) - 1
    state = DpState.initial(kp)
    for x in X:
        ranks = [rel.ranks[x][j] for j in items]
        max_rank = [0] * (full + 1)
        cover_cost = [0.0] * (full + 1)
        for cvr in range(1, full + 1):
            low = (cvr & -cvr).bit_length() - 1
            max_rank[cvr] = max(max_rank[cvr & (cvr - 1)], ranks[low])
            ek = ek_map(x, max_rank[cvr])
            cover_cost[cvr] = cost_idx(q, x, ek) + q.dim * ek

        cost = [math.inf] * (full + 1)
        chosen = [None] * (full + 1)
        for cover in range(full + 1):
            # empty sub-cover first: x is not used for this cover
            if state.ranks[cover] is not None:
                cost[cover] = state.cost[cover]
                chosen[cover] = state.ranks[cover] + (0,)
            sub = cover
            while sub:
                rest = cover ^ sub
                if state.ranks[rest] is not None:
                    value = state.cost[rest] + cover_cost[sub]
                    if value < cost[cover]:
                        cost[cover] = value
                        chosen[cover] = state.ranks[rest] + (max_rank[sub],)
                sub = (sub - 1) & cover
        state = DpState(tuple(cost), tuple(chosen))

    best = None
    for cover in range(full + 1):
        if _popcount(cover) < need or state.ranks[cover] is None:
            continue
        eks = [ek_map(x, r) if r else 0 for x, r in zip(X, state.ranks[cover])]
        key = _plan_key(state.cost[cover], eks)
        if best is None or key < best[0]:
            best = (key, state.ranks[cover])
    return best


def plan_dp(
    q: Query,
    X: T.Iterable[IndexDescriptor],
    rel: RelevantEk,
    threshold: float,
    kprime: int,
    num_samples: int,
    cost_idx: CostIdx,
    ek_map: EkMap = _identity,
    seed: int = 0,
) -> QueryPlan:
    """
    Sample k' ground-truth items and solve the set-cover DP over their power set,
    where covering a subset with one index costs a scan to the subset's worst
    rank. The cheapest plan over ``num_samples`` samples wins.
    """
    X = sorted(X, key=lambda x: x.sort_key)
    if not X:
        raise InfeasiblePlanError(f"no usable index for query {q.qid}")
    if kprime < 1:
        raise InvalidInputError("k' must be >= 1")
    kp = min(kprime, rel.k)
    need = coverage_needed(threshold, kp)

    best = None
    for items in _sample_items(rel.k, kp, max(num_samples, 1), seed):
        found = _dp_over_sample(q, X, rel, items, need, cost_idx, ek_map)
        if found is not None and (best is None or found[0] < best[0]):
            best = (found[0], found[1], items)
    if best is None:
        raise InfeasiblePlanError(f"query {q.qid}: recall target unreachable")

    (cost, _, eks), ranks, items = best
    limits = {x: r for x, r in zip(X, ranks) if r}
    covered = rel.covered(limits)
    hits = sum(1 for j in items if covered >> j & 1)
    return QueryPlan.of(
        dict(zip(X, eks)),
        estimated_cost=cost,
        estimated_recall=hits / len(items),
        algorithm="dp",
        query_id=q.qid,
        sample_based=len(items) < rel.k,
    )


@dataclasses.dataclass(eq=False)
class PlanningContext:
    """
    The ground-truth source and models a tuning run plans against. ``dataset`` is
    either the full dataset (``scale_factor`` 1) or the training sample, in which
    case ranks are scaled up to full-data rank space.
    """

    dataset: Dataset
    models: TunerModels
    num_rows: int
    scale_factor: float = 1.0
    di: T.Optional[int] = 2
    kprime: int = 5
    dp_samples: int = 3
    seed: int = 0
    use_cache: bool = True
    cache_alias: str = "default"
    gt_cache: T.Optional[oracle.GroundTruthCache] = None
    _ground_truths: T.Dict[str, oracle.GroundTruth] = dataclasses.field(
        default_factory=dict, repr=False
    )
    _lock: threading.Lock = dataclasses.field(default_factory=threading.Lock, repr=False)

    @classmethod
    def create(cls, ds: Dataset, models: TunerModels, **overrides) -> "PlanningContext":
        from mvtune.apps import get_config

        conf = get_config()
        values = dict(
            di=conf.di,
            kprime=conf.kprime,
            dp_samples=conf.dp_samples,
            seed=conf.seed,
            use_cache=conf.use_cache,
            cache_alias=conf.cache_alias,
            gt_cache=oracle.GroundTruthCache.from_settings(),
        )
        values.update(overrides)
        if ds.num_rows <= conf.exact_planning_rows:
            return cls(ds, models, ds.num_rows, 1.0, **values)
        meta = models.metadata
        sample = TrainingSample.draw(
            ds,
            fraction=meta.get("fraction"),
            num_queries=meta.get("num_queries"),
            seed=meta.get("seed"),
        )
        logger.info(
            "Planning on a %d-row sample (scale factor %.2f)",
            sample.size,
            sample.scale_factor,
        )
        return cls(
            sample.dataset(ds), models, ds.num_rows, sample.scale_factor, **values
        )

    @property
    def sample_based(self) -> bool:
        return self.scale_factor != 1.0

    @cached_property
    def fingerprint(self) -> str:
        digest = hashlib.sha1(
            f"{self.dataset.fingerprint}:{self.scale_factor!r}".encode()
        )
        return digest.hexdigest()

    @property
    def cache_prefix(self) -> T.Optional[str]:
        if not self.use_cache or self.cache_alias not in settings.CACHES:
            return None
        return f"mvtune:relek:{self.fingerprint}"

    def ground_truth_size(self, q: Query) -> int:
        """All k items, on the sample too; their ranks are scaled up afterwards."""
        return min(q.k, self.dataset.num_rows)

    def ground_truth(self, q: Query) -> oracle.GroundTruth:
        with self._lock:
            gt = self._ground_truths.get(q.fingerprint)
        if gt is None:
            gt = oracle.ground_truth(
                q, self.dataset, self.ground_truth_size(q), self.gt_cache
            )
            with self._lock:
                self._ground_truths[q.fingerprint] = gt
        return gt

    def ek_map(self, x: IndexDescriptor, rank: int) -> int:
        """Full-scale, recall-inflated ek for a rank observed on ``dataset``."""
        return inflate_ek(
            self.models.recall, x, scale_rank(rank, self.scale_factor), self.num_rows
        )

    def cost_idx(self, q: Query, x: IndexDescriptor, ek: int) -> float:
        return self.models.cost_idx(q, x, ek)

    def without_column_filter(self) -> "PlanningContext":
        return dataclasses.replace(self, di=None)


def keep_cheaper(
    q: Query,
    result: QueryPlan,
    baseline: T.Optional[QueryPlan],
    X: T.AbstractSet[IndexDescriptor],
) -> QueryPlan:
    """``baseline`` if all its indexes are in X and it is strictly cheaper."""
    if (
        baseline is not None
        and baseline.indexes <= X
        and baseline.estimated_cost < result.estimated_cost
    ):
        logger.debug("Query %s keeps its previous plan", q.qid)
        return dataclasses.replace(baseline, query_id=q.qid)
    return result


def plan(
    q: Query,
    conf: T.Union[Configuration, T.Iterable[IndexDescriptor]],
    ctx: PlanningContext,
    threshold: float,
    baseline: T.Optional[QueryPlan] = None,
) -> QueryPlan:
    """
    Best plan for q over the candidate indexes of ``conf``: exhaustive relevant-ek
    search for up to three indexes, sampled DP beyond. A ``baseline`` plan whose
    indexes are all still candidates is returned instead when it is cheaper.
    """
    X = candidate_indexes(q, conf, ctx.di)
    if not X:
        raise InfeasiblePlanError(f"no candidate index for query {q.qid}")
    gt = ctx.ground_truth(q)
    rel = relevant_ek(q, X, gt, ctx.dataset, ctx.cache_prefix, ctx.cache_alias)
    if len(X) <= 3:
        result = plan_search(q, X, rel, threshold, ctx.cost_idx, ctx.ek_map)
    else:
        result = plan_dp(
            q,
            X,
            rel,
            threshold,
            ctx.kprime,
            ctx.dp_samples,
            ctx.cost_idx,
            ctx.ek_map,
            ctx.seed,
        )
    if ctx.sample_based and not result.sample_based:
        result = dataclasses.replace(result, sample_based=True)

    if baseline is not None:
        return keep_cheaper(q, result, baseline, X)
    logger.debug(
        "Query %s: %s plan over %d index(es), cost %.1f",
        q.qid,
        result.algorithm,
        len(X),
        result.estimated_cost,
    )
    return result
