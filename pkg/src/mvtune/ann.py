"""
A hierarchical navigable-small-world graph index over one or more concatenated
columns. Every score evaluation made while searching goes through a per-search
counting scorer, so ``SearchResult.num_dist`` is the exact number of items compared.
"""
import dataclasses
import heapq
import logging
import math
import struct
import time
import typing as T
from collections import deque
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from mvtune.domain import (
    Dataset,
    IndexDescriptor,
    Query,
    QueryPlan,
    partial_scores,
)
from mvtune.exceptions import (
    DimensionMismatchError,
    FormatError,
    IndexBuildError,
    InvalidInputError,
    MissingIndexError,
)

logger = logging.getLogger("mvtune.ann")

MAGIC = b"MVGI"
FORMAT_VERSION = 1
ABSENT = 0xFFFF


@dataclasses.dataclass(frozen=True)
class BuildParams:
    max_degree: int = 16
    ef_construction: int = 200
    ef_search_floor: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.max_degree < 1 or self.ef_construction < 1 or self.ef_search_floor < 1:
            raise InvalidInputError("graph index parameters must be positive")

    @classmethod
    def from_settings(cls, seed: T.Optional[int] = None, **overrides) -> "BuildParams":
        from mvtune.apps import get_config

        conf = get_config()
        values = dict(
            max_degree=conf.max_degree,
            ef_construction=conf.ef_construction,
            ef_search_floor=conf.ef_search_floor,
            seed=conf.seed if seed is None else seed,
        )
        values.update(overrides)
        return cls(**values)


@dataclasses.dataclass(frozen=True)
class SearchResult:
    ids: np.ndarray
    scores: np.ndarray
    num_dist: int

    def __len__(self):
        return len(self.ids)


class CountingScorer:
    """Scores rows against one query vector and counts every evaluation."""

    def __init__(self, vectors: np.ndarray, query: np.ndarray):
        self._vectors = vectors
        self._query = query
        self.count = 0

    def __call__(self, ids: T.Sequence[int]) -> np.ndarray:
        self.count += len(ids)
        if not len(ids):
            return np.empty(0, dtype=np.float32)
        return self._vectors[np.asarray(ids, dtype=np.int64)] @ self._query


def _ordered(ids: np.ndarray, scores: np.ndarray, limit: int):
    # best score first, ties by ascending row id
    order = np.lexsort((ids, -scores.astype(np.float64)))[:limit]
    return ids[order], scores[order]


def brute_force_search(vectors: np.ndarray, query: np.ndarray, ek: int) -> SearchResult:
    scorer = CountingScorer(vectors, query)
    ids = np.arange(vectors.shape[0], dtype=np.int64)
    scores = scorer(ids)
    ids, scores = _ordered(ids, scores, ek)
    return SearchResult(ids, scores, scorer.count)


class GraphIndex:
    """
    Graph index on ``descriptor``'s columns. ``layers[l]`` maps each node present at
    level ``l`` to its out-neighbors. Instances are treated as immutable once
    :func:`build` or :meth:`load` returns them, so concurrent searches are safe.
    """

    def __init__(
        self,
        descriptor: IndexDescriptor,
        vectors: np.ndarray,
        max_degree: int,
        ef_construction: int,
        ef_search_floor: int = 64,
    ):
        if vectors.ndim != 2 or not vectors.shape[0]:
            raise IndexBuildError("an index needs a non-empty 2-D matrix")
        self.descriptor = descriptor
        self.vectors = vectors
        self.max_degree = max_degree
        self.ef_construction = ef_construction
        self.ef_search_floor = ef_search_floor
        self.layers: T.List[T.Dict[int, T.List[int]]] = []
        self.entry_point = 0

    @property
    def num_rows(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __repr__(self):
        return (
            f"GraphIndex({self.descriptor}, rows={self.num_rows}, "
            f"levels={len(self.layers)}, max_degree={self.max_degree})"
        )

    # -- search -----------------------------------------------------------------

    def _search_layer(
        self,
        score: T.Callable[[T.Sequence[int]], np.ndarray],
        entry: T.List[T.Tuple[float, int]],
        level: int,
        ef: int,
    ) -> T.List[T.Tuple[float, int]]:
        """Best-first search of one layer; returns up to ``ef`` (score, id) pairs."""
        layer = self.layers[level]
        visited = {node for _, node in entry}
        candidates = [(-s, node) for s, node in entry]
        heapq.heapify(candidates)
        found = list(entry)
        heapq.heapify(found)
        while len(found) > ef:
            heapq.heappop(found)
        while candidates:
            neg, node = heapq.heappop(candidates)
            if -neg < found[0][0] and len(found) >= ef:
                break
            fresh = [n for n in layer.get(node, ()) if n not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            for s, n in zip(score(fresh).tolist(), fresh):
                if len(found) < ef or s > found[0][0]:
                    heapq.heappush(candidates, (-s, n))
                    heapq.heappush(found, (s, n))
                    if len(found) > ef:
                        heapq.heappop(found)
        return found

    def _descend(self, score, stop_level: int) -> T.List[T.Tuple[float, int]]:
        entry = [(float(score([self.entry_point])[0]), self.entry_point)]
        for level in range(len(self.layers) - 1, stop_level, -1):
            entry = self._search_layer(score, entry, level, 1)
        return entry

    def search(
        self, query: np.ndarray, ek: int, exhaustive_fallback: bool = True
    ) -> SearchResult:
        """
        Top-``ek`` rows by dot product with ``query``. The search breadth is
        ``max(ek, ef_search_floor)``. With ``exhaustive_fallback`` a request for at
        least every row is answered by a full scan.
        """
        query = np.asarray(query, dtype=np.float32).reshape(-1)
        if query.shape[0] != self.dim:
            raise DimensionMismatchError(
                f"query has dim {query.shape[0]}, index {self.descriptor} has {self.dim}"
            )
        if ek < 1:
            raise InvalidInputError("ek must be >= 1")
        if exhaustive_fallback and ek >= self.num_rows:
            return brute_force_search(self.vectors, query, ek)

        scorer = CountingScorer(self.vectors, query)
        entry = self._descend(scorer, 0)
        found = self._search_layer(scorer, entry, 0, max(ek, self.ef_search_floor))
        ids = np.fromiter((n for _, n in found), dtype=np.int64, count=len(found))
        scores = np.fromiter((s for s, _ in found), dtype=np.float32, count=len(found))
        ids, scores = _ordered(ids, scores, ek)
        return SearchResult(ids, scores, scorer.count)

    # -- construction -----------------------------------------------------------

    def _select_neighbors(
        self, candidates: T.List[T.Tuple[float, int]], limit: int
    ) -> T.List[int]:
        """
        Neighbor selection heuristic: a candidate is dropped when an already
        selected neighbor is more similar to it than the base point is.
        """
        ranked = sorted(candidates, key=lambda pair: (-pair[0], pair[1]))
        if len(ranked) <= limit:
            return [n for _, n in ranked]
        ids = np.fromiter((n for _, n in ranked), dtype=np.int64, count=len(ranked))
        sims = np.fromiter((s for s, _ in ranked), dtype=np.float64, count=len(ranked))
        block = self.vectors[ids]
        pairwise = (block @ block.T).astype(np.float64)
        selected: T.List[int] = []
        for j in range(len(ranked)):
            if len(selected) >= limit:
                break
            if not selected or np.all(pairwise[j, selected] <= sims[j]):
                selected.append(j)
        return [int(ids[j]) for j in selected]

    def _shrink(self, node: int, neighbors: T.List[int]) -> T.List[int]:
        sims = self.vectors[np.asarray(neighbors, dtype=np.int64)] @ self.vectors[node]
        return self._select_neighbors(
            list(zip(sims.astype(np.float64).tolist(), neighbors)), self.max_degree
        )

    def _insert(self, node: int, level: int) -> None:
        vector = self.vectors[node]

        def score(ids):
            return self.vectors[np.asarray(ids, dtype=np.int64)] @ vector

        top = len(self.layers) - 1
        entry = self._descend(score, level)
        for lc in range(min(level, top), -1, -1):
            found = self._search_layer(score, entry, lc, self.ef_construction)
            layer = self.layers[lc]
            neighbors = self._select_neighbors(found, self.max_degree)
            layer[node] = neighbors
            for n in neighbors:
                adjacency = layer[n]
                adjacency.append(node)
                if len(adjacency) > self.max_degree:
                    layer[n] = self._shrink(n, adjacency)
            entry = found
        for _ in range(top + 1, level + 1):
            self.layers.append({node: []})
        if level > top:
            self.entry_point = node

    def _mark_reachable(self, start: int, reached: np.ndarray) -> None:
        """Flag ``start`` and every base-layer node reachable from it."""
        if reached[start]:
            return
        base = self.layers[0]
        reached[start] = True
        queue = deque([start])
        while queue:
            for n in base[queue.popleft()]:
                if not reached[n]:
                    reached[n] = True
                    queue.append(n)

    def _reachable(self) -> np.ndarray:
        reached = np.zeros(self.num_rows, dtype=bool)
        self._mark_reachable(self.entry_point, reached)
        return reached

    def _unreachable(self) -> T.Set[int]:
        return {int(n) for n in np.flatnonzero(~self._reachable())}

    def _repair_connectivity(self) -> int:
        """
        Link every node unreachable from the entry point at the base layer to its
        most similar reachable node, preferring nodes with spare out-degree.
        Returns the number of edges added.
        """
        base = self.layers[0]
        reached = self._reachable()
        added = 0
        budget = 2 * self.num_rows
        while not reached.all():
            if added >= budget:
                raise IndexBuildError(
                    f"could not connect {int((~reached).sum())} node(s) of "
                    f"{self.descriptor}"
                )
            node = int(np.argmin(reached))
            reachable = np.flatnonzero(reached)
            sims = self.vectors[reachable] @ self.vectors[node]
            order = reachable[np.lexsort((reachable, -sims.astype(np.float64)))]
            spare = [int(n) for n in order if len(base[int(n)]) < self.max_degree]
            added += 1
            if spare:
                base[spare[0]].append(node)
                self._mark_reachable(node, reached)
                continue
            host = int(order[0])
            adjacency = base[host]
            worst = int(
                np.argmin(
                    self.vectors[np.asarray(adjacency, dtype=np.int64)]
                    @ self.vectors[host]
                )
            )
            adjacency[worst] = node
            # the replaced edge may have been the only way to reach some nodes
            reached = self._reachable()
        return added

    def check_invariants(self) -> None:
        for level, layer in enumerate(self.layers):
            for node, neighbors in layer.items():
                if len(neighbors) > self.max_degree:
                    raise IndexBuildError(
                        f"node {node} has degree {len(neighbors)} at level {level}"
                    )
        if len(self.layers[0]) != self.num_rows or self._unreachable():
            raise IndexBuildError(f"base layer of {self.descriptor} is not connected")
        if self.dim != self.vectors.shape[1]:
            raise IndexBuildError("descriptor width does not match stored vectors")

    # -- persistence ------------------------------------------------------------

    def to_bytes(self) -> bytes:
        columns = self.descriptor.columns
        parts = [
            MAGIC,
            struct.pack("<I", FORMAT_VERSION),
            struct.pack(f"<I{len(columns)}I", len(columns), *columns),
            struct.pack(
                "<IIII",
                self.max_degree,
                self.num_rows,
                self.entry_point,
                len(self.layers),
            ),
        ]
        for layer in self.layers:
            for node in range(self.num_rows):
                neighbors = layer.get(node)
                if neighbors is None:
                    parts.append(struct.pack("<H", ABSENT))
                else:
                    parts.append(
                        struct.pack(f"<H{len(neighbors)}I", len(neighbors), *neighbors)
                    )
        return b"".join(parts)

    def save(self, path) -> None:
        from mvtune.formats import atomic_write_bytes

        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes, ds: Dataset, params: BuildParams = None) -> "GraphIndex":
        params = params or BuildParams()
        if data[:4] != MAGIC:
            raise FormatError("not a graph index file (bad magic)")
        offset = 4
        try:
            (version,) = struct.unpack_from("<I", data, offset)
            offset += 4
            if version != FORMAT_VERSION:
                raise FormatError(f"unsupported graph index version {version}")
            (count,) = struct.unpack_from("<I", data, offset)
            offset += 4
            columns = struct.unpack_from(f"<{count}I", data, offset)
            offset += 4 * count
            max_degree, num_rows, entry_point, levels = struct.unpack_from(
                "<IIII", data, offset
            )
            offset += 16
            descriptor = IndexDescriptor(frozenset(columns))
            vectors = ds.concat(descriptor.vid)
            if vectors.shape[0] != num_rows:
                raise FormatError(
                    f"index has {num_rows} rows, dataset has {vectors.shape[0]}"
                )
            index = cls(
                descriptor,
                vectors,
                max_degree,
                params.ef_construction,
                params.ef_search_floor,
            )
            index.entry_point = entry_point
            for _ in range(levels):
                layer = {}
                for node in range(num_rows):
                    (degree,) = struct.unpack_from("<H", data, offset)
                    offset += 2
                    if degree == ABSENT:
                        continue
                    layer[node] = list(struct.unpack_from(f"<{degree}I", data, offset))
                    offset += 4 * degree
                index.layers.append(layer)
        except struct.error as exc:
            raise FormatError(f"truncated graph index file: {exc}") from exc
        if offset != len(data):
            raise FormatError("trailing bytes after graph index payload")
        return index

    @classmethod
    def load(cls, path, ds: Dataset, params: BuildParams = None) -> "GraphIndex":
        try:
            with open(path, "rb") as f:
                data = f.read()
        except OSError as exc:
            raise FormatError(f"cannot read {path}: {exc}") from exc
        return cls.from_bytes(data, ds, params)


def build(ds: Dataset, desc: IndexDescriptor, params: BuildParams = None) -> GraphIndex:
    """Build a graph index over the concatenation of ``desc``'s columns."""
    params = params or BuildParams()
    if not desc.vid <= ds.column_ids:
        raise InvalidInputError(f"{desc} references columns missing from the dataset")
    started = time.perf_counter()
    index = GraphIndex(
        desc,
        ds.concat(desc.vid),
        params.max_degree,
        params.ef_construction,
        params.ef_search_floor,
    )
    rng = np.random.default_rng(params.seed)
    level_mult = 1.0 / math.log(max(params.max_degree, 2))
    levels = np.floor(-np.log1p(-rng.random(index.num_rows)) * level_mult).astype(int)

    index.layers = [{0: []} for _ in range(levels[0] + 1)]
    index.entry_point = 0
    for node in range(1, index.num_rows):
        index._insert(node, int(levels[node]))

    repaired = index._repair_connectivity()
    index.check_invariants()
    logger.info(
        "Built %s over %d rows in %.2fs (%d levels, %d repair edge(s))",
        desc,
        index.num_rows,
        time.perf_counter() - started,
        len(index.layers),
        repaired,
    )
    return index


def search(x: GraphIndex, query: np.ndarray, ek: int, **kwargs) -> SearchResult:
    return x.search(query, ek, **kwargs)


def build_many(
    ds: Dataset,
    descriptors: T.Iterable[IndexDescriptor],
    params: BuildParams = None,
    threads: int = 1,
) -> T.Dict[IndexDescriptor, GraphIndex]:
    descriptors = sorted(set(descriptors), key=lambda x: x.sort_key)
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        built = list(pool.map(lambda d: build(ds, d, params), descriptors))
    return dict(zip(descriptors, built))


@dataclasses.dataclass(frozen=True)
class ExecutionResult:
    ids: np.ndarray
    scores: np.ndarray
    measured_cost: float
    retrieved: T.Dict[IndexDescriptor, np.ndarray]
    num_dist: T.Dict[IndexDescriptor, int]
    candidate_count: int
    elapsed: float


def execute_plan(
    q: Query,
    plan: QueryPlan,
    indexes: T.Mapping[IndexDescriptor, GraphIndex],
    ds: Dataset,
) -> ExecutionResult:
    """
    Scan every planned index for its ek, re-rank the union of retrieved rows by
    full score and return the top k. Duplicate rows count once for re-ranking but
    every retrieved ek counts towards the measured cost.
    """
    plan.check_usable(q)
    started = time.perf_counter()
    retrieved = {}
    num_dist = {}
    scan_cost = 0.0
    for x, ek in plan.assignments:
        index = indexes.get(x)
        if index is None:
            raise MissingIndexError(f"{x} is planned for {q.qid} but not built")
        result = index.search(q.vector_for(x.vid), ek)
        retrieved[x] = result.ids
        num_dist[x] = result.num_dist
        scan_cost += index.dim * result.num_dist

    pooled = [ids for ids in retrieved.values()]
    candidate_count = sum(len(ids) for ids in pooled)
    union = np.unique(np.concatenate(pooled)) if pooled else np.empty(0, dtype=np.int64)
    if len(union):
        scores = partial_scores(q, q.vid, ds, union)
        ids, scores = _ordered(union, scores, q.k)
    else:
        ids, scores = union, np.empty(0, dtype=np.float64)
    measured_cost = scan_cost + q.dim * plan.total_ek
    return ExecutionResult(
        ids=ids,
        scores=scores,
        measured_cost=measured_cost,
        retrieved=retrieved,
        num_dist=num_dist,
        candidate_count=candidate_count,
        elapsed=time.perf_counter() - started,
    )
