"""
Domain types shared by every other module, and the exact score arithmetic of
multi-vector search: the score of a row for a query is the sum, over the query's
columns, of the dot product between the query vector and the stored vector. Stored
vectors are unit-normalized at ingestion, so each term is a cosine similarity.
"""
import dataclasses
import hashlib
import logging
import math
import typing as T
from functools import cached_property

import numpy as np

from mvtune.exceptions import (
    DimensionMismatchError,
    InvalidInputError,
    InvalidQueryError,
    UnusableIndexError,
)

logger = logging.getLogger("mvtune")

STORAGE_UNITS = ("index-count", "bytes")


@dataclasses.dataclass(frozen=True)
class ColumnSpec:
    id: int
    dim: int
    name: str = ""

    def __post_init__(self):
        if self.id < 0:
            raise InvalidInputError(f"column id must be non-negative, got {self.id}")
        if self.dim < 1:
            raise InvalidInputError(f"column {self.id} has dim {self.dim} < 1")


def normalize_rows(matrix: np.ndarray, label: str = "") -> np.ndarray:
    """
    Return a float32 copy of ``matrix`` with every row scaled to unit L2 norm. Zero
    rows are replaced by the basis vector e_1, with a warning.
    """
    out = np.array(matrix, dtype=np.float32, copy=True)
    if out.ndim == 1:
        out = out.reshape(1, -1)
    norms = np.linalg.norm(out, axis=1)
    zero = norms == 0
    if zero.any():
        logger.warning(
            "Replaced %d zero vector(s) by e_1 while normalizing %s",
            int(zero.sum()),
            label or "vectors",
        )
        out[zero] = 0.0
        out[zero, 0] = 1.0
        norms[zero] = 1.0
    out /= norms[:, None].astype(np.float32)
    return out


def normalize_vector(vector: np.ndarray, label: str = "") -> np.ndarray:
    return normalize_rows(np.asarray(vector).reshape(1, -1), label)[0]


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
    """
    Per-column matrices of unit-normalized float32 vectors sharing one row count.
    Build instances with :meth:`from_arrays`, which normalizes; the constructor only
    validates shapes. ``source_rows`` maps rows of a sampled dataset back to the
    rows of the dataset it was drawn from.
    """

    columns: T.Tuple[ColumnSpec, ...]
    matrices: T.Mapping[int, np.ndarray]
    source_rows: T.Optional[np.ndarray] = None
    _concat_cache: T.Dict[T.Tuple[int, ...], np.ndarray] = dataclasses.field(
        default_factory=dict, repr=False, compare=False
    )

    def __post_init__(self):
        if not self.columns:
            raise InvalidInputError("a dataset needs at least one column")
        ids = [c.id for c in self.columns]
        if sorted(ids) != list(range(1, len(ids) + 1)):
            raise InvalidInputError(
                f"column ids must be distinct and contiguous from 1, got {ids}"
            )
        rows = None
        for col in self.columns:
            matrix = self.matrices.get(col.id)
            if matrix is None:
                raise InvalidInputError(f"no vectors for column {col.id}")
            if matrix.ndim != 2 or matrix.shape[1] != col.dim:
                raise DimensionMismatchError(
                    f"column {col.id} expects dim {col.dim}, got shape {matrix.shape}"
                )
            if rows is None:
                rows = matrix.shape[0]
            elif matrix.shape[0] != rows:
                raise InvalidInputError(
                    f"column {col.id} has {matrix.shape[0]} rows, expected {rows}"
                )
            matrix.flags.writeable = False
        if not rows:
            raise InvalidInputError("a dataset needs at least one row")

    @classmethod
    def from_arrays(
        cls,
        arrays: T.Sequence[np.ndarray],
        names: T.Optional[T.Sequence[str]] = None,
    ) -> "Dataset":
        """Ingest raw column matrices; column ids are assigned 1..m in order."""
        names = list(names) if names is not None else [""] * len(arrays)
        columns = []
        matrices = {}
        for i, (array, name) in enumerate(zip(arrays, names), start=1):
            array = np.asarray(array)
            if array.ndim != 2:
                raise InvalidInputError(f"column {i} must be a 2-D matrix")
            columns.append(ColumnSpec(i, int(array.shape[1]), name or f"col{i}"))
            matrices[i] = normalize_rows(array, f"column {i}")
        return cls(tuple(columns), matrices)

    @property
    def num_rows(self) -> int:
        return int(self.matrices[self.columns[0].id].shape[0])

    @property
    def column_ids(self) -> T.FrozenSet[int]:
        return frozenset(c.id for c in self.columns)

    @cached_property
    def dims(self) -> T.Dict[int, int]:
        return {c.id: c.dim for c in self.columns}

    def matrix(self, column_id: int) -> np.ndarray:
        try:
            return self.matrices[column_id]
        except KeyError:
            raise InvalidQueryError(f"unknown column id {column_id}") from None

    def dim(self, vid: T.Iterable[int]) -> int:
        return sum(self.dims[i] for i in vid)

    def concat(self, vid: T.Iterable[int]) -> np.ndarray:
        """Physical concatenation of the columns in ``vid``, in ascending id order."""
        key = tuple(sorted(vid))
        cached = self._concat_cache.get(key)
        if cached is None:
            if len(key) == 1:
                cached = self.matrix(key[0])
            else:
                cached = np.ascontiguousarray(
                    np.hstack([self.matrix(i) for i in key]), dtype=np.float32
                )
                cached.flags.writeable = False
            self._concat_cache[key] = cached
        return cached

    def subset(self, rows: T.Sequence[int]) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        matrices = {c.id: self.matrices[c.id][rows].copy() for c in self.columns}
        source = rows if self.source_rows is None else self.source_rows[rows]
        return Dataset(self.columns, matrices, source_rows=source)

    @cached_property
    def fingerprint(self) -> str:
        digest = hashlib.sha1()
        for col in self.columns:
            digest.update(f"{col.id}:{col.dim}:".encode())
            digest.update(np.ascontiguousarray(self.matrices[col.id]).tobytes())
        return digest.hexdigest()


@dataclasses.dataclass(frozen=True, eq=False)
class Query:
    """
    A top-k query on the columns ``vid``. ``recall_threshold`` optionally overrides
    the workload's threshold for this query.
    """

    vid: T.FrozenSet[int]
    vectors: T.Mapping[int, np.ndarray]
    k: int
    probability: float = 1.0
    qid: str = ""
    recall_threshold: T.Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "vid", frozenset(self.vid))
        if not self.vid:
            raise InvalidQueryError("a query needs at least one column")
        if set(self.vectors) != set(self.vid):
            raise InvalidQueryError(
                f"query {self.qid}: vectors given for {sorted(self.vectors)}, "
                f"columns are {sorted(self.vid)}"
            )
        vectors = {}
        for i, vec in self.vectors.items():
            vec = np.array(vec, dtype=np.float32).reshape(-1)
            vec.flags.writeable = False
            vectors[i] = vec
        object.__setattr__(self, "vectors", vectors)
        if self.k < 1:
            raise InvalidQueryError(f"query {self.qid}: k must be positive")
        if not 0 < self.probability <= 1:
            raise InvalidQueryError(
                f"query {self.qid}: probability {self.probability} not in (0, 1]"
            )
        if self.recall_threshold is not None and not 0 < self.recall_threshold <= 1:
            raise InvalidQueryError(
                f"query {self.qid}: recall threshold not in (0, 1]"
            )

    @property
    def dim(self) -> int:
        return sum(len(v) for v in self.vectors.values())

    @property
    def columns(self) -> T.Tuple[int, ...]:
        return tuple(sorted(self.vid))

    def vector_for(self, vid: T.Iterable[int]) -> np.ndarray:
        """Concatenated query vector over ``vid`` in ascending id order."""
        key = sorted(vid)
        if not set(key) <= self.vid:
            raise UnusableIndexError(
                f"columns {key} are not a subset of query columns {self.columns}"
            )
        if len(key) == 1:
            return self.vectors[key[0]]
        return np.concatenate([self.vectors[i] for i in key])

    def validate_for(self, ds: Dataset) -> None:
        for i in self.vid:
            if i not in ds.dims:
                raise InvalidQueryError(f"query {self.qid}: unknown column id {i}")
            if len(self.vectors[i]) != ds.dims[i]:
                raise DimensionMismatchError(
                    f"query {self.qid}: column {i} vector has dim "
                    f"{len(self.vectors[i])}, dataset has {ds.dims[i]}"
                )

    @cached_property
    def fingerprint(self) -> str:
        digest = hashlib.sha1(f"{self.qid}|{self.k}|{self.columns}".encode())
        for i in self.columns:
            digest.update(self.vectors[i].tobytes())
        return digest.hexdigest()

    def with_probability(self, probability: float) -> "Query":
        return dataclasses.replace(self, probability=probability)


@dataclasses.dataclass(frozen=True, eq=False)
class Workload:
    queries: T.Tuple[Query, ...]
    recall_threshold: float
    storage_budget: float
    storage_unit: str = "index-count"

    def __post_init__(self):
        queries = tuple(self.queries)
        if not queries:
            raise InvalidInputError("a workload needs at least one query")
        if not 0 < self.recall_threshold <= 1:
            raise InvalidInputError("recall threshold must be in (0, 1]")
        if self.storage_budget <= 0:
            raise InvalidInputError("storage budget must be positive")
        if self.storage_unit not in STORAGE_UNITS:
            raise InvalidInputError(f"unknown storage unit {self.storage_unit!r}")
        qids = [q.qid for q in queries]
        if len(set(qids)) != len(qids):
            raise InvalidInputError("query ids must be unique within a workload")

        total = math.fsum(q.probability for q in queries)
        if abs(total - 1.0) > 1e-6:
            if 0.9 <= total <= 1.1:
                logger.warning(
                    "Query probabilities sum to %.6f; renormalizing to 1", total
                )
                queries = tuple(q.with_probability(q.probability / total) for q in queries)
            else:
                raise InvalidInputError(
                    f"query probabilities sum to {total:.6f}, expected 1"
                )
        object.__setattr__(self, "queries", queries)

    def threshold_for(self, q: Query) -> float:
        return q.recall_threshold if q.recall_threshold is not None else self.recall_threshold

    def validate_for(self, ds: Dataset) -> None:
        for q in self.queries:
            q.validate_for(ds)

    @property
    def column_ids(self) -> T.FrozenSet[int]:
        return frozenset().union(*(q.vid for q in self.queries))


@dataclasses.dataclass(frozen=True)
class IndexDescriptor:
    """A (hypothetical or built) graph index on the concatenation of ``vid``."""

    vid: T.FrozenSet[int]

    def __post_init__(self):
        object.__setattr__(self, "vid", frozenset(self.vid))
        if not self.vid:
            raise InvalidInputError("an index needs at least one column")

    @classmethod
    def of(cls, *columns: int) -> "IndexDescriptor":
        return cls(frozenset(columns))

    @property
    def columns(self) -> T.Tuple[int, ...]:
        return tuple(sorted(self.vid))

    @property
    def sort_key(self) -> T.Tuple[int, T.Tuple[int, ...]]:
        return (len(self.vid), self.columns)

    def dim(self, dims: T.Union[Dataset, T.Mapping[int, int]]) -> int:
        dims = dims.dims if isinstance(dims, Dataset) else dims
        return sum(dims[i] for i in self.vid)

    def usable_for(self, q: Query) -> bool:
        return self.vid <= q.vid

    def __str__(self):
        return "x^{" + ",".join(str(i) for i in self.columns) + "}"


@dataclasses.dataclass(frozen=True)
class Configuration:
    indexes: T.FrozenSet[IndexDescriptor] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "indexes", frozenset(self.indexes))

    @classmethod
    def of(cls, *vids: T.Iterable[int]) -> "Configuration":
        return cls(frozenset(IndexDescriptor(frozenset(v)) for v in vids))

    def __len__(self):
        return len(self.indexes)

    def __iter__(self) -> T.Iterator[IndexDescriptor]:
        return iter(self.sorted())

    def __contains__(self, x: IndexDescriptor) -> bool:
        return x in self.indexes

    def sorted(self) -> T.List[IndexDescriptor]:
        return sorted(self.indexes, key=lambda x: x.sort_key)

    def with_index(self, x: IndexDescriptor) -> "Configuration":
        return Configuration(self.indexes | {x})

    def restricted_to(self, keep: T.Iterable[IndexDescriptor]) -> "Configuration":
        return Configuration(self.indexes & frozenset(keep))

    @property
    def sort_key(self) -> T.Tuple:
        return (len(self.indexes), tuple(x.sort_key for x in self.sorted()))

    def as_lists(self) -> T.List[T.List[int]]:
        return [list(x.columns) for x in self.sorted()]

    def __str__(self):
        return "{" + ", ".join(str(x) for x in self.sorted()) + "}"


@dataclasses.dataclass(frozen=True)
class QueryPlan:
    """
    Per-index extended-k assignments for one query, with the estimated cost and
    recall. Entries with ek = 0 are never stored.
    """

    assignments: T.Tuple[T.Tuple[IndexDescriptor, int], ...]
    estimated_cost: float = 0.0
    estimated_recall: float = 0.0
    algorithm: str = "search"
    query_id: str = ""
    sample_based: bool = False

    def __post_init__(self):
        for x, ek in self.assignments:
            if ek < 1:
                raise InvalidInputError(f"ek for {x} must be >= 1, got {ek}")
        if self.estimated_cost < 0:
            raise InvalidInputError("estimated cost must be non-negative")

    @classmethod
    def of(cls, assignments: T.Mapping[IndexDescriptor, int], **kwargs) -> "QueryPlan":
        pairs = tuple(
            sorted(
                ((x, int(ek)) for x, ek in assignments.items() if ek > 0),
                key=lambda pair: pair[0].sort_key,
            )
        )
        return cls(pairs, **kwargs)

    @property
    def ek(self) -> T.Dict[IndexDescriptor, int]:
        return dict(self.assignments)

    @property
    def indexes(self) -> T.FrozenSet[IndexDescriptor]:
        return frozenset(x for x, _ in self.assignments)

    @property
    def total_ek(self) -> int:
        return sum(ek for _, ek in self.assignments)

    def check_usable(self, q: Query) -> None:
        for x, _ in self.assignments:
            if not x.usable_for(q):
                raise UnusableIndexError(f"{x} is not usable for query {q.qid}")

    def to_dict(self) -> T.Dict[str, T.Any]:
        return {
            "query_id": self.query_id,
            "assignments": [{"vid": list(x.columns), "ek": ek} for x, ek in self.assignments],
            "est_cost": self.estimated_cost,
            "est_recall": self.estimated_recall,
            "algorithm": self.algorithm,
            "sample_based": self.sample_based,
        }

    @classmethod
    def from_dict(cls, data: T.Mapping[str, T.Any]) -> "QueryPlan":
        return cls.of(
            {IndexDescriptor(frozenset(a["vid"])): int(a["ek"]) for a in data["assignments"]},
            estimated_cost=float(data.get("est_cost", 0.0)),
            estimated_recall=float(data.get("est_recall", 0.0)),
            algorithm=data.get("algorithm", "search"),
            query_id=data.get("query_id", ""),
            sample_based=bool(data.get("sample_based", False)),
        )


CostIdx = T.Callable[[Query, IndexDescriptor, int], float]


def partial_scores(
    q: Query,
    vid: T.Iterable[int],
    ds: Dataset,
    rows: T.Optional[T.Sequence[int]] = None,
) -> np.ndarray:
    """
    Scores of ``rows`` (all rows by default) summed over the columns in ``vid``, as
    float64. Every score in the package is computed through this function so that
    rankings agree bit for bit.
    """
    total = None
    for i in sorted(vid):
        matrix = ds.matrix(i)
        if rows is not None:
            matrix = matrix[np.asarray(rows, dtype=np.int64)]
        part = (matrix @ q.vectors[i]).astype(np.float64)
        total = part if total is None else total + part
    return total


def full_score(q: Query, row_id: int, ds: Dataset) -> float:
    for i in q.vid:
        ds.matrix(i)
    if not 0 <= row_id < ds.num_rows:
        raise InvalidInputError(f"row {row_id} out of range")
    return float(partial_scores(q, q.vid, ds, [row_id])[0])


def partial_score(q: Query, x: IndexDescriptor, row_id: int, ds: Dataset) -> float:
    if not x.usable_for(q):
        raise UnusableIndexError(f"{x} is not usable for query {q.qid}")
    if not 0 <= row_id < ds.num_rows:
        raise InvalidInputError(f"row {row_id} out of range")
    return float(partial_scores(q, x.vid, ds, [row_id])[0])


def plan_cost(q: Query, plan: QueryPlan, cost_idx: CostIdx) -> float:
    """Index-scan costs plus the re-rank cost q.dim * sum(ek)."""
    scan = math.fsum(cost_idx(q, x, ek) for x, ek in plan.assignments)
    return scan + q.dim * plan.total_ek
