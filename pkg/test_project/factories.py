"""Small datasets, queries and models shared by the test modules."""
import typing as T

from mvtune.domain import Dataset, Query, Workload
from mvtune.estimators import TunerModels, seeded_query_vectors
from mvtune.synthetic import clustered_columns


def make_dataset(
    rows: int = 300, dims: T.Sequence[int] = (8, 6, 4), seed: int = 0, clusters: int = 8
) -> Dataset:
    return Dataset.from_arrays(clustered_columns(rows, dims, clusters, seed))


def make_query(
    ds: Dataset,
    vid: T.Iterable[int],
    k: int = 10,
    qid: str = "q1",
    probability: float = 1.0,
    seed: int = 0,
    recall_threshold: T.Optional[float] = None,
) -> Query:
    vid = frozenset(vid)
    return Query(
        vid,
        seeded_query_vectors(ds, vid, seed),
        k,
        probability,
        qid,
        recall_threshold,
    )


def make_workload(
    ds: Dataset,
    vids: T.Sequence[T.Iterable[int]],
    k: int = 10,
    recall_threshold: float = 0.9,
    storage_budget: float = 3,
    seed: int = 0,
    probabilities: T.Optional[T.Sequence[float]] = None,
) -> Workload:
    probabilities = probabilities or [1 / len(vids)] * len(vids)
    queries = tuple(
        make_query(ds, vid, k, f"q{i + 1}", p, seed + i)
        for i, (vid, p) in enumerate(zip(vids, probabilities))
    )
    return Workload(queries, recall_threshold, storage_budget)


def linear_models(
    ds: Dataset, a: float = 1.0, b: float = 0.0, c: float = 0.0, d: float = 1.0
) -> TunerModels:
    """
    Hand-set models. The defaults give cost_idx(x, ek) = dim(x) * ek and a recall
    estimate of 1, so planned ek values equal ground-truth ranks.
    """
    return TunerModels.from_coefficients(
        {col.id: (col.dim, a, b, c, d) for col in ds.columns}, ds.num_rows
    )
