"""
Synthetic multi-column data and workloads. Rows share a latent cluster label
across columns, each column with its own cluster centers, so the columns are
correlated the way several embeddings of one item are.
"""
import dataclasses
import logging
import typing as T

import numpy as np

from mvtune.domain import Dataset
from mvtune.exceptions import InvalidInputError
from mvtune.formats import WorkloadFile

logger = logging.getLogger("mvtune.synthetic")

MIN_ROWS = 100


@dataclasses.dataclass(frozen=True)
class Preset:
    dims: T.Tuple[int, ...]
    num_queries: int
    p: T.Optional[float] = None
    query_vids: T.Optional[T.Tuple[T.Tuple[int, ...], ...]] = None
    recall_threshold: float = 0.9
    k: int = 100

    @property
    def storage_budget(self) -> int:
        return len(self.dims)


PRESETS = {
    "naive": Preset(
        dims=(100, 128, 200),
        num_queries=4,
        query_vids=((1,), (1, 2), (2, 3), (1, 2, 3)),
    ),
    "bisimple": Preset(dims=(25, 50, 100, 200, 128, 96, 100, 200), num_queries=12, p=0.3),
    "bicomplex": Preset(
        dims=(25, 50, 100, 200, 128, 96, 100, 200), num_queries=12, p=0.5
    ),
    "news": Preset(
        dims=(512, 512, 768, 768), num_queries=6, p=0.5, recall_threshold=0.97
    ),
}


def clustered_columns(
    rows: int,
    dims: T.Sequence[int],
    clusters: int = 32,
    seed: int = 0,
    spread: float = 0.5,
) -> T.List[np.ndarray]:
    """Gaussian clusters around unit centers; the cluster of a row is shared by all columns."""
    if rows < MIN_ROWS:
        raise InvalidInputError(f"at least {MIN_ROWS} rows are needed, got {rows}")
    if clusters < 1 or not dims or min(dims) < 1:
        raise InvalidInputError("clusters and dims must be positive")
    rng = np.random.default_rng(seed)
    labels = rng.integers(clusters, size=rows)
    columns = []
    for dim in dims:
        centers = rng.normal(size=(clusters, dim))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        noise = rng.normal(scale=spread / np.sqrt(dim), size=(rows, dim))
        columns.append((centers[labels] + noise).astype(np.float32))
    return columns


def generate_dataset(
    rows: int,
    dims: T.Sequence[int],
    clusters: int = 32,
    seed: int = 0,
    names: T.Optional[T.Sequence[str]] = None,
) -> Dataset:
    return Dataset.from_arrays(clustered_columns(rows, dims, clusters, seed), names)


def sample_query_vids(
    num_columns: int, num_queries: int, p: float, rng: np.random.Generator
) -> T.List[T.Tuple[int, ...]]:
    """Each column joins a query with probability p; empty column sets are redrawn."""
    if not 0 < p <= 1:
        raise InvalidInputError("p must be in (0, 1]")
    vids = []
    while len(vids) < num_queries:
        mask = rng.random(num_columns) < p
        if mask.any():
            vids.append(tuple(int(i) + 1 for i in np.flatnonzero(mask)))
    return vids


def sample_probabilities(n: int, rng: np.random.Generator) -> np.ndarray:
    weights = 1.0 - rng.random(n)
    return weights / weights.sum()


def generate_workload(
    ds: Dataset,
    num_queries: int,
    p: T.Optional[float] = None,
    query_vids: T.Optional[T.Sequence[T.Sequence[int]]] = None,
    k: int = 100,
    recall_threshold: float = 0.9,
    storage_budget: T.Optional[float] = None,
    seed: int = 0,
) -> WorkloadFile:
    """
    A seed-based workload file: query vectors are perturbed dataset rows
    regenerated from each query's stored seed.
    """
    rng = np.random.default_rng([seed, 1])
    if query_vids is None:
        if p is None:
            raise InvalidInputError("either p or explicit query column sets are needed")
        query_vids = sample_query_vids(len(ds.columns), num_queries, p, rng)
    query_vids = [tuple(sorted(int(i) for i in vid)) for vid in query_vids]
    probabilities = sample_probabilities(len(query_vids), rng)
    seeds = rng.integers(2**31 - 1, size=len(query_vids))
    queries = [
        {
            "id": f"q{i + 1}",
            "vid": list(vid),
            "k": k,
            "probability": float(prob),
            "seed": int(s),
        }
        for i, (vid, prob, s) in enumerate(zip(query_vids, probabilities, seeds))
    ]
    used = sorted({i for vid in query_vids for i in vid})
    columns = [
        {"id": c.id, "dim": c.dim, "name": c.name} for c in ds.columns if c.id in used
    ]
    budget = len(used) if storage_budget is None else storage_budget
    logger.info(
        "Generated %d queries over %d column(s), mean width %.2f",
        len(queries),
        len(used),
        float(np.mean([len(v) for v in query_vids])),
    )
    return WorkloadFile(tuple(columns), tuple(queries), recall_threshold, float(budget))


def generate_preset(
    name: str, rows: int, clusters: int = 32, seed: int = 0, k: T.Optional[int] = None
) -> T.Tuple[Dataset, WorkloadFile]:
    try:
        preset = PRESETS[name]
    except KeyError:
        raise InvalidInputError(
            f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}"
        ) from None
    ds = generate_dataset(rows, preset.dims, clusters, seed)
    workload = generate_workload(
        ds,
        preset.num_queries,
        p=preset.p,
        query_vids=preset.query_vids,
        k=preset.k if k is None else k,
        recall_threshold=preset.recall_threshold,
        storage_budget=preset.storage_budget,
        seed=seed,
    )
    return ds, workload
