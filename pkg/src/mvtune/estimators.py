"""
What-if estimators fitted on a sample of the data: a linear model of the number of
score evaluations an index scan makes as a function of ek, a logarithmic model of
the scan's recall, and the storage footprint of a configuration. Multi-column
indexes are never trained; their coefficients average those of their columns.
"""
import dataclasses
import logging
import math
import time
import typing as T
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from sklearn.linear_model import LinearRegression
from sklearn.metrics import r2_score

from mvtune import ann
from mvtune.domain import (
    STORAGE_UNITS,
    Configuration,
    Dataset,
    IndexDescriptor,
    Query,
    normalize_rows,
)
from mvtune.exceptions import InvalidInputError, TrainingError

logger = logging.getLogger("mvtune.estimators")

QUERY_NOISE = 0.1
MIN_RECALL_FOR_INFLATION = 0.1


def perturbed_rows(
    matrix: np.ndarray,
    rows: T.Sequence[int],
    rng: np.random.Generator,
    noise: float = QUERY_NOISE,
) -> np.ndarray:
    """Stored rows plus N(0, noise^2) per component, renormalized."""
    base = matrix[np.asarray(rows, dtype=np.int64)].astype(np.float64)
    return normalize_rows(base + rng.normal(0.0, noise, size=base.shape))


def seeded_query_vectors(
    ds: Dataset, vid: T.Iterable[int], seed: int, noise: float = QUERY_NOISE
) -> T.Dict[int, np.ndarray]:
    """Query vectors regenerated from ``seed``: one perturbed dataset row."""
    rng = np.random.default_rng(seed)
    row = int(rng.integers(ds.num_rows))
    return {
        i: perturbed_rows(ds.matrix(i), [row], rng, noise)[0] for i in sorted(vid)
    }


@dataclasses.dataclass(frozen=True)
class TrainingSample:
    """
    Rows drawn uniformly without replacement for estimator training, and held-out
    rows from which training queries are generated.
    """

    sample_rows: np.ndarray
    query_rows: np.ndarray
    num_rows: int
    seed: int
    fraction: float

    def __post_init__(self):
        if len(np.unique(self.sample_rows)) != len(self.sample_rows):
            raise InvalidInputError("sample rows must be distinct")

    @property
    def size(self) -> int:
        return len(self.sample_rows)

    @property
    def scale_factor(self) -> float:
        return self.num_rows / self.size

    @classmethod
    def draw(
        cls,
        ds: Dataset,
        fraction: T.Optional[float] = None,
        min_rows: T.Optional[int] = None,
        num_queries: T.Optional[int] = None,
        seed: T.Optional[int] = None,
    ) -> "TrainingSample":
        from mvtune.apps import get_config

        conf = get_config()
        fraction = conf.sample_fraction if fraction is None else fraction
        min_rows = conf.sample_min_rows if min_rows is None else min_rows
        num_queries = conf.train_queries if num_queries is None else num_queries
        seed = conf.seed if seed is None else seed
        if not 0 < fraction <= 1:
            raise InvalidInputError("sample fraction must be in (0, 1]")

        n = ds.num_rows
        size = min(n, max(math.ceil(fraction * n), min_rows))
        rng = np.random.default_rng(seed)
        perm = rng.permutation(n)
        sample = np.sort(perm[:size])
        held_out = perm[size : size + num_queries]
        if len(held_out) < num_queries:
            # the sample is the whole dataset; queries come from perturbed sample rows
            held_out = rng.choice(n, size=min(num_queries, n), replace=False)
        return cls(sample, np.asarray(held_out, dtype=np.int64), n, seed, fraction)

    def dataset(self, ds: Dataset) -> Dataset:
        return ds if self.size == ds.num_rows else ds.subset(self.sample_rows)

    def query_vectors(self, ds: Dataset, column_id: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, column_id])
        return perturbed_rows(ds.matrix(column_id), self.query_rows, rng)

    def to_dict(self) -> T.Dict[str, T.Any]:
        return {
            "seed": self.seed,
            "fraction": self.fraction,
            "sample_size": self.size,
            "num_queries": len(self.query_rows),
            "num_rows": self.num_rows,
            "scale_factor": self.scale_factor,
        }


@dataclasses.dataclass(frozen=True)
class ColumnFit:
    """Fitted coefficients for one column: numDist = a*ek + b, recall = c*ln(ek) + d."""

    column: int
    dim: int
    a: float
    b: float
    c: float
    d: float
    r2_cost: float = 1.0
    r2_recall: float = 1.0

    def __post_init__(self):
        if self.a < 0 or self.c < 0:
            raise InvalidInputError(f"column {self.column}: slopes must be >= 0")

    def to_dict(self) -> T.Dict[str, T.Any]:
        return dataclasses.asdict(self)


def _fits_for(
    fits: T.Mapping[int, ColumnFit], x: IndexDescriptor
) -> T.List[ColumnFit]:
    try:
        return [fits[i] for i in x.columns]
    except KeyError as exc:
        raise InvalidInputError(f"no fitted model for column {exc.args[0]}") from None


@dataclasses.dataclass(frozen=True)
class CostModel:
    fits: T.Mapping[int, ColumnFit]
    num_rows: int
    ek_min: int = 100
    ek_max: int = 3200
    scale_factor: float = 1.0

    def coefficients(self, x: IndexDescriptor) -> T.Tuple[float, float]:
        fits = _fits_for(self.fits, x)
        return (
            math.fsum(f.a for f in fits) / len(fits),
            math.fsum(f.b for f in fits) / len(fits),
        )

    def dim(self, x: IndexDescriptor) -> int:
        return sum(f.dim for f in _fits_for(self.fits, x))


@dataclasses.dataclass(frozen=True)
class RecallModel:
    fits: T.Mapping[int, ColumnFit]
    scale_factor: float = 1.0

    def coefficients(self, x: IndexDescriptor) -> T.Tuple[float, float]:
        fits = _fits_for(self.fits, x)
        return (
            math.fsum(f.c for f in fits) / len(fits),
            math.fsum(f.d for f in fits) / len(fits),
        )


@dataclasses.dataclass(frozen=True)
class StorageModel:
    unit: str = "index-count"
    max_degree: int = 16
    bytes_per_edge: int = 4
    bytes_per_float: int = 4

    def __post_init__(self):
        if self.unit not in STORAGE_UNITS:
            raise InvalidInputError(f"unknown storage unit {self.unit!r}")
        if min(self.max_degree, self.bytes_per_edge, self.bytes_per_float) < 1:
            raise InvalidInputError("storage parameters must be positive")


def est_cost_idx(cm: CostModel, x: IndexDescriptor, ek: int) -> float:
    """
    x.dim * (a*ek + b) with coefficients averaged over x's columns. ``ek`` is a
    full-data rank; the curves were measured on the training sample, so it is
    divided by the sample's scale factor first.
    """
    if ek < 1:
        raise InvalidInputError("ek must be >= 1")
    a, b = cm.coefficients(x)
    num_dist = min(max(a * ek / cm.scale_factor + b, 1.0), float(cm.num_rows))
    return cm.dim(x) * num_dist


def est_recall(rm: RecallModel, x: IndexDescriptor, ek: int) -> float:
    if ek < 1:
        raise InvalidInputError("ek must be >= 1")
    c, d = rm.coefficients(x)
    sample_ek = max(ek / rm.scale_factor, 1.0)
    return min(max(c * math.log(sample_ek) + d, 0.0), 1.0)


def est_storage(
    sm: StorageModel, conf: Configuration, ds: T.Optional[Dataset] = None
) -> float:
    """Index count, or bytes: rows * (degree * edge size + width * float size)."""
    if sm.unit == "index-count":
        return float(len(conf))
    if ds is None:
        raise InvalidInputError("storage in bytes needs the dataset")
    per_row_edges = sm.max_degree * sm.bytes_per_edge
    return float(
        sum(
            ds.num_rows * (per_row_edges + x.dim(ds) * sm.bytes_per_float)
            for x in conf
        )
    )


def scale_rank(rank: int, scale_factor: float) -> int:
    """Map a rank observed on the sample to full-data rank space."""
    if rank <= 0:
        return 0
    return max(1, math.ceil(rank * scale_factor - 1e-9))


def _scan_depth(rm: RecallModel, x: IndexDescriptor, ek: int) -> int:
    recall = max(est_recall(rm, x, ek), MIN_RECALL_FOR_INFLATION)
    return math.ceil(ek / recall - 1e-9)


def inflate_ek(rm: RecallModel, x: IndexDescriptor, ek: int, num_rows: int) -> int:
    """
    The shallowest scan e / est_recall(e) over every e >= ek, so an approximate
    scan still reaches the wanted ranks. Taking the minimum over deeper ranks keeps
    the result non-decreasing in ek even where the recall curve rises faster than
    ek does.
    """
    if ek <= 0:
        return 0
    candidates = [ek]
    c, d = rm.coefficients(x)
    if c > 0:
        # e / (c*ln(e/sf) + d) bottoms out where the recall estimate equals c,
        # or where it reaches 1 or 0.1 if c lies outside that range
        target = min(max(c, MIN_RECALL_FOR_INFLATION), 1.0)
        exponent = (target - d) / c
        if exponent < math.log(num_rows / rm.scale_factor):
            turn = rm.scale_factor * math.exp(exponent)
            candidates += [e for e in (math.floor(turn), math.ceil(turn)) if e > ek]
    return min(min(_scan_depth(rm, x, e) for e in candidates), num_rows)


@dataclasses.dataclass(frozen=True)
class TunerModels:
    """Everything the planner needs to cost a hypothetical index."""

    cost: CostModel
    recall: RecallModel
    storage: StorageModel
    metadata: T.Mapping[str, T.Any] = dataclasses.field(default_factory=dict)

    @property
    def scale_factor(self) -> float:
        """Full rows per training-sample row; ek values are divided by it."""
        return self.cost.scale_factor

    @property
    def num_rows(self) -> int:
        return self.cost.num_rows

    @property
    def columns(self) -> T.FrozenSet[int]:
        return frozenset(self.cost.fits)

    def cost_idx(self, q: Query, x: IndexDescriptor, ek: int) -> float:
        return est_cost_idx(self.cost, x, ek)

    def with_storage(self, unit: str) -> "TunerModels":
        return dataclasses.replace(
            self, storage=dataclasses.replace(self.storage, unit=unit)
        )

    @classmethod
    def from_coefficients(
        cls,
        coefficients: T.Mapping[int, T.Tuple[int, float, float, float, float]],
        num_rows: int,
        scale_factor: float = 1.0,
        storage: StorageModel = None,
    ) -> "TunerModels":
        """Build models from ``{column: (dim, a, b, c, d)}``."""
        fits = {
            col: ColumnFit(col, dim, a, b, c, d)
            for col, (dim, a, b, c, d) in coefficients.items()
        }
        return cls(
            CostModel(fits, num_rows, scale_factor=scale_factor),
            RecallModel(fits, scale_factor),
            storage or StorageModel(),
        )

    def to_dict(self) -> T.Dict[str, T.Any]:
        return {
            "columns": {
                str(col): fit.to_dict() for col, fit in sorted(self.cost.fits.items())
            },
            "num_rows": self.cost.num_rows,
            "fit_range": [self.cost.ek_min, self.cost.ek_max],
            "scale_factor": self.scale_factor,
            "storage": dataclasses.asdict(self.storage),
            "sampling": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, data: T.Mapping[str, T.Any]) -> "TunerModels":
        try:
            fits = {int(col): ColumnFit(**fit) for col, fit in data["columns"].items()}
            ek_min, ek_max = data.get("fit_range", (100, 3200))
            scale_factor = float(data.get("scale_factor", 1.0))
            if scale_factor < 1:
                raise ValueError("scale_factor must be >= 1")
            return cls(
                CostModel(
                    fits, int(data["num_rows"]), int(ek_min), int(ek_max), scale_factor
                ),
                RecallModel(fits, scale_factor),
                StorageModel(**data.get("storage", {})),
                dict(data.get("sampling", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed model document: {exc}") from exc


@dataclasses.dataclass(frozen=True)
class Observation:
    column: int
    ek: int
    num_dist: int
    recall: float


@dataclasses.dataclass(frozen=True)
class FitResult:
    models: TunerModels
    observations: T.Tuple[Observation, ...]
    elapsed: float = 0.0

    @property
    def cost(self) -> CostModel:
        return self.models.cost

    @property
    def recall(self) -> RecallModel:
        return self.models.recall

    @property
    def fits(self) -> T.Mapping[int, ColumnFit]:
        return self.models.cost.fits


def recall_at(exact_scores: np.ndarray, retrieved: np.ndarray, ek: int) -> float:
    """
    Share of retrieved rows scoring at least the ek-th best exact score, so that
    rows tied with the boundary count as hits.
    """
    kth = np.partition(-exact_scores, ek - 1)[ek - 1]
    hits = np.count_nonzero(exact_scores[retrieved] >= -kth - 1e-6)
    return min(hits, ek) / ek


def _observe_column(
    sample_ds: Dataset,
    queries: np.ndarray,
    column: int,
    grid: T.Sequence[int],
    params: ann.BuildParams,
) -> T.List[Observation]:
    index = ann.build(sample_ds, IndexDescriptor.of(column), params)
    matrix = sample_ds.matrix(column)
    observations = []
    for qv in queries:
        exact = (matrix @ qv.astype(np.float32)).astype(np.float64)
        for ek in grid:
            result = index.search(qv, ek, exhaustive_fallback=False)
            observations.append(
                Observation(column, ek, result.num_dist, recall_at(exact, result.ids, ek))
            )
    return observations


def _fit_column(column: int, dim: int, observations: T.List[Observation]) -> ColumnFit:
    ek = np.array([o.ek for o in observations], dtype=np.float64)
    num_dist = np.array([o.num_dist for o in observations], dtype=np.float64)
    recall = np.array([o.recall for o in observations], dtype=np.float64)

    cost_fit = LinearRegression(positive=True).fit(ek.reshape(-1, 1), num_dist)
    recall_fit = LinearRegression(positive=True).fit(np.log(ek).reshape(-1, 1), recall)
    return ColumnFit(
        column=column,
        dim=dim,
        a=float(cost_fit.coef_[0]),
        b=float(cost_fit.intercept_),
        c=float(recall_fit.coef_[0]),
        d=float(recall_fit.intercept_),
        r2_cost=float(r2_score(num_dist, cost_fit.predict(ek.reshape(-1, 1)))),
        r2_recall=float(
            r2_score(recall, recall_fit.predict(np.log(ek).reshape(-1, 1)))
        ),
    )


def fit(
    ds: Dataset,
    sample: TrainingSample,
    grid: T.Optional[T.Sequence[int]] = None,
    build_params: T.Optional[ann.BuildParams] = None,
    threads: T.Optional[int] = None,
) -> FitResult:
    """
    Build a sample-scale index per column, measure it at every grid ek with every
    training query and fit the cost and recall curves per column.
    """
    from mvtune.apps import get_config

    conf = get_config()
    grid = conf.ek_grid if grid is None else tuple(grid)
    threads = conf.threads if threads is None else threads
    build_params = build_params or ann.BuildParams.from_settings(seed=sample.seed)

    started = time.perf_counter()
    sample_ds = sample.dataset(ds)
    usable = sorted(ek for ek in set(grid) if 1 <= ek <= sample_ds.num_rows)
    if len(usable) < 3:
        raise TrainingError(
            f"only {len(usable)} grid point(s) fit a sample of {sample_ds.num_rows} "
            "rows; at least 3 are needed"
        )

    columns = [c.id for c in ds.columns]

    def observe(column):
        queries = sample.query_vectors(ds, column)
        obs = _observe_column(sample_ds, queries, column, usable, build_params)
        logger.info(
            "Measured column %d: %d observation(s) on %d sample rows",
            column,
            len(obs),
            sample_ds.num_rows,
        )
        return obs

    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        per_column = list(pool.map(observe, columns))

    fits = {
        column: _fit_column(column, ds.dims[column], obs)
        for column, obs in zip(columns, per_column)
    }
    for f in fits.values():
        logger.info(
            "Column %d: numDist = %.4f*ek + %.2f (R2 %.3f), "
            "recall = %.4f*ln(ek) + %.4f (R2 %.3f)",
            f.column,
            f.a,
            f.b,
            f.r2_cost,
            f.c,
            f.d,
            f.r2_recall,
        )

    metadata = dict(sample.to_dict(), grid=list(usable))
    models = TunerModels(
        CostModel(fits, ds.num_rows, usable[0], usable[-1], sample.scale_factor),
        RecallModel(fits, sample.scale_factor),
        StorageModel(max_degree=build_params.max_degree),
        metadata,
    )
    observations = tuple(o for obs in per_column for o in obs)
    return FitResult(models, observations, time.perf_counter() - started)
