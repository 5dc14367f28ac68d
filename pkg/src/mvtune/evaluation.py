"""
Executed-plan validation: build the indexes a tuning result recommends, run every
query plan against them and compare measured cost and recall with the estimates.
"""
import dataclasses
import logging
import math
import threading
import time
import typing as T

from mvtune import ann, oracle
from mvtune.domain import Dataset, IndexDescriptor, Workload
from mvtune.searcher import TunerResult

logger = logging.getLogger("mvtune.evaluation")


@dataclasses.dataclass(frozen=True)
class QueryEvaluation:
    query_id: str
    est_cost: float
    measured_cost: float
    est_recall: float
    measured_recall: float
    threshold: float
    total_ek: int
    candidates: int
    elapsed: float

    @property
    def cost_ratio(self) -> float:
        return self.measured_cost / self.est_cost if self.est_cost else math.inf

    def to_dict(self) -> T.Dict[str, T.Any]:
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class PlanEvaluation:
    label: str
    configuration: T.List[T.List[int]]
    queries: T.Tuple[QueryEvaluation, ...]
    est_cost: float
    measured_cost: float
    elapsed: float

    def share_meeting(self, slack: float = 0.0) -> float:
        met = [q for q in self.queries if q.measured_recall >= q.threshold - slack]
        return len(met) / len(self.queries)

    def to_dict(self) -> T.Dict[str, T.Any]:
        return {
            "label": self.label,
            "config": self.configuration,
            "queries": [q.to_dict() for q in self.queries],
            "est_cost": self.est_cost,
            "measured_cost": self.measured_cost,
            "elapsed": self.elapsed,
        }


class IndexStore:
    """Builds each index at most once and shares it between evaluated results."""

    def __init__(self, ds: Dataset, params: ann.BuildParams, threads: int = 1):
        self.ds = ds
        self.params = params
        self.threads = threads
        self.build_seconds = 0.0
        self._built: T.Dict[IndexDescriptor, ann.GraphIndex] = {}
        self._lock = threading.Lock()

    def get_many(
        self, descriptors: T.Iterable[IndexDescriptor]
    ) -> T.Dict[IndexDescriptor, ann.GraphIndex]:
        descriptors = set(descriptors)
        with self._lock:
            missing = [x for x in descriptors if x not in self._built]
            if missing:
                started = time.perf_counter()
                self._built.update(
                    ann.build_many(self.ds, missing, self.params, self.threads)
                )
                self.build_seconds += time.perf_counter() - started
            return {x: self._built[x] for x in descriptors}


def evaluate_result(
    result: TunerResult,
    W: Workload,
    ds: Dataset,
    store: IndexStore,
    ground_truths: T.Optional[T.Mapping[str, oracle.GroundTruth]] = None,
) -> PlanEvaluation:
    indexes = store.get_many(result.configuration)
    evaluations = []
    for q in W.queries:
        plan = result.plans[q.qid]
        gt = (ground_truths or {}).get(q.qid) or oracle.ground_truth(q, ds)
        executed = ann.execute_plan(q, plan, indexes, ds)
        evaluations.append(
            QueryEvaluation(
                query_id=q.qid,
                est_cost=plan.estimated_cost,
                measured_cost=executed.measured_cost,
                est_recall=plan.estimated_recall,
                measured_recall=oracle.exact_recall(gt, [executed.ids]),
                threshold=W.threshold_for(q),
                total_ek=plan.total_ek,
                candidates=executed.candidate_count,
                elapsed=executed.elapsed,
            )
        )
    weighted = {q.qid: q.probability for q in W.queries}
    evaluation = PlanEvaluation(
        label=result.label,
        configuration=result.configuration.as_lists(),
        queries=tuple(evaluations),
        est_cost=result.workload_cost,
        measured_cost=math.fsum(weighted[e.query_id] * e.measured_cost for e in evaluations),
        elapsed=math.fsum(weighted[e.query_id] * e.elapsed for e in evaluations),
    )
    logger.info(
        "%s: measured cost %.1f (estimated %.1f), %.0f%% of queries meet their "
        "recall threshold",
        result.label,
        evaluation.measured_cost,
        evaluation.est_cost,
        100 * evaluation.share_meeting(),
    )
    return evaluation


def evaluate(
    W: Workload,
    ds: Dataset,
    results: T.Sequence[TunerResult],
    params: T.Optional[ann.BuildParams] = None,
    threads: int = 1,
) -> T.Dict[str, T.Any]:
    """
    Execute every result's plans against real indexes. When both a tuned and a
    per-column result are given the report carries their measured speedup.
    """
    params = params or ann.BuildParams.from_settings()
    store = IndexStore(ds, params, threads)
    ground_truths = {q.qid: oracle.ground_truth(q, ds) for q in W.queries}
    evaluations = {
        r.label: evaluate_result(r, W, ds, store, ground_truths) for r in results
    }
    report = {
        "results": {label: e.to_dict() for label, e in evaluations.items()},
        "build_seconds": store.build_seconds,
        "index_params": dataclasses.asdict(params),
    }
    tuned = evaluations.get("tuned")
    per_column = evaluations.get("per-column")
    if tuned and per_column:
        report["speedup"] = {
            "measured_cost": _ratio(per_column.measured_cost, tuned.measured_cost),
            "wall_clock": _ratio(per_column.elapsed, tuned.elapsed),
            "estimated_cost": _ratio(per_column.est_cost, tuned.est_cost),
        }
    return report


def _ratio(baseline: float, value: float) -> T.Optional[float]:
    return baseline / value if value > 0 else None
