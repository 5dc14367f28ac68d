"""
Exact brute-force answers: ground-truth top-k, per-index ranks of the ground-truth
items and the recall of a set of retrieved ids.
"""
import dataclasses
import hashlib
import logging
import os
import typing as T
from pathlib import Path

import numpy as np

from mvtune.domain import Dataset, IndexDescriptor, Query, partial_scores
from mvtune.exceptions import FormatError, UnusableIndexError

logger = logging.getLogger("mvtune.oracle")


def rank_order(scores: np.ndarray) -> np.ndarray:
    """Row ids sorted by (score descending, row id ascending)."""
    ids = np.arange(len(scores), dtype=np.int64)
    return np.lexsort((ids, -scores))


@dataclasses.dataclass(frozen=True)
class GroundTruth:
    query_id: str
    ids: np.ndarray
    scores: np.ndarray

    @property
    def k(self) -> int:
        return len(self.ids)

    def __len__(self):
        return len(self.ids)


@dataclasses.dataclass(frozen=True)
class RankTable:
    """
    ``ranks[x][j]`` is the 1-based rank, under ``x``'s partial score, of the
    ground-truth item at position ``j`` (0-based) of the ground truth.
    """

    ground_truth: GroundTruth
    ranks: T.Mapping[IndexDescriptor, np.ndarray]

    def __getitem__(self, x: IndexDescriptor) -> np.ndarray:
        return self.ranks[x]

    def __iter__(self):
        return iter(self.ranks)


def ground_truth(
    q: Query, ds: Dataset, k: T.Optional[int] = None, cache: "GroundTruthCache" = None
) -> GroundTruth:
    """Exact top-k by full score over every row of ``ds``."""
    k = min(q.k if k is None else k, ds.num_rows)
    if cache is not None:
        cached = cache.get(q, ds, k)
        if cached is not None:
            return cached
    scores = partial_scores(q, q.vid, ds)
    order = rank_order(scores)[:k]
    gt = GroundTruth(q.qid, order, scores[order])
    if cache is not None:
        cache.put(q, ds, gt)
    return gt


def ranks_under(q: Query, x: IndexDescriptor, ds: Dataset, rows: np.ndarray) -> np.ndarray:
    """1-based ranks of ``rows`` when every row is ordered by ``x``'s partial score."""
    if not x.usable_for(q):
        raise UnusableIndexError(f"{x} is not usable for query {q.qid}")
    order = rank_order(partial_scores(q, x.vid, ds))
    position = np.empty(len(order), dtype=np.int64)
    position[order] = np.arange(1, len(order) + 1, dtype=np.int64)
    return position[np.asarray(rows, dtype=np.int64)]


def rank_table(
    q: Query,
    gt: GroundTruth,
    candidates: T.Iterable[IndexDescriptor],
    ds: Dataset,
) -> RankTable:
    return RankTable(gt, {x: ranks_under(q, x, ds, gt.ids) for x in candidates})


def exact_recall(gt: GroundTruth, retrieved: T.Iterable[T.Iterable[int]]) -> float:
    """Fraction of ground-truth ids found in the union of the retrieved id lists."""
    if not len(gt):
        return 0.0
    union = set()
    for ids in retrieved:
        union.update(int(i) for i in ids)
    hits = sum(1 for i in gt.ids.tolist() if i in union)
    return hits / len(gt)


class GroundTruthCache:
    """
    Directory of binary ground-truth files, one per (query, dataset, k). Each file
    holds k little-endian u32 ids followed by k little-endian f32 scores.
    """

    def __init__(self, directory: T.Union[str, os.PathLike]):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    @classmethod
    def from_settings(cls) -> T.Optional["GroundTruthCache"]:
        from mvtune.apps import get_config

        directory = get_config().ground_truth_dir
        return cls(directory) if directory else None

    def path_for(self, q: Query, ds: Dataset, k: int) -> Path:
        key = hashlib.sha1(f"{q.fingerprint}:{ds.fingerprint}:{k}".encode())
        return self.directory / f"{key.hexdigest()}.gt"

    def get(self, q: Query, ds: Dataset, k: int) -> T.Optional[GroundTruth]:
        path = self.path_for(q, ds, k)
        if not path.exists():
            return None
        raw = path.read_bytes()
        if len(raw) != 8 * k:
            raise FormatError(f"{path}: expected {8 * k} bytes, found {len(raw)}")
        ids = np.frombuffer(raw, dtype="<u4", count=k).astype(np.int64)
        scores = np.frombuffer(raw, dtype="<f4", count=k, offset=4 * k)
        logger.debug("Ground truth for %s loaded from %s", q.qid, path)
        return GroundTruth(q.qid, ids, scores.astype(np.float64))

    def put(self, q: Query, ds: Dataset, gt: GroundTruth) -> None:
        from mvtune.formats import atomic_write_bytes

        payload = gt.ids.astype("<u4").tobytes() + gt.scores.astype("<f4").tobytes()
        atomic_write_bytes(self.path_for(q, ds, gt.k), payload)
