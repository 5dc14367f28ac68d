"""
On-disk formats: per-column ``.fbin`` vector files, dataset directories, workload
JSON, model JSON and reports. Every file is written to a temporary sibling and
renamed into place.
"""
import csv
import dataclasses
import io
import json
import logging
import os
import tempfile
import typing as T
from pathlib import Path

import numpy as np

from mvtune.domain import Dataset, Query, Workload
from mvtune.estimators import TunerModels, seeded_query_vectors
from mvtune.exceptions import (
    DimensionMismatchError,
    FormatError,
    InvalidInputError,
)

logger = logging.getLogger("mvtune.formats")

PathLike = T.Union[str, os.PathLike]
DATASET_MANIFEST = "dataset.json"


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise FormatError(f"cannot write {path}: {exc}") from exc


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(data: T.Any) -> str:
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def write_json(path: PathLike, data: T.Any) -> None:
    atomic_write_text(path, dumps_json(data))


def read_json(path: PathLike) -> T.Any:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}") from exc


def dumps_csv(header: T.Sequence[str], rows: T.Iterable[T.Sequence[T.Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def write_csv(
    path: PathLike, header: T.Sequence[str], rows: T.Iterable[T.Sequence[T.Any]]
) -> None:
    atomic_write_text(path, dumps_csv(header, rows))


# Vector files ######################################################################


def read_fbin(path: PathLike) -> np.ndarray:
    """u32 rows, u32 dim, then rows*dim little-endian float32 values."""
    try:
        size = os.path.getsize(path)
        header = np.fromfile(path, dtype="<u4", count=2)
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if len(header) != 2:
        raise FormatError(f"{path}: truncated header")
    rows, dim = (int(v) for v in header)
    expected = 8 + 4 * rows * dim
    if size != expected:
        raise FormatError(
            f"{path}: {rows}x{dim} vectors need {expected} bytes, file has {size}"
        )
    data = np.fromfile(path, dtype="<f4", offset=8)
    return data.astype(np.float32, copy=False).reshape(rows, dim)


def write_fbin(path: PathLike, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise InvalidInputError("fbin files hold 2-D matrices")
    header = np.array(matrix.shape, dtype="<u4").tobytes()
    atomic_write_bytes(path, header + np.ascontiguousarray(matrix).tobytes())


# Datasets ##########################################################################


def save_dataset(ds: Dataset, directory: PathLike) -> Path:
    directory = Path(directory)
    columns = []
    for col in ds.columns:
        name = f"col{col.id}.fbin"
        write_fbin(directory / name, ds.matrix(col.id))
        columns.append({"id": col.id, "dim": col.dim, "name": col.name, "file": name})
    write_json(directory / DATASET_MANIFEST, {"columns": columns, "num_rows": ds.num_rows})
    logger.info("Wrote %d column(s) x %d rows to %s", len(columns), ds.num_rows, directory)
    return directory


def load_dataset(directory: PathLike) -> Dataset:
    directory = Path(directory)
    manifest = read_json(directory / DATASET_MANIFEST)
    try:
        columns = sorted(manifest["columns"], key=lambda c: c["id"])
        arrays = []
        for col in columns:
            matrix = read_fbin(directory / col["file"])
            if matrix.shape[1] != col["dim"]:
                raise DimensionMismatchError(
                    f"column {col['id']}: manifest says dim {col['dim']}, "
                    f"file has {matrix.shape[1]}"
                )
            arrays.append(matrix)
        ds = Dataset.from_arrays(arrays, [c.get("name", "") for c in columns])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{directory / DATASET_MANIFEST}: malformed manifest") from exc
    if [c["id"] for c in columns] != [c.id for c in ds.columns]:
        raise InvalidInputError("dataset column ids must be contiguous from 1")
    return ds


# Workloads #########################################################################

WORKLOAD_FIELDS = {
    "columns",
    "queries",
    "recall_threshold",
    "storage_budget",
    "storage_unit",
}
QUERY_FIELDS = {"id", "vid", "k", "probability", "seed", "vectors_ref", "recall_threshold"}
COLUMN_FIELDS = {"id", "dim", "name"}


def _reject_unknown(data: T.Mapping, allowed: T.Set[str], where: str) -> None:
    if not isinstance(data, dict):
        raise InvalidInputError(f"{where} must be an object")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise InvalidInputError(f"unknown field(s) in {where}: {', '.join(unknown)}")


@dataclasses.dataclass(frozen=True)
class WorkloadFile:
    """
    The JSON form of a workload. Query vectors are either regenerated from a
    ``seed`` or read from ``vectors_ref``, a map of column id to a one-row
    ``.fbin`` file relative to the workload file.
    """

    columns: T.Tuple[T.Mapping[str, T.Any], ...]
    queries: T.Tuple[T.Mapping[str, T.Any], ...]
    recall_threshold: float
    storage_budget: float
    storage_unit: str = "index-count"
    base_dir: T.Optional[Path] = dataclasses.field(default=None, compare=False)

    @classmethod
    def from_dict(
        cls, data: T.Mapping[str, T.Any], base_dir: T.Optional[Path] = None
    ) -> "WorkloadFile":
        _reject_unknown(data, WORKLOAD_FIELDS, "workload")
        for col in data.get("columns", []):
            _reject_unknown(col, COLUMN_FIELDS, "column")
        for i, q in enumerate(data.get("queries", [])):
            _reject_unknown(q, QUERY_FIELDS, f"query {i}")
            if ("seed" in q) == ("vectors_ref" in q):
                raise InvalidInputError(
                    f"query {q.get('id', i)} needs exactly one of seed, vectors_ref"
                )
        try:
            return cls(
                columns=tuple(data["columns"]),
                queries=tuple(data["queries"]),
                recall_threshold=float(data["recall_threshold"]),
                storage_budget=float(data["storage_budget"]),
                storage_unit=data.get("storage_unit", "index-count"),
                base_dir=base_dir,
            )
        except KeyError as exc:
            raise InvalidInputError(f"workload is missing {exc.args[0]!r}") from None

    @classmethod
    def load(cls, path: PathLike) -> "WorkloadFile":
        path = Path(path)
        return cls.from_dict(read_json(path), path.parent)

    def to_dict(self) -> T.Dict[str, T.Any]:
        return {
            "columns": [dict(c) for c in self.columns],
            "queries": [dict(q) for q in self.queries],
            "recall_threshold": self.recall_threshold,
            "storage_budget": self.storage_budget,
            "storage_unit": self.storage_unit,
        }

    def dump(self, path: PathLike) -> None:
        write_json(path, self.to_dict())

    def _vectors(self, entry, ds: Dataset) -> T.Dict[int, np.ndarray]:
        vid = [int(i) for i in entry["vid"]]
        if "seed" in entry:
            return seeded_query_vectors(ds, vid, int(entry["seed"]))
        refs = {int(i): p for i, p in entry["vectors_ref"].items()}
        base = self.base_dir or Path(".")
        return {i: read_fbin(base / p).reshape(-1) for i, p in refs.items()}

    def to_workload(self, ds: Dataset) -> Workload:
        """Validate against ``ds`` and materialize the query vectors."""
        for col in self.columns:
            dim = ds.dims.get(int(col["id"]))
            if dim is None:
                raise InvalidInputError(f"workload column {col['id']} not in dataset")
            if dim != int(col["dim"]):
                raise DimensionMismatchError(
                    f"workload column {col['id']} has dim {col['dim']}, dataset {dim}"
                )
        queries = []
        for i, entry in enumerate(self.queries):
            try:
                queries.append(
                    Query(
                        vid=frozenset(int(c) for c in entry["vid"]),
                        vectors=self._vectors(entry, ds),
                        k=int(entry["k"]),
                        probability=float(entry["probability"]),
                        qid=str(entry.get("id", f"q{i + 1}")),
                        recall_threshold=entry.get("recall_threshold"),
                    )
                )
            except KeyError as exc:
                raise InvalidInputError(
                    f"query {i} is missing {exc.args[0]!r}"
                ) from None
        workload = Workload(
            tuple(queries),
            self.recall_threshold,
            self.storage_budget,
            self.storage_unit,
        )
        workload.validate_for(ds)
        return workload


def load_workload(path: PathLike, ds: Dataset) -> Workload:
    return WorkloadFile.load(path).to_workload(ds)


# Models and reports ################################################################


def save_models(path: PathLike, models: TunerModels) -> None:
    write_json(path, models.to_dict())


def load_models(path: PathLike) -> TunerModels:
    return TunerModels.from_dict(read_json(path))
