"""Domain types for query--model evaluations.

Two views of the same data coexist.  ``EvaluationRecord`` is the row type
used at the edges (loading, validation, serialization).  Internally all
computation runs on columnar numpy containers:

* ``LoggedEvaluations`` -- single-model logged tuples (x, m, acc, cost), the
  training data a client holds.
* ``EvaluationTable`` -- queries evaluated on *every* model, used as test
  ground truth so any routed choice can be scored.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ModelPool:
    models: tuple[str, ...]
    c_max: float

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(str(m) for m in self.models))
        if len(self.models) < 1:
            raise ValueError("model pool must contain at least one model")
        if len(set(self.models)) != len(self.models):
            raise ValueError(f"duplicate model identifiers in {self.models}")
        if not self.c_max > 0:
            raise ValueError(f"c_max must be positive, got {self.c_max}")

    @property
    def size(self) -> int:
        return len(self.models)

    def index(self, model_id: str) -> int:
        try:
            return self.models.index(model_id)
        except ValueError:
            raise KeyError(f"unknown model {model_id!r}") from None

    def with_model(self, model_id: str) -> "ModelPool":
        return ModelPool(self.models + (model_id,), self.c_max)


@dataclass(frozen=True)
class EvaluationRecord:
    embedding: tuple[float, ...]
    model_index: int
    accuracy: float
    cost: float
    task_label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "embedding", tuple(float(v) for v in self.embedding))


@dataclass(frozen=True)
class DatasetManifest:
    d_emb: int
    model_pool: ModelPool
    n_records: int
    cost_normalizer: float


@dataclass(frozen=True)
class Violation:
    index: int
    field: str
    message: str

    def __str__(self) -> str:
        return f"record {self.index}: {self.field}: {self.message}"


def validate_dataset(records: Sequence[EvaluationRecord], manifest: DatasetManifest) -> list[Violation]:
    """Report every violated record invariant; an empty list means valid."""
    report: list[Violation] = []
    M = manifest.model_pool.size
    c_max = manifest.model_pool.c_max
    for i, r in enumerate(records):
        if len(r.embedding) != manifest.d_emb:
            report.append(Violation(i, "embedding", f"dimension {len(r.embedding)} != d_emb {manifest.d_emb}"))
        if not all(math.isfinite(v) for v in r.embedding):
            report.append(Violation(i, "embedding", "non-finite entry"))
        if not (isinstance(r.model_index, (int, np.integer)) and 0 <= r.model_index < M):
            report.append(Violation(i, "model_index", f"{r.model_index} not in [0, {M})"))
        if not (0.0 <= r.accuracy <= 1.0):
            report.append(Violation(i, "accuracy", "accuracy out of [0,1]"))
        if not (0.0 <= r.cost <= c_max):
            report.append(Violation(i, "cost", f"cost out of [0, {c_max}]"))
        if not r.cost <= manifest.cost_normalizer:
            report.append(Violation(i, "cost", "cost exceeds manifest cost_normalizer"))
    return report


@dataclass(frozen=True)
class LoggedEvaluations:
    """Columnar single-model logs: row j is the tuple (x_j, m_j, acc_j, cost_j)."""

    embeddings: np.ndarray
    models: np.ndarray
    accuracy: np.ndarray
    cost: np.ndarray
    rows: np.ndarray | None = None  # corpus row ids, when known

    def __post_init__(self):
        n = len(self.models)
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != n:
            emb = emb.reshape(n, -1)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "models", np.asarray(self.models, dtype=np.int64))
        object.__setattr__(self, "accuracy", np.asarray(self.accuracy, dtype=np.float64))
        object.__setattr__(self, "cost", np.asarray(self.cost, dtype=np.float64))
        if self.rows is not None:
            object.__setattr__(self, "rows", np.asarray(self.rows, dtype=np.int64))
        if not (len(self.accuracy) == len(self.cost) == n):
            raise ValueError("column lengths differ")

    def __len__(self) -> int:
        return len(self.models)

    @property
    def d_emb(self) -> int:
        return self.embeddings.shape[1]

    def take(self, idx) -> "LoggedEvaluations":
        idx = np.asarray(idx, dtype=np.int64)
        return LoggedEvaluations(
            self.embeddings[idx], self.models[idx], self.accuracy[idx], self.cost[idx],
            None if self.rows is None else self.rows[idx],
        )

    def for_model(self, m: int) -> "LoggedEvaluations":
        return self.take(np.flatnonzero(self.models == m))

    @classmethod
    def empty(cls, d_emb: int) -> "LoggedEvaluations":
        return cls(np.zeros((0, d_emb)), np.zeros(0, np.int64), np.zeros(0), np.zeros(0), np.zeros(0, np.int64))

    @classmethod
    def concat(cls, parts: Sequence["LoggedEvaluations"]) -> "LoggedEvaluations":
        parts = list(parts)
        if not parts:
            raise ValueError("nothing to concatenate")
        rows = None
        if all(p.rows is not None for p in parts):
            rows = np.concatenate([p.rows for p in parts])
        return cls(
            np.concatenate([p.embeddings for p in parts]),
            np.concatenate([p.models for p in parts]),
            np.concatenate([p.accuracy for p in parts]),
            np.concatenate([p.cost for p in parts]),
            rows,
        )

    @classmethod
    def from_records(cls, records: Sequence[EvaluationRecord], d_emb: int | None = None) -> "LoggedEvaluations":
        if not records:
            return cls.empty(d_emb or 0)
        return cls(
            np.array([r.embedding for r in records], dtype=np.float64),
            np.array([r.model_index for r in records], dtype=np.int64),
            np.array([r.accuracy for r in records], dtype=np.float64),
            np.array([r.cost for r in records], dtype=np.float64),
        )

    def records(self) -> list[EvaluationRecord]:
        return [
            EvaluationRecord(tuple(self.embeddings[j]), int(self.models[j]), float(self.accuracy[j]), float(self.cost[j]))
            for j in range(len(self))
        ]


@dataclass(frozen=True)
class EvaluationTable:
    """Queries with the observed accuracy and cost of every model in the pool."""

    embeddings: np.ndarray  # (n, d)
    accuracy: np.ndarray  # (n, M)
    cost: np.ndarray  # (n, M)
    tasks: np.ndarray  # (n,) integer task labels
    task_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "embeddings", np.asarray(self.embeddings, dtype=np.float64))
        object.__setattr__(self, "accuracy", np.asarray(self.accuracy, dtype=np.float64))
        object.__setattr__(self, "cost", np.asarray(self.cost, dtype=np.float64))
        object.__setattr__(self, "tasks", np.asarray(self.tasks, dtype=np.int64))
        n = self.embeddings.shape[0]
        if self.accuracy.shape != self.cost.shape or self.accuracy.shape[0] != n or len(self.tasks) != n:
            raise ValueError("inconsistent evaluation table shapes")
        if not self.task_names and n:
            names = tuple(str(t) for t in range(int(self.tasks.max()) + 1))
            object.__setattr__(self, "task_names", names)

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def n_models(self) -> int:
        return self.accuracy.shape[1]

    @property
    def d_emb(self) -> int:
        return self.embeddings.shape[1]

    def subset(self, idx) -> "EvaluationTable":
        idx = np.asarray(idx, dtype=np.int64)
        return EvaluationTable(self.embeddings[idx], self.accuracy[idx], self.cost[idx], self.tasks[idx], self.task_names)

    def drop_models(self, models: Sequence[int]) -> "EvaluationTable":
        keep = [m for m in range(self.n_models) if m not in set(models)]
        return EvaluationTable(self.embeddings, self.accuracy[:, keep], self.cost[:, keep], self.tasks, self.task_names)

    def log(self, idx, models) -> LoggedEvaluations:
        """Single-model view: row idx[j] evaluated on models[j] only."""
        idx = np.asarray(idx, dtype=np.int64)
        models = np.asarray(models, dtype=np.int64)
        return LoggedEvaluations(self.embeddings[idx], models, self.accuracy[idx, models], self.cost[idx, models], idx)

    def manifest(self, pool: ModelPool) -> DatasetManifest:
        return DatasetManifest(self.d_emb, pool, len(self) * self.n_models, float(self.cost.max(initial=0.0)))


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    train: LoggedEvaluations
    test: EvaluationTable
    train_rows: np.ndarray
    test_rows: np.ndarray

    @property
    def size(self) -> int:
        return len(self.train_rows) + len(self.test_rows)
