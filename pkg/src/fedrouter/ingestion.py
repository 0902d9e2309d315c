"""Corpus loading/saving and the synthetic ground-truth generator.

Corpus files are comma-delimited with header
``task,model,accuracy,cost,e0,...,e{d-1}``; one row per (query, model)
evaluation.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from ._numerics import rng_for
from .data import DatasetManifest, EvaluationRecord, EvaluationTable, ModelPool
from .evaluation import route

log = logging.getLogger(__name__)

FIXED_COLUMNS = ("task", "model", "accuracy", "cost")


class CorpusFormatError(ValueError):
    """Raised for malformed corpus files; message names the row and column."""


def load_corpus(path, delimiter: str = ",") -> tuple[list[EvaluationRecord], DatasetManifest, list[str]]:
    """Parse a corpus file.

    Returns the records, a manifest (``d_emb`` from the header,
    ``cost_normalizer`` = max observed cost) and the task-name list in
    order of first appearance.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CorpusFormatError(f"{path}: empty file") from None
        if tuple(header[:4]) != FIXED_COLUMNS:
            raise CorpusFormatError(f"{path}: header must start with {','.join(FIXED_COLUMNS)}, got {header[:4]}")
        emb_cols = header[4:]
        for j, name in enumerate(emb_cols):
            if name != f"e{j}":
                raise CorpusFormatError(f"{path}: embedding column {j} is named {name!r}, expected 'e{j}'")
        d_emb = len(emb_cols)
        if d_emb == 0:
            raise CorpusFormatError(f"{path}: no embedding columns")

        models: dict[str, int] = {}
        tasks: dict[str, int] = {}
        records: list[EvaluationRecord] = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CorpusFormatError(
                    f"{path}: row {lineno}: expected {len(header)} columns, got {len(row)} (inconsistent embedding width)")
            values = []
            for col, cell in zip(header[2:], row[2:]):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise CorpusFormatError(f"{path}: row {lineno}, column {col!r}: not a number: {cell!r}") from None
            task, model = row[0].strip(), row[1].strip()
            tasks.setdefault(task, len(tasks))
            m = models.setdefault(model, len(models))
            records.append(EvaluationRecord(tuple(values[2:]), m, values[0], values[1], task))

    max_cost = max((r.cost for r in records), default=0.0)
    if not models:
        raise CorpusFormatError(f"{path}: no data rows")
    pool = ModelPool(tuple(models), max_cost if max_cost > 0 else 1.0)
    manifest = DatasetManifest(d_emb, pool, len(records), max_cost if max_cost > 0 else 1.0)
    return records, manifest, list(tasks)


def full_evaluation_table(records: Sequence[EvaluationRecord], n_models: int, task_names: Sequence[str] = ()) -> EvaluationTable:
    """Group per-(query, model) records into a table with every model per query.

    A query is identified by (task label, embedding).  Raises if any query
    lacks an evaluation for some model.
    """
    index: dict[tuple, int] = {}
    rows: list[list] = []
    tnames = {t: i for i, t in enumerate(task_names)}
    for r in records:
        key = (r.task_label, r.embedding)
        q = index.get(key)
        if q is None:
            q = index[key] = len(rows)
            rows.append([r.embedding, r.task_label, [None] * n_models, [None] * n_models])
        rows[q][2][r.model_index] = r.accuracy
        rows[q][3][r.model_index] = r.cost
    for q, (_, task, acc, _) in enumerate(rows):
        missing = [m for m in range(n_models) if acc[m] is None]
        if missing:
            raise CorpusFormatError(f"query {q} (task {task!r}) has no evaluation for models {missing}")
        tnames.setdefault(task, len(tnames))
    return EvaluationTable(
        np.array([r[0] for r in rows]).reshape(len(rows), -1),
        np.array([r[2] for r in rows], dtype=np.float64).reshape(len(rows), n_models),
        np.array([r[3] for r in rows], dtype=np.float64).reshape(len(rows), n_models),
        np.array([tnames[r[1]] for r in rows], dtype=np.int64),
        tuple(tnames),
    )


def save_corpus(path, table: EvaluationTable, pool: ModelPool) -> None:
    """Write a full-evaluation table in long format (one row per query and model)."""
    path = Path(path)
    header = list(FIXED_COLUMNS) + [f"e{j}" for j in range(table.d_emb)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for q in range(len(table)):
            emb = [repr(float(v)) for v in table.embeddings[q]]
            task = table.task_names[table.tasks[q]]
            for m, name in enumerate(pool.models):
                w.writerow([task, name, repr(float(table.accuracy[q, m])), repr(float(table.cost[q, m]))] + emb)


def clipped_normal_mean(mu, sigma: float, upper: float):
    """E[clip(Y, 0, upper)] for Y ~ N(mu, sigma^2)."""
    mu = np.asarray(mu, dtype=np.float64)
    if sigma <= 0:
        return np.clip(mu, 0.0, upper)
    a = (0.0 - mu) / sigma
    b = (upper - mu) / sigma
    inside = mu * (norm.cdf(b) - norm.cdf(a)) + sigma * (norm.pdf(a) - norm.pdf(b))
    return inside + upper * norm.sf(b)


@dataclass(frozen=True)
class SyntheticOracle:
    """Gaussian-mixture queries with closed-form accuracy and cost laws.

    True accuracy is ``expit(acc_weights[m] . x + acc_bias[m])``.  Observed
    cost is ``clip(base_costs[m] + cost_noise * z, 0, c_max)`` where ``z`` is
    one standard normal draw per query, shared by all models (a stand-in for
    response length), so per-query model costs keep the base-cost order.
    """

    centers: np.ndarray  # (T, d)
    spread: float
    task_probs: np.ndarray  # (T,)
    acc_weights: np.ndarray  # (M, d)
    acc_bias: np.ndarray  # (M,)
    base_costs: np.ndarray  # (M,)
    cost_noise: float
    c_max: float
    model_names: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("centers", "task_probs", "acc_weights", "acc_bias", "base_costs"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if not self.model_names:
            object.__setattr__(self, "model_names", tuple(f"model_{m}" for m in range(len(self.base_costs))))
        if self.acc_weights.shape != (len(self.base_costs), self.centers.shape[1]):
            raise ValueError("accuracy weights must be (n_models, d_emb)")
        if np.any(self.base_costs < 0) or np.any(self.base_costs > self.c_max):
            raise ValueError("base costs must lie in [0, c_max]")

    @property
    def n_models(self) -> int:
        return len(self.base_costs)

    @property
    def n_tasks(self) -> int:
        return self.centers.shape[0]

    @property
    def d_emb(self) -> int:
        return self.centers.shape[1]

    @property
    def model_pool(self) -> ModelPool:
        return ModelPool(self.model_names, self.c_max)

    def true_accuracy(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        with np.errstate(invalid="ignore"):
            z = X @ self.acc_weights.T + self.acc_bias
        return expit(z)

    def true_cost(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        means = clipped_normal_mean(self.base_costs, self.cost_noise, self.c_max)
        return np.broadcast_to(means, (X.shape[0], self.n_models)).copy()

    def utilities(self, X, lam: float) -> np.ndarray:
        return self.true_accuracy(X) - lam * self.true_cost(X)

    def estimate(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Estimator interface: the oracle's own expected accuracy and cost."""
        return self.true_accuracy(X), self.true_cost(X)

    def expected_table(self, X, tasks) -> EvaluationTable:
        return EvaluationTable(X, self.true_accuracy(X), self.true_cost(X), tasks)

    def without_models(self, models: Sequence[int]) -> "SyntheticOracle":
        keep = [m for m in range(self.n_models) if m not in set(models)]
        return SyntheticOracle(self.centers, self.spread, self.task_probs, self.acc_weights[keep], self.acc_bias[keep],
                               self.base_costs[keep], self.cost_noise, self.c_max,
                               tuple(self.model_names[m] for m in keep))

    def to_dict(self) -> dict:
        return {
            "centers": self.centers.tolist(),
            "spread": float(self.spread),
            "task_probs": self.task_probs.tolist(),
            "acc_weights": self.acc_weights.tolist(),
            "acc_bias": self.acc_bias.tolist(),
            "base_costs": self.base_costs.tolist(),
            "cost_noise": float(self.cost_noise),
            "c_max": float(self.c_max),
            "model_names": list(self.model_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticOracle":
        return cls(np.array(d["centers"]), d["spread"], np.array(d["task_probs"]), np.array(d["acc_weights"]),
                   np.array(d["acc_bias"]), np.array(d["base_costs"]), d["cost_noise"], d["c_max"],
                   tuple(d.get("model_names", ())))


def save_oracle(path, oracle: SyntheticOracle) -> None:
    Path(path).write_text(json.dumps(oracle.to_dict(), indent=1))


def load_oracle(path) -> SyntheticOracle:
    return SyntheticOracle.from_dict(json.loads(Path(path).read_text()))


def make_oracle(
    d_emb: int,
    n_models: int,
    n_tasks: int,
    seed: int,
    *,
    center_radius: float = 3.0,
    spread: float = 0.6,
    skill_scale: float = 2.5,
    quality_slope: float = 1.5,
    cost_range: tuple[float, float] = (0.05, 1.0),
    cost_noise: float = 0.02,
    c_max: float = 1.0,
) -> SyntheticOracle:
    """Draw a random oracle where pricier models are better on average but
    every model has task-dependent strengths."""
    rng = rng_for(seed, 101)
    centers = rng.standard_normal((n_tasks, d_emb))
    centers *= center_radius / np.linalg.norm(centers, axis=1, keepdims=True)
    weights = rng.standard_normal((n_models, d_emb)) * (skill_scale / center_radius)
    if n_models > 1:
        rank = np.linspace(-1.0, 1.0, n_models)
        costs = np.geomspace(*cost_range, n_models)
    else:
        rank = np.zeros(1)
        costs = np.array([cost_range[1]])
    bias = quality_slope * rank
    task_probs = np.full(n_tasks, 1.0 / n_tasks)
    return SyntheticOracle(centers, spread, task_probs, weights, bias, costs, cost_noise, c_max)


def generate_synthetic(oracle: SyntheticOracle, n_queries: int, seed: int, n_tasks: int | None = None
                       ) -> tuple[EvaluationTable, SyntheticOracle]:
    """Sample queries from the oracle's mixture and evaluate them on every model.

    The task label of a query is the index of its mixture component.
    Accuracies are Bernoulli draws with the oracle's mean; costs are the
    clipped noisy base costs.  Single-model logging happens later
    (``partition.assign_logged_models``).
    """
    if n_queries < 1:
        raise ValueError("n_queries must be >= 1")
    if n_tasks is not None and n_tasks != oracle.n_tasks:
        raise ValueError(f"oracle has {oracle.n_tasks} mixture components, asked for {n_tasks} tasks")
    rng = rng_for(seed, 202)
    tasks = rng.choice(oracle.n_tasks, size=n_queries, p=oracle.task_probs)
    X = oracle.centers[tasks] + oracle.spread * rng.standard_normal((n_queries, oracle.d_emb))
    p = oracle.true_accuracy(X)
    acc = (rng.random(p.shape) < p).astype(np.float64)
    z = rng.standard_normal((n_queries, 1))
    cost = np.clip(oracle.base_costs[None, :] + oracle.cost_noise * z, 0.0, oracle.c_max)
    return EvaluationTable(X, acc, cost, tasks), oracle


def oracle_policy(oracle: SyntheticOracle, X, lam: float) -> np.ndarray:
    """pi*(x) for a batch: argmax of true utility, ties to cheaper then lower index."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    acc, cost = oracle.estimate(X)
    return route(acc - lam * cost, cost)


def oracle_best_model(oracle: SyntheticOracle, x, lam: float) -> int:
    return int(oracle_policy(oracle, np.asarray(x, dtype=np.float64)[None, :], lam)[0])
