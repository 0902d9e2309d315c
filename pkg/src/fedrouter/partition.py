"""Non-IID client simulation via Dirichlet splits.

Query heterogeneity: per task label, client proportions ~ Dir(alpha_query).
Model heterogeneity: per client, logging proportions ~ Dir(alpha_model);
each *training* record is logged on one model sampled from them.  Test
records keep every model's evaluation so any routed choice can be scored.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._numerics import rng_for, round_half_up
from .data import ClientDataset, EvaluationTable

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PartitionConfig:
    n_clients: int = 10
    alpha_query: float = 0.6
    alpha_model: float = 0.45
    train_fraction: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if not self.alpha_query > 0:
            raise ValueError("alpha_query must be > 0")
        if not self.alpha_model > 0:
            raise ValueError("alpha_model must be > 0")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class ClientPartition:
    clients: list[ClientDataset]
    config: PartitionConfig
    model_proportions: np.ndarray  # (n_clients, M) logging distributions

    def __len__(self) -> int:
        return len(self.clients)


def dirichlet(rng: np.random.Generator, alpha: float, k: int) -> np.ndarray:
    """Symmetric Dirichlet draw as normalized Gamma variates."""
    g = rng.gamma(alpha, 1.0, size=k)
    total = g.sum()
    if total <= 0 or not np.isfinite(total):
        # every Gamma draw underflowed (tiny alpha); the limit is a vertex
        out = np.zeros(k)
        out[rng.integers(k)] = 1.0
        return out
    return g / total


def partition_queries(tasks, n_clients: int, alpha_query: float, seed: int,
                      return_proportions: bool = False):
    """Split corpus rows across clients, task by task.

    Returns one sorted row-index array per client (and optionally the
    per-task client proportions, shape (n_tasks, n_clients)).
    """
    tasks = np.asarray(tasks)
    if len(tasks) < n_clients:
        raise ValueError(f"{len(tasks)} records cannot cover {n_clients} clients")
    labels = np.unique(tasks)
    if len(labels) == 0:
        raise ValueError("corpus has no task labels")
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    props = np.zeros((len(labels), n_clients))
    for t_i, t in enumerate(labels):
        rng = rng_for(seed, 1, t_i)
        rows = np.flatnonzero(tasks == t)
        p = dirichlet(rng, alpha_query, n_clients)
        props[t_i] = p
        counts = rng.multinomial(len(rows), p)
        perm = rng.permutation(rows)
        for c, part in enumerate(np.split(perm, np.cumsum(counts)[:-1])):
            buckets[c].append(part)
    out = [np.sort(np.concatenate(b)) if b else np.zeros(0, np.int64) for b in buckets]
    for c, rows in enumerate(out):
        if len(rows) == 0:
            warnings.warn(f"client {c} received no records; kept with zero weight")
    return (out, props) if return_proportions else out


def assign_logged_models(client_rows: Sequence[np.ndarray], n_models: int, alpha_model: float, seed: int
                         ) -> tuple[list[np.ndarray], np.ndarray]:
    """Pick the single logged model of every record, per-client Dirichlet mixture."""
    props = np.zeros((len(client_rows), n_models))
    models = []
    for i, rows in enumerate(client_rows):
        rng = rng_for(seed, 2, i)
        p = dirichlet(rng, alpha_model, n_models)
        props[i] = p
        models.append(rng.choice(n_models, size=len(rows), p=p).astype(np.int64))
    return models, props


def split_train_test(rows, train_fraction: float, seed: int | np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform shuffle then prefix split; |train| = round(train_fraction * n)."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    rows = np.asarray(rows, dtype=np.int64)
    if len(rows) < 2:
        warnings.warn(f"client with {len(rows)} records: test split may be empty")
    rng = seed if isinstance(seed, np.random.Generator) else rng_for(seed, 3)
    perm = rng.permutation(rows)
    n_train = round_half_up(train_fraction * len(rows))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def build_partition(table: EvaluationTable, config: PartitionConfig) -> ClientPartition:
    client_rows = partition_queries(table.tasks, config.n_clients, config.alpha_query, config.seed)
    splits = [split_train_test(rows, config.train_fraction, rng_for(config.seed, 3, i))
              for i, rows in enumerate(client_rows)]
    models, props = assign_logged_models([tr for tr, _ in splits], table.n_models, config.alpha_model, config.seed)
    clients = [
        ClientDataset(i, table.log(tr, ms), table.subset(te), tr, te)
        for i, ((tr, te), ms) in enumerate(zip(splits, models))
    ]
    return ClientPartition(clients, config, props)


def global_test(partition: ClientPartition) -> EvaluationTable:
    return concat_tables([c.test for c in partition.clients])


def concat_tables(tables: Sequence[EvaluationTable]) -> EvaluationTable:
    return EvaluationTable(
        np.concatenate([t.embeddings for t in tables]),
        np.concatenate([t.accuracy for t in tables]),
        np.concatenate([t.cost for t in tables]),
        np.concatenate([t.tasks for t in tables]),
        tables[0].task_names,
    )


def save_partition(path, partition: ClientPartition) -> None:
    """Replayable manifest: per-client corpus rows, split membership and logged models."""
    doc = {
        "config": asdict(partition.config),
        "model_proportions": partition.model_proportions.tolist(),
        "clients": [
            {
                "client_id": c.client_id,
                "train_rows": c.train_rows.tolist(),
                "train_models": c.train.models.tolist(),
                "test_rows": c.test_rows.tolist(),
            }
            for c in partition.clients
        ],
    }
    Path(path).write_text(json.dumps(doc))


def load_partition(path, table: EvaluationTable) -> ClientPartition:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"partition manifest not found: {path}")
    doc = json.loads(path.read_text())
    clients = []
    for c in doc["clients"]:
        tr = np.array(c["train_rows"], dtype=np.int64)
        te = np.array(c["test_rows"], dtype=np.int64)
        clients.append(ClientDataset(c["client_id"], table.log(tr, c["train_models"]), table.subset(te), tr, te))
    return ClientPartition(clients, PartitionConfig(**doc["config"]), np.array(doc["model_proportions"]))
