"""Nonparametric router: federated K-means over query embeddings.

Clients cluster locally and upload (centroid, size) pairs; the server runs
size-weighted K-means on them; clients then report per-(cluster, model)
means and counts over the global centers, which the server merges with
count weights.  Routing uses the statistics of the nearest center.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._numerics import neumaier_sum, rng_for
from .data import LoggedEvaluations
from .evaluation import NoRoutableModel

log = logging.getLogger(__name__)
STATE_VERSION = 1


def squared_distances(X: np.ndarray, C: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Exact squared Euclidean distances (no norm-expansion cancellation)."""
    out = np.empty((X.shape[0], C.shape[0]))
    for s in range(0, X.shape[0], chunk):
        d = X[s:s + chunk, None, :] - C[None, :, :]
        out[s:s + chunk] = np.einsum("nkd,nkd->nk", d, d)
    return out


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    n_iter: int
    inertia_history: list[float] = field(default_factory=list)
    degenerate: bool = False


def kmeanspp_init(X: np.ndarray, w: np.ndarray, K: int, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Weighted D^2 seeding.  Returns (centers, degenerate) where degenerate
    means some center had to duplicate an existing one."""
    n = X.shape[0]
    idx = [int(rng.choice(n, p=w / w.sum()))]
    d2 = squared_distances(X, X[idx])[:, 0]
    degenerate = False
    for _ in range(1, K):
        score = w * d2
        total = score.sum()
        if total > 0:
            j = int(rng.choice(n, p=score / total))
        else:
            degenerate = True
            j = int(rng.choice(n, p=w / w.sum()))
        idx.append(j)
        d2 = np.minimum(d2, squared_distances(X, X[j:j + 1])[:, 0])
    return X[idx].copy(), degenerate


def _weighted_means(X, w, assign, K):
    tot = np.bincount(assign, weights=w, minlength=K)
    sums = np.zeros((K, X.shape[1]))
    np.add.at(sums, assign, w[:, None] * X)
    return sums, tot


def _lloyd(X, w, centers, max_iter):
    K = centers.shape[0]
    D = squared_distances(X, centers)
    assign = D.argmin(axis=1)
    history = [float(np.sum(w * D[np.arange(len(X)), assign]))]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        sums, tot = _weighted_means(X, w, assign, K)
        centers = centers.copy()
        nonempty = tot > 0
        centers[nonempty] = sums[nonempty] / tot[nonempty, None]
        if not nonempty.all():
            contrib = w * D[np.arange(len(X)), assign]
            for k in np.flatnonzero(~nonempty):
                j = int(np.argmax(contrib))
                centers[k] = X[j]
                contrib[j] = -1.0
        D = squared_distances(X, centers)
        new_assign = D.argmin(axis=1)
        history.append(float(np.sum(w * D[np.arange(len(X)), new_assign])))
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
    return centers, assign, history, n_iter


def lloyd_kmeans(points, weights=None, K: int = 8, n_init: int = 3, max_iter: int = 30, seed: int = 0,
                 init: np.ndarray | None = None) -> KMeansResult:
    """Weighted Lloyd's algorithm, best of ``n_init`` seeded restarts by weighted inertia.

    With ``init`` given, a single run starts from those centers.
    """
    X = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("no points to cluster")
    if K < 1:
        raise ValueError("K must be >= 1")
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    n_distinct = len(np.unique(X, axis=0))
    if K > n_distinct:
        log.warning("K=%d exceeds %d distinct points; surplus clusters duplicate points", K, n_distinct)
    best = None
    starts = [np.asarray(init, dtype=np.float64)] if init is not None else [None] * max(1, n_init)
    for r, start in enumerate(starts):
        degenerate = K > n_distinct
        if start is None:
            start, flag = kmeanspp_init(X, w, K, rng_for(seed, 1010, r))
            degenerate = degenerate or flag
        if start.shape != (K, X.shape[1]):
            raise ValueError(f"init must have shape {(K, X.shape[1])}")
        centers, assign, history, n_iter = _lloyd(X, w, start, max_iter)
        res = KMeansResult(centers, assign, history[-1], n_iter, history, degenerate)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


# ---------------------------------------------------------------- statistics

@dataclass(frozen=True)
class ClusterStats:
    """Per-(cluster, model) counts and means; means are NaN where count is 0."""

    counts: np.ndarray  # (K, M) int
    acc_mean: np.ndarray  # (K, M)
    cost_mean: np.ndarray  # (K, M)


def assign_clusters(centroids: np.ndarray, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return squared_distances(X, centroids).argmin(axis=1)


def client_cluster_stats(centroids: np.ndarray, data: LoggedEvaluations, n_models: int) -> ClusterStats:
    """Local counts and averages per (global cluster, model) over a client's records."""
    K = centroids.shape[0]
    counts = np.zeros((K, n_models), dtype=np.int64)
    acc_sum = np.zeros((K, n_models))
    cost_sum = np.zeros((K, n_models))
    if len(data):
        k = assign_clusters(centroids, data.embeddings)
        np.add.at(counts, (k, data.models), 1)
        np.add.at(acc_sum, (k, data.models), data.accuracy)
        np.add.at(cost_sum, (k, data.models), data.cost)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(counts > 0, acc_sum / counts, np.nan)
        cost = np.where(counts > 0, cost_sum / counts, np.nan)
    return ClusterStats(counts, acc, cost)


def merge_cluster_stats(parts: Sequence[ClusterStats]) -> ClusterStats:
    """Server aggregation: count-weighted means, absent where no one reported."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to merge")
    counts = sum(p.counts for p in parts)
    acc = neumaier_sum([np.where(p.counts > 0, p.counts * np.nan_to_num(p.acc_mean), 0.0) for p in parts])
    cost = neumaier_sum([np.where(p.counts > 0, p.counts * np.nan_to_num(p.cost_mean), 0.0) for p in parts])
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(counts > 0, acc / counts, np.nan)
        cost = np.where(counts > 0, cost / counts, np.nan)
    return ClusterStats(counts, acc, cost)


@dataclass(frozen=True)
class KmeansRouterState:
    centroids: np.ndarray  # (K, d)
    stats: ClusterStats

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]

    @property
    def n_models(self) -> int:
        return self.stats.counts.shape[1]

    def fallback(self) -> ClusterStats:
        """Per-model global means over all clusters (1 x M)."""
        return merge_cluster_stats([ClusterStats(self.stats.counts[k:k + 1], self.stats.acc_mean[k:k + 1],
                                                 self.stats.cost_mean[k:k + 1]) for k in range(self.n_clusters)])

    def assign(self, X) -> np.ndarray:
        return assign_clusters(self.centroids, X)

    def estimate(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Nearest-cluster means; unseen (cluster, model) pairs fall back to the
        model's global mean, models never observed are NaN."""
        fb = self.fallback()
        if not (fb.counts > 0).any():
            raise NoRoutableModel("router has no statistics for any model")
        k = self.assign(X)
        counts = self.stats.counts[k]
        acc = np.where(counts > 0, self.stats.acc_mean[k], fb.acc_mean)
        cost = np.where(counts > 0, self.stats.cost_mean[k], fb.cost_mean)
        return acc, cost

    def occupancy(self) -> float:
        return float((self.stats.counts > 0).mean())


def assign_cluster(state: KmeansRouterState, x) -> int:
    return int(state.assign(np.asarray(x, dtype=np.float64)[None, :])[0])


def cluster_utilities(state: KmeansRouterState, x, lam: float) -> np.ndarray:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    acc, cost = state.estimate(np.asarray(x, dtype=np.float64)[None, :])
    return (acc - lam * cost)[0]


@dataclass
class FederatedKmeansTrace:
    local: list[KMeansResult]
    server: KMeansResult
    uploads: int


def build_federated_kmeans(
    clients: Sequence[LoggedEvaluations],
    n_models: int,
    k_local: int = 15,
    k_global: int = 20,
    n_init: int = 3,
    max_iter: int = 30,
    seed: int = 0,
    global_centroids: np.ndarray | None = None,
    return_trace: bool = False,
):
    """Two-stage federated clustering followed by statistic aggregation.

    ``global_centroids`` skips the clustering stages and aggregates against
    the supplied centers.
    """
    if not any(len(c) for c in clients):
        raise ValueError("at least one client needs a non-empty training set")
    trace = None
    if global_centroids is None:
        locals_, mus, sizes = [], [], []
        for i, c in enumerate(clients):
            if len(c) == 0:
                continue
            k_i = min(k_local, len(c))
            res = lloyd_kmeans(c.embeddings, None, k_i, n_init, max_iter, rng_for(seed, 1111, i).integers(2**31))
            locals_.append(res)
            n_ij = np.bincount(res.assignments, minlength=k_i)
            keep = n_ij > 0
            mus.append(res.centroids[keep])
            sizes.append(n_ij[keep])
        mus = np.concatenate(mus)
        sizes = np.concatenate(sizes).astype(np.float64)
        server = lloyd_kmeans(mus, sizes, k_global, n_init, max_iter, rng_for(seed, 1112).integers(2**31))
        global_centroids = server.centroids
        trace = FederatedKmeansTrace(locals_, server, len(mus))
    stats = merge_cluster_stats([client_cluster_stats(global_centroids, c, n_models) for c in clients])
    state = KmeansRouterState(np.asarray(global_centroids, dtype=np.float64), stats)
    return (state, trace) if return_trace else state


def build_centralized_kmeans(data: LoggedEvaluations, n_models: int, k: int = 20, n_init: int = 3,
                             max_iter: int = 30, seed: int = 0) -> KmeansRouterState:
    """Plain K-means router on one dataset (pooled baseline or client-local router)."""
    res = lloyd_kmeans(data.embeddings, None, min(k, len(data)), n_init, max_iter, seed)
    return KmeansRouterState(res.centroids, client_cluster_stats(res.centroids, data, n_models))


def merge_into_state(state: KmeansRouterState, new: Sequence[LoggedEvaluations]) -> KmeansRouterState:
    """Fold new clients' statistics into an existing router (centers fixed)."""
    parts = [state.stats] + [client_cluster_stats(state.centroids, d, state.n_models) for d in new]
    return KmeansRouterState(state.centroids, merge_cluster_stats(parts))


# ---------------------------------------------------------------- persistence

def save_state(path, state: KmeansRouterState, extra: dict | None = None) -> None:
    """Centroids plus a sparse (k, m) -> (acc, cost, count) table as JSON."""
    rows = []
    for k, m in zip(*np.nonzero(state.stats.counts)):
        rows.append([int(k), int(m), float(state.stats.acc_mean[k, m]), float(state.stats.cost_mean[k, m]),
                     int(state.stats.counts[k, m])])
    doc = {
        "format": "fedrouter-kmeans",
        "version": STATE_VERSION,
        "n_models": state.n_models,
        "centroids": state.centroids.tolist(),
        "stats": rows,
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc))


def load_state(path) -> KmeansRouterState:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"K-means router state not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("format") != "fedrouter-kmeans" or doc.get("version") != STATE_VERSION:
        raise ValueError(f"{path}: not a version-{STATE_VERSION} K-means router state")
    C = np.array(doc["centroids"], dtype=np.float64)
    K, M = C.shape[0], doc["n_models"]
    counts = np.zeros((K, M), dtype=np.int64)
    acc = np.full((K, M), np.nan)
    cost = np.full((K, M), np.nan)
    for k, m, a, c, n in doc["stats"]:
        counts[k, m] = n
        acc[k, m] = a
        cost[k, m] = c
    return KmeansRouterState(C, ClusterStats(counts, acc, cost))
