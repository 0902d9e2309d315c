"""Error-weighted blending of federated and local routers, and pool expansion.

Blend weights are the share of the federated estimator's calibration error,
so the estimator with the smaller error gets the larger weight:
``w = e_fed / (e_fed + e_local)`` is the weight on the *local* estimate.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._numerics import rng_for
from .data import LoggedEvaluations
from .evaluation import Estimator
from .fedavg import FederatedResult, FederationConfig, run_federated_training
from .kmeans import ClusterStats, KmeansRouterState, client_cluster_stats, merge_cluster_stats, merge_into_state
from .mlp import MlpArchitecture, MlpParams, OptimizerConfig, local_train


def calibration_errors(estimator: Estimator, train: LoggedEvaluations, n_models: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-model MAE of (accuracy, cost) on a client's logged records.

    Costs are compared in currency units.  NaN marks models with no
    records, or that the estimator cannot score.
    """
    mae_acc = np.full(n_models, np.nan)
    mae_cost = np.full(n_models, np.nan)
    if len(train) == 0:
        return mae_acc, mae_cost
    acc, cost = estimator.estimate(train.embeddings)
    rows = np.arange(len(train))
    ea = np.abs(acc[rows, train.models] - train.accuracy)
    ec = np.abs(cost[rows, train.models] - train.cost)
    for m in range(n_models):
        sel = train.models == m
        if sel.any() and not np.isnan(ea[sel]).any():
            mae_acc[m] = math.fsum(ea[sel]) / sel.sum()
            mae_cost[m] = math.fsum(ec[sel]) / sel.sum()
    return mae_acc, mae_cost


@dataclass(frozen=True)
class PersonalizationWeights:
    w_acc: np.ndarray  # weight on the local accuracy estimate, per model
    w_cost: np.ndarray
    fed_errors: tuple[np.ndarray, np.ndarray]
    local_errors: tuple[np.ndarray, np.ndarray]


def _blend_one(e_fed: np.ndarray, e_loc: np.ndarray) -> np.ndarray:
    w = np.zeros(len(e_fed))
    for m, (f, l) in enumerate(zip(e_fed, e_loc)):
        if math.isnan(l):
            w[m] = 0.0  # no local evidence
        elif math.isnan(f):
            w[m] = 1.0  # federated router cannot score this model
        elif f + l > 0:
            w[m] = f / (f + l)
        else:
            w[m] = 0.0  # both perfect: prefer the wider-coverage router
    return w


def blend_weights(fed_errors: tuple[np.ndarray, np.ndarray], local_errors: tuple[np.ndarray, np.ndarray]
                  ) -> PersonalizationWeights:
    fed_errors = tuple(np.asarray(e, dtype=np.float64) for e in fed_errors)
    local_errors = tuple(np.asarray(e, dtype=np.float64) for e in local_errors)
    return PersonalizationWeights(
        _blend_one(fed_errors[0], local_errors[0]),
        _blend_one(fed_errors[1], local_errors[1]),
        fed_errors, local_errors,
    )


def _mix(w, local, fed):
    w = np.broadcast_to(w, fed.shape)
    inner = np.where(np.isnan(local) | np.isnan(fed), np.nan, w * local + (1.0 - w) * fed)
    return np.where(w == 0.0, fed, np.where(w == 1.0, local, inner))


@dataclass(frozen=True)
class BlendedRouter:
    fed: Estimator
    local: Estimator
    weights: PersonalizationWeights

    def estimate(self, X) -> tuple[np.ndarray, np.ndarray]:
        fa, fc = self.fed.estimate(X)
        la, lc = self.local.estimate(X)
        return _mix(self.weights.w_acc, la, fa), _mix(self.weights.w_cost, lc, fc)


def personalize(fed: Estimator, local: Estimator, train: LoggedEvaluations, n_models: int) -> BlendedRouter:
    """Calibrate both routers on the client's own training records and blend."""
    w = blend_weights(calibration_errors(fed, train, n_models), calibration_errors(local, train, n_models))
    return BlendedRouter(fed, local, w)


def personalized_utilities(fed: Estimator, local: Estimator, weights: PersonalizationWeights, x, lam: float) -> np.ndarray:
    acc, cost = BlendedRouter(fed, local, weights).estimate(np.atleast_2d(x))
    return (acc - lam * cost)[0]


def write_personalization_report(path, rows: Sequence[tuple[int, PersonalizationWeights]]) -> None:
    lines = ["client,model,mae_acc_fed,mae_acc_local,mae_cost_fed,mae_cost_local,w_acc,w_cost"]
    for client, w in rows:
        for m in range(len(w.w_acc)):
            lines.append(",".join([str(client), str(m)] + [repr(float(v)) for v in (
                w.fed_errors[0][m], w.local_errors[0][m], w.fed_errors[1][m], w.local_errors[1][m],
                w.w_acc[m], w.w_cost[m])]))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- new models

def expand_heads(params: MlpParams, seed: int) -> tuple[MlpParams, dict[str, np.ndarray]]:
    """Append one accuracy head and one cost head; returns (params, trainable mask)."""
    arch = params.arch
    H = arch.hidden_widths[-1]
    rng = rng_for(seed, 1212)
    bound = 1.0 / math.sqrt(H)
    t = dict(params.tensors)
    t["acc_W"] = np.vstack([params["acc_W"], rng.uniform(-bound, bound, size=(1, H))])
    t["cost_W"] = np.vstack([params["cost_W"], rng.uniform(-bound, bound, size=(1, H))])
    t["acc_b"] = np.append(params["acc_b"], 0.0)
    t["cost_b"] = np.append(params["cost_b"], 0.0)
    new = MlpParams(MlpArchitecture(arch.d_emb, arch.n_models + 1, arch.hidden_widths, arch.dropout), t)
    mask = {k: np.zeros(v.shape, dtype=bool) for k, v in t.items()}
    for k in ("acc_W", "acc_b", "cost_W", "cost_b"):
        mask[k][-1] = True
    return new, mask


def _relabel(data: LoggedEvaluations, m: int) -> LoggedEvaluations:
    return LoggedEvaluations(data.embeddings, np.full(len(data), m), data.accuracy, data.cost, data.rows)


def add_model_mlp(params: MlpParams, calibration: LoggedEvaluations, optimizer: OptimizerConfig = OptimizerConfig(),
                  epochs: int = 20, batch_size: int = 128, seed: int = 0, cost_normalizer: float = 1.0) -> MlpParams:
    """Add a head for a new model and train only that head on its calibration records."""
    new, mask = expand_heads(params, seed)
    if len(calibration) == 0:
        warnings.warn("empty calibration set: new head added untrained")
        return new
    data = _relabel(calibration, params.arch.n_models)
    return local_train(new, data, epochs, batch_size, optimizer, seed, cost_normalizer, trainable=mask)


def add_model_mlp_federated(params: MlpParams, calibration: Sequence[LoggedEvaluations], config: FederationConfig,
                            optimizer: OptimizerConfig = OptimizerConfig(), cost_normalizer: float = 1.0,
                            seed: int = 0) -> MlpParams:
    """Head-only FedAvg over every client's calibration records for the new model."""
    new, mask = expand_heads(params, seed)
    data = [_relabel(c, params.arch.n_models) for c in calibration]
    if not any(len(d) for d in data):
        warnings.warn("empty calibration set: new head added untrained")
        return new
    return run_federated_training(data, new, config, optimizer, cost_normalizer, trainable=mask,
                                  track_loss=False).params


def add_model_kmeans(state: KmeansRouterState, calibration: LoggedEvaluations | Sequence[LoggedEvaluations]
                     ) -> KmeansRouterState:
    """Estimate the new model's per-cluster statistics; existing statistics untouched."""
    parts = [calibration] if isinstance(calibration, LoggedEvaluations) else list(calibration)
    m_new = state.n_models
    col = merge_cluster_stats([client_cluster_stats(state.centroids, _relabel(p, 0), 1) for p in parts])
    stats = ClusterStats(
        np.hstack([state.stats.counts, col.counts]),
        np.hstack([state.stats.acc_mean, col.acc_mean]),
        np.hstack([state.stats.cost_mean, col.cost_mean]),
    )
    assert stats.counts.shape[1] == m_new + 1
    return KmeansRouterState(state.centroids, stats)


# ---------------------------------------------------------------- new clients

def add_clients_mlp(base: MlpParams, new_clients: Sequence[LoggedEvaluations], distill_weight: float = 1.0,
                    config: FederationConfig = FederationConfig(), optimizer: OptimizerConfig = OptimizerConfig(),
                    cost_normalizer: float = 1.0, track_loss: bool = True) -> FederatedResult:
    """Continue FedAvg on the new clients only, distilling toward the frozen base router."""
    if distill_weight < 0:
        raise ValueError("distill_weight must be >= 0")
    teacher = base.copy()
    return run_federated_training(new_clients, base, config, optimizer, cost_normalizer, track_loss=track_loss,
                                  teacher_params=teacher if distill_weight > 0 else None,
                                  distill_weight=distill_weight)


def add_clients_kmeans(state: KmeansRouterState, new_clients: Sequence[LoggedEvaluations]) -> KmeansRouterState:
    return merge_into_state(state, new_clients)
