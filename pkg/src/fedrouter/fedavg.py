"""FedAvg over the MLP router: sampling, local training, size-weighted averaging."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._numerics import neumaier_sum, rng_for, round_half_up
from .data import LoggedEvaluations
from .mlp import MlpParams, OptimizerConfig, local_train, mean_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 50
    participation: float = 0.6
    local_epochs: int = 1
    batch_size: int = 128
    local_steps: int | None = None  # fixed tau steps instead of epochs when set
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if not 0 < self.participation <= 1:
            raise ValueError(f"participation must lie in (0, 1], got {self.participation}")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def participant_count(n_clients: int, fraction: float) -> int:
    return max(1, min(n_clients, round_half_up(fraction * n_clients)))


def sample_participants(n_clients: int, fraction: float, round_index: int, seed: int) -> np.ndarray:
    """Sorted client ids drawn uniformly without replacement for one round."""
    if not 0 < fraction <= 1:
        raise ValueError("participation fraction must lie in (0, 1]")
    k = participant_count(n_clients, fraction)
    if k == n_clients:
        return np.arange(n_clients)
    return np.sort(rng_for(seed, 808, round_index).choice(n_clients, size=k, replace=False))


def aggregate(params_list: Sequence[MlpParams], weights: Sequence[float]) -> MlpParams:
    """Coordinatewise convex combination with weights w_i / sum(w)."""
    if not params_list:
        raise ValueError("nothing to aggregate")
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(params_list):
        raise ValueError("one weight per parameter set required")
    if np.any(w < 0) or not w.sum() > 0:
        raise ValueError("weights must be non-negative and not all zero")
    ref = params_list[0]
    for p in params_list[1:]:
        if p.tensors.keys() != ref.tensors.keys() or any(p[k].shape != ref[k].shape for k in ref.tensors):
            raise ValueError("parameter shapes differ across clients")
    w = w / math.fsum(w)
    if len(params_list) == 1:
        return ref.copy()
    out = {}
    for k in ref.tensors:
        mixed = neumaier_sum([wi * p[k] for wi, p in zip(w, params_list) if wi > 0])
        # coordinates every client agrees on (e.g. frozen ones) come back exactly
        agree = np.logical_and.reduce([p[k] == ref[k] for p in params_list[1:]])
        out[k] = np.where(agree, ref[k], mixed)
    return ref.replace(out)


@dataclass
class RoundRecord:
    round: int
    participants: list[int]
    weights: list[float]
    participant_loss: float
    global_loss: float
    wall_time: float


@dataclass
class FederatedResult:
    params: MlpParams
    trace: list[RoundRecord] = field(default_factory=list)
    initial_loss: float = float("nan")


def _weighted_loss(losses: Mapping[int, float], sizes: Mapping[int, int], ids) -> float:
    ids = [i for i in ids if sizes[i] > 0]
    total = sum(sizes[i] for i in ids)
    if total == 0:
        return float("nan")
    return math.fsum(sizes[i] * losses[i] for i in ids) / total


def run_federated_training(
    clients: Sequence[LoggedEvaluations],
    initial: MlpParams,
    config: FederationConfig = FederationConfig(),
    optimizer: OptimizerConfig = OptimizerConfig(),
    cost_normalizer: float = 1.0,
    threads: int = 1,
    track_loss: bool = True,
    trainable=None,
    teacher_params: MlpParams | None = None,
    distill_weight: float = 0.0,
) -> FederatedResult:
    """T rounds of broadcast -> local training -> |D_i|-weighted averaging."""
    sizes = {i: len(c) for i, c in enumerate(clients)}
    if not any(sizes.values()):
        raise ValueError("at least one client needs a non-empty training set")
    params = initial

    def client_losses(p):
        return {i: mean_loss(p, c, cost_normalizer) if len(c) else float("nan") for i, c in enumerate(clients)}

    result = FederatedResult(params)
    if track_loss:
        result.initial_loss = _weighted_loss(client_losses(params), sizes, sizes)

    for t in range(config.rounds):
        start = time.perf_counter()
        active = [int(i) for i in sample_participants(len(clients), config.participation, t, config.seed)]

        def train_one(i):
            return local_train(
                params, clients[i], epochs=config.local_epochs, batch_size=config.batch_size,
                optimizer=optimizer, seed=int(rng_for(config.seed, 909, t, i).integers(2**31)),
                cost_normalizer=cost_normalizer, steps=config.local_steps, trainable=trainable,
                teacher_params=teacher_params, distill_weight=distill_weight,
            )

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                local = list(pool.map(train_one, active))
        else:
            local = [train_one(i) for i in active]
        weights = [float(sizes[i]) for i in active]
        if sum(weights) > 0:
            params = aggregate(local, weights)
        else:
            log.warning("round %d: all participants empty; parameters unchanged", t)
        record = RoundRecord(t, active, [w / sum(weights) if sum(weights) else 0.0 for w in weights],
                             float("nan"), float("nan"), 0.0)
        if track_loss:
            losses = client_losses(params)
            record.participant_loss = _weighted_loss(losses, sizes, active)
            record.global_loss = _weighted_loss(losses, sizes, sizes)
        record.wall_time = time.perf_counter() - start
        result.trace.append(record)
        log.debug("round %d participants=%s loss=%.5f", t, active, record.global_loss)
    result.params = params
    return result


def write_round_trace(path, trace: Sequence[RoundRecord]) -> None:
    lines = ["round,participants,weights,participant_loss,global_loss,wall_time"]
    for r in trace:
        lines.append(",".join([
            str(r.round),
            ";".join(map(str, r.participants)),
            ";".join(repr(w) for w in r.weights),
            repr(r.participant_loss),
            repr(r.global_loss),
            f"{r.wall_time:.6f}",
        ]))
    Path(path).write_text("\n".join(lines) + "\n")
