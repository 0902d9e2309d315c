"""Utility-maximizing routing, lambda sweeps and accuracy--cost frontiers.

An *estimator* is anything with ``estimate(X) -> (acc, cost)`` returning
``(n, M)`` arrays in currency units; NaN marks a model the estimator
cannot score.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .data import EvaluationTable


class Estimator(Protocol):
    def estimate(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


class NoRoutableModel(ValueError):
    pass


def route(utilities, est_costs=None) -> np.ndarray | int:
    """Argmax over present (non-NaN) utilities.

    Ties go to the lower estimated cost, then to the lower model index.
    Accepts a single vector or an (n, M) batch.
    """
    u = np.asarray(utilities, dtype=np.float64)
    single = u.ndim == 1
    u = np.atleast_2d(u)
    c = np.zeros_like(u) if est_costs is None else np.atleast_2d(np.asarray(est_costs, dtype=np.float64))
    present = ~np.isnan(u)
    if not present.any(axis=1).all():
        bad = int(np.flatnonzero(~present.any(axis=1))[0])
        raise NoRoutableModel(f"query {bad}: no model has an estimated utility")
    u_masked = np.where(present, u, -np.inf)
    best = u_masked.max(axis=1, keepdims=True)
    cand = u_masked == best
    c_masked = np.where(cand, np.nan_to_num(c, nan=np.inf), np.inf)
    cheapest = c_masked.min(axis=1, keepdims=True)
    cand &= c_masked == cheapest
    choice = cand.argmax(axis=1)
    return int(choice[0]) if single else choice


def choose(estimator: Estimator, X, lam: float) -> np.ndarray:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    acc, cost = estimator.estimate(np.atleast_2d(X))
    return route(acc - lam * cost, cost)


def evaluate_choices(table: EvaluationTable, choices) -> tuple[float, float]:
    """Mean realized (accuracy, cost) of routing query q to choices[q]."""
    choices = np.asarray(choices, dtype=np.int64)
    rows = np.arange(len(table))
    acc = table.accuracy[rows, choices]
    cost = table.cost[rows, choices]
    if np.isnan(acc).any() or np.isnan(cost).any():
        raise ValueError("missing ground truth for a chosen model")
    n = len(table)
    return math.fsum(acc) / n, math.fsum(cost) / n


def evaluate_policy(policy: Estimator | Callable, table: EvaluationTable, lam: float) -> tuple[float, float]:
    """Route every test query and average the chosen models' accuracy and cost.

    ``policy`` is either an estimator (routed at ``lam``) or a callable
    mapping an embedding batch to model indices.
    """
    if hasattr(policy, "estimate"):
        choices = choose(policy, table.embeddings, lam)
    else:
        choices = policy(table.embeddings)
    return evaluate_choices(table, choices)


@dataclass(frozen=True)
class LambdaGrid:
    low: float = 1e-2
    high: float = 1e7
    count: int = 100

    def values(self) -> np.ndarray:
        if not (self.low > 0 and self.high > 0):
            raise ValueError("lambda grid endpoints must be positive")
        if self.count < 2:
            raise ValueError("lambda grid needs at least 2 points")
        return np.logspace(math.log10(self.low), math.log10(self.high), self.count)


@dataclass(frozen=True)
class FrontierCurve:
    lambdas: np.ndarray
    costs: np.ndarray
    accuracies: np.ndarray
    auc: float

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.lambdas.tolist(), self.costs.tolist(), self.accuracies.tolist()))


def normalized_auc(costs, accuracies=None) -> float:
    """Trapezoidal area under accuracy-vs-cost divided by the cost range.

    Points sharing a cost collapse to their best accuracy.  A zero-width
    cost range returns that (best) accuracy.
    """
    if accuracies is None:
        if isinstance(costs, FrontierCurve):
            costs, accuracies = costs.costs, costs.accuracies
        else:
            pts = np.asarray(costs, dtype=np.float64)
            costs, accuracies = pts[:, 0], pts[:, 1]
    costs = np.asarray(costs, dtype=np.float64)
    accuracies = np.asarray(accuracies, dtype=np.float64)
    best: dict[float, float] = {}
    for c, a in zip(costs.tolist(), accuracies.tolist()):
        best[c] = max(a, best.get(c, -math.inf))
    xs = sorted(best)
    if len(xs) == 1:
        return best[xs[0]]
    area = math.fsum(0.5 * (xs[i + 1] - xs[i]) * (best[xs[i]] + best[xs[i + 1]]) for i in range(len(xs) - 1))
    return area / (xs[-1] - xs[0])


def sweep_lambda(estimator: Estimator, table: EvaluationTable, grid: LambdaGrid = LambdaGrid()) -> FrontierCurve:
    """Evaluate the induced router at every grid lambda (ascending)."""
    lambdas = grid.values()
    acc_hat, cost_hat = estimator.estimate(table.embeddings)
    costs, accs = [], []
    for lam in lambdas:
        choices = route(acc_hat - lam * cost_hat, cost_hat)
        a, c = evaluate_choices(table, choices)
        accs.append(a)
        costs.append(c)
    costs = np.array(costs)
    accs = np.array(accs)
    return FrontierCurve(lambdas, costs, accs, normalized_auc(costs, accs))


def suboptimality(policy: Estimator | Callable, oracle, X, lam: float) -> float:
    """Mean true-utility gap between the oracle's best model and the policy's choice."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    true_u = oracle.utilities(X, lam)
    best = route(true_u, oracle.true_cost(X))
    chosen = choose(policy, X, lam) if hasattr(policy, "estimate") else np.asarray(policy(X))
    rows = np.arange(X.shape[0])
    gaps = true_u[rows, best] - true_u[rows, chosen]
    return math.fsum(gaps) / X.shape[0]


def write_curve(path, curve: FrontierCurve) -> None:
    lines = ["lambda,mean_cost,mean_accuracy"]
    lines += [f"{lam!r},{c!r},{a!r}" for lam, c, a in curve.points]
    lines.append(f"# auc={curve.auc!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_curve(path) -> FrontierCurve:
    rows, auc = [], None
    for line in Path(path).read_text().splitlines()[1:]:
        if line.startswith("# auc="):
            auc = float(line.split("=", 1)[1])
        elif line.strip():
            rows.append([float(v) for v in line.split(",")])
    arr = np.array(rows).reshape(-1, 3)
    return FrontierCurve(arr[:, 0], arr[:, 1], arr[:, 2], auc if auc is not None else normalized_auc(arr[:, 1], arr[:, 2]))


def mean_curve_auc(curves: Sequence[FrontierCurve]) -> float:
    return math.fsum(c.auc for c in curves) / len(curves)
