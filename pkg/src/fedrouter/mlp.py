"""Parametric router: shared MLP trunk with per-model accuracy and cost heads.

Everything is plain numpy with hand-written backpropagation.  Parameters
live in an ordered ``dict[str, ndarray]`` so that FedAvg, the optimizer
and checkpointing can treat them uniformly:

    W{l}, b{l}        affine map of hidden layer l   (in, out), (out,)
    g{l}, s{l}        layer-norm scale and shift     (out,), (out,)
    acc_W, acc_b      accuracy heads, row m = model m   (M, H), (M,)
    cost_W, cost_b    cost heads                        (M, H), (M,)

Hidden layer: affine -> layernorm -> GELU (exact erf form) -> dropout.
"""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.special import erf, expit

from ._numerics import rng_for
from .data import LoggedEvaluations

LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class MlpArchitecture:
    d_emb: int
    n_models: int
    hidden_widths: tuple[int, ...] = (512, 512)
    dropout: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ValueError("hidden_widths must be non-empty with widths >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.n_models < 1 or self.d_emb < 1:
            raise ValueError("d_emb and n_models must be positive")

    @property
    def n_layers(self) -> int:
        return len(self.hidden_widths)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out: dict[str, tuple[int, ...]] = {}
        fan_in = self.d_emb
        for l, w in enumerate(self.hidden_widths):
            out[f"W{l}"] = (fan_in, w)
            out[f"b{l}"] = (w,)
            out[f"g{l}"] = (w,)
            out[f"s{l}"] = (w,)
            fan_in = w
        out["acc_W"] = (self.n_models, fan_in)
        out["acc_b"] = (self.n_models,)
        out["cost_W"] = (self.n_models, fan_in)
        out["cost_b"] = (self.n_models,)
        return out


@dataclass(frozen=True)
class MlpParams:
    arch: MlpArchitecture
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def replace(self, tensors: Mapping[str, np.ndarray]) -> "MlpParams":
        return MlpParams(self.arch, dict(tensors))

    def copy(self) -> "MlpParams":
        return self.replace({k: v.copy() for k, v in self.tensors.items()})

    def max_abs_diff(self, other: "MlpParams") -> float:
        return max(float(np.max(np.abs(self[k] - other[k]), initial=0.0)) for k in self.tensors)

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())


def init_params(arch: MlpArchitecture, seed: int) -> MlpParams:
    """Fan-in scaled uniform weights, zero biases, unit layer-norm scale."""
    rng = rng_for(seed, 404)
    tensors = {}
    for name, shape in arch.shapes().items():
        if name.startswith("W"):
            bound = 1.0 / math.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        elif name in ("acc_W", "cost_W"):
            bound = 1.0 / math.sqrt(shape[1])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        elif name.startswith("g"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return MlpParams(arch, tensors)


def zero_params(arch: MlpArchitecture) -> MlpParams:
    return MlpParams(arch, {k: np.zeros(s) for k, s in arch.shapes().items()})


def _gelu(y):
    cdf = 0.5 * (1.0 + erf(y / _SQRT2))
    return y * cdf, cdf


@dataclass
class _Trace:
    inputs: list = field(default_factory=list)
    zhat: list = field(default_factory=list)
    inv_std: list = field(default_factory=list)
    pre_act: list = field(default_factory=list)
    cdf: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    hidden: np.ndarray | None = None


def _forward(params: MlpParams, X: np.ndarray, training: bool, rng: np.random.Generator | None, keep: bool):
    arch = params.arch
    trace = _Trace() if keep else None
    h = X
    p = arch.dropout
    for l in range(arch.n_layers):
        z = h @ params[f"W{l}"] + params[f"b{l}"]
        if not np.isfinite(z).all():
            raise NonFiniteError(f"non-finite activation in hidden layer {l}")
        zc = z - z.mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt((zc * zc).mean(axis=1, keepdims=True) + LN_EPS)
        zh = zc * inv
        y = params[f"g{l}"] * zh + params[f"s{l}"]
        a, cdf = _gelu(y)
        mask = None
        if training and p > 0:
            if rng is None:
                raise ValueError("training-mode dropout needs a generator")
            mask = (rng.random(a.shape) >= p) / (1.0 - p)
            a = a * mask
        if keep:
            trace.inputs.append(h)
            trace.zhat.append(zh)
            trace.inv_std.append(inv)
            trace.pre_act.append(y)
            trace.cdf.append(cdf)
            trace.masks.append(mask)
        h = a
    acc_logit = h @ params["acc_W"].T + params["acc_b"]
    cost = h @ params["cost_W"].T + params["cost_b"]
    if not (np.isfinite(acc_logit).all() and np.isfinite(cost).all()):
        raise NonFiniteError("non-finite activation in output heads")
    if keep:
        trace.hidden = h
    return acc_logit, cost, trace


def forward(params: MlpParams, X, training: bool = False, dropout_seed: int | np.random.Generator | None = None
            ) -> tuple[np.ndarray, np.ndarray]:
    """Per-model (accuracy in (0,1), raw normalized cost) for a batch of embeddings."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != params.arch.d_emb:
        raise ValueError(f"embedding width {X.shape[1]} != d_emb {params.arch.d_emb}")
    rng = dropout_seed if isinstance(dropout_seed, np.random.Generator) or dropout_seed is None \
        else rng_for(dropout_seed, 505)
    logit, cost, _ = _forward(params, X, training, rng, keep=False)
    return expit(logit), cost


def loss_and_gradient(
    params: MlpParams,
    batch: LoggedEvaluations,
    cost_normalizer: float,
    dropout_seed: int | np.random.Generator | None = None,
    training: bool = True,
    teacher: tuple[np.ndarray, np.ndarray] | None = None,
    distill_weight: float = 0.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Batch-mean squared error on each record's logged model, with exact gradient.

    ``teacher`` holds frozen (accuracy, normalized cost) predictions for the
    batch; when given, ``distill_weight`` times the per-query mean over
    models of the squared deviations from it is added.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    rng = dropout_seed if isinstance(dropout_seed, np.random.Generator) or dropout_seed is None \
        else rng_for(dropout_seed, 505)
    if training and params.arch.dropout > 0 and rng is None:
        rng = rng_for(0, 505)
    B = len(batch)
    M = params.arch.n_models
    logit, cost, tr = _forward(params, batch.embeddings, training, rng, keep=True)
    acc = expit(logit)
    rows = np.arange(B)
    m = batch.models
    ra = acc[rows, m] - batch.accuracy
    rc = cost[rows, m] - batch.cost / cost_normalizer
    loss = float(np.sum(ra * ra + rc * rc)) / B

    dacc = np.zeros_like(acc)
    dcost = np.zeros_like(cost)
    dacc[rows, m] = 2.0 * ra / B
    dcost[rows, m] = 2.0 * rc / B
    if teacher is not None and distill_weight > 0:
        ta, tc = teacher
        da = acc - ta
        dc = cost - tc
        loss += distill_weight * float(np.sum(da * da + dc * dc)) / (B * M)
        dacc += distill_weight * 2.0 * da / (B * M)
        dcost += distill_weight * 2.0 * dc / (B * M)
    dlogit = dacc * acc * (1.0 - acc)

    h = tr.hidden
    grad: dict[str, np.ndarray] = {
        "acc_W": dlogit.T @ h,
        "acc_b": dlogit.sum(axis=0),
        "cost_W": dcost.T @ h,
        "cost_b": dcost.sum(axis=0),
    }
    dh = dlogit @ params["acc_W"] + dcost @ params["cost_W"]
    for l in reversed(range(params.arch.n_layers)):
        if tr.masks[l] is not None:
            dh = dh * tr.masks[l]
        y = tr.pre_act[l]
        dy = dh * (tr.cdf[l] + y * np.exp(-0.5 * y * y) * _INV_SQRT_2PI)
        zh = tr.zhat[l]
        grad[f"g{l}"] = (dy * zh).sum(axis=0)
        grad[f"s{l}"] = dy.sum(axis=0)
        dzh = dy * params[f"g{l}"]
        dz = tr.inv_std[l] * (dzh - dzh.mean(axis=1, keepdims=True) - zh * (dzh * zh).mean(axis=1, keepdims=True))
        grad[f"W{l}"] = tr.inputs[l].T @ dz
        grad[f"b{l}"] = dz.sum(axis=0)
        dh = dz @ params[f"W{l}"].T
    return loss, {k: grad[k] for k in params.tensors}


def mean_loss(params: MlpParams, data: LoggedEvaluations, cost_normalizer: float, chunk: int = 8192) -> float:
    """Inference-mode value of the squared-error objective over a dataset."""
    if len(data) == 0:
        return float("nan")
    parts = []
    for s in range(0, len(data), chunk):
        b = data.take(np.arange(s, min(s + chunk, len(data))))
        acc, cost = forward(params, b.embeddings)
        rows = np.arange(len(b))
        ra = acc[rows, b.models] - b.accuracy
        rc = cost[rows, b.models] - b.cost / cost_normalizer
        parts.append(ra * ra + rc * rc)
    return math.fsum(np.concatenate(parts)) / len(data)


# ---------------------------------------------------------------- optimizer

@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adamw"  # "adamw" or "sgd"
    lr: float = 1e-3
    weight_decay: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if self.name not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.name!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")


@dataclass
class OptimizerState:
    first: dict[str, np.ndarray]
    second: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: MlpParams) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.tensors.items()},
                   {k: np.zeros_like(v) for k, v in params.tensors.items()}, 0)


def clip_gradient(grad: Mapping[str, np.ndarray], clip_norm: float | None) -> dict[str, np.ndarray]:
    """Rescale the whole gradient so its global L2 norm is at most clip_norm."""
    norm = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grad.values()))
    if not math.isfinite(norm):
        raise NonFiniteError("non-finite gradient")
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
        return {k: g * scale for k, g in grad.items()}
    return dict(grad)


def adamw_step(
    params: MlpParams,
    state: OptimizerState,
    grad: Mapping[str, np.ndarray],
    config: OptimizerConfig = OptimizerConfig(),
    trainable: Mapping[str, np.ndarray] | None = None,
) -> tuple[MlpParams, OptimizerState]:
    """One clipped optimizer update (AdamW, or plain SGD when config.name == 'sgd').

    ``trainable`` maps tensor names to boolean masks; entries outside the
    mask are returned untouched (bit-identical) and get no weight decay.
    """
    for k, g in grad.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
    if trainable is not None:
        grad = {k: np.where(trainable[k], g, 0.0) if k in trainable else g for k, g in grad.items()}
    grad = clip_gradient(grad, config.clip_norm)
    t = state.step + 1
    new, first, second = {}, {}, {}
    for k, p in params.tensors.items():
        g = grad[k]
        if config.name == "sgd":
            upd = p * (1.0 - config.lr * config.weight_decay) - config.lr * g
            first[k], second[k] = state.first[k], state.second[k]
        else:
            m1 = config.beta1 * state.first[k] + (1.0 - config.beta1) * g
            m2 = config.beta2 * state.second[k] + (1.0 - config.beta2) * g * g
            m_hat = m1 / (1.0 - config.beta1 ** t)
            v_hat = m2 / (1.0 - config.beta2 ** t)
            upd = p * (1.0 - config.lr * config.weight_decay) - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
            first[k], second[k] = m1, m2
        if trainable is not None and k in trainable:
            upd = np.where(trainable[k], upd, p)
        new[k] = upd
    return params.replace(new), OptimizerState(first, second, t)


# ---------------------------------------------------------------- training

def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return [perm[s:s + batch_size] for s in range(0, n, batch_size)]


def local_train(
    params: MlpParams,
    train: LoggedEvaluations,
    epochs: int = 1,
    batch_size: int = 128,
    optimizer: OptimizerConfig = OptimizerConfig(),
    seed: int = 0,
    cost_normalizer: float = 1.0,
    steps: int | None = None,
    trainable: Mapping[str, np.ndarray] | None = None,
    teacher_params: MlpParams | None = None,
    distill_weight: float = 0.0,
) -> MlpParams:
    """Mini-batch training from a fresh optimizer state.

    Runs ``epochs`` shuffled passes, or exactly ``steps`` mini-batch steps
    when ``steps`` is given (reshuffling whenever a pass is exhausted).
    """
    if len(train) == 0:
        return params
    if steps is None and epochs < 1:
        raise ValueError("epochs must be >= 1")
    state = OptimizerState.fresh(params)
    total = steps if steps is not None else None
    done = 0
    epoch = 0
    while True:
        order_rng = rng_for(seed, 606, epoch)
        for b_i, idx in enumerate(_batches(len(train), batch_size, order_rng)):
            batch = train.take(idx)
            teacher = None
            if teacher_params is not None and distill_weight > 0:
                teacher = forward(teacher_params, batch.embeddings)
            _, grad = loss_and_gradient(params, batch, cost_normalizer, rng_for(seed, 707, epoch, b_i),
                                        teacher=teacher, distill_weight=distill_weight)
            params, state = adamw_step(params, state, grad, optimizer, trainable)
            done += 1
            if total is not None and done >= total:
                return params
        epoch += 1
        if total is None and epoch >= epochs:
            return params


# ---------------------------------------------------------------- inference

@dataclass(frozen=True)
class MlpRouter:
    """Estimator wrapper: de-normalizes the cost head into currency units."""

    params: MlpParams
    cost_normalizer: float
    clamp_cost: bool = True

    def estimate(self, X) -> tuple[np.ndarray, np.ndarray]:
        acc, cost = forward(self.params, X)
        if self.clamp_cost:
            cost = np.clip(cost, 0.0, 1.0)
        return acc, cost * self.cost_normalizer


def predict_utilities(params: MlpParams, X, lam: float, cost_normalizer: float, clamp_cost: bool = True) -> np.ndarray:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    acc, cost = MlpRouter(params, cost_normalizer, clamp_cost).estimate(X)
    return acc - lam * cost


# ---------------------------------------------------------------- checkpoints

def _zip_entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    return info


def write_stable_npz(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """``np.savez``-compatible archive with fixed entry dates, so equal inputs give equal bytes."""
    with zipfile.ZipFile(path, "w") as zf:
        if meta is not None:
            zf.writestr(_zip_entry("meta.json"), json.dumps(meta, sort_keys=True))
        for k, v in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(v).copy(order="C"), allow_pickle=False)
            zf.writestr(_zip_entry(f"{k}.npy"), buf.getvalue())


def save_checkpoint(path, params: MlpParams, cost_normalizer: float, extra: dict | None = None) -> None:
    """Zip of .npy tensors plus a JSON header; byte-stable across runs."""
    meta = {
        "format": "fedrouter-mlp",
        "version": CHECKPOINT_VERSION,
        "architecture": asdict(params.arch),
        "cost_normalizer": cost_normalizer,
        "tensors": list(params.tensors),
        "extra": extra or {},
    }
    write_stable_npz(path, params.tensors, meta)


def load_checkpoint(path) -> tuple[MlpParams, float, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"MLP checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != "fedrouter-mlp" or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} MLP checkpoint")
        tensors = {k: np.lib.format.read_array(io.BytesIO(zf.read(f"{k}.npy"))) for k in meta["tensors"]}
    arch = MlpArchitecture(**meta["architecture"])
    return MlpParams(arch, tensors), meta["cost_normalizer"], meta.get("extra", {})


def with_architecture(params: MlpParams, **changes) -> MlpParams:
    return MlpParams(replace(params.arch, **changes), params.tensors)
