"""Experiment configuration and end-to-end pipelines.

A run is a pure function of (config, corpus): every sub-seed is derived
from the master seed, and every reported metric is written as delimited
text with a header line.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from ._numerics import fmean, rng_for, round_half_up
from .data import EvaluationTable, LoggedEvaluations, ModelPool
from .evaluation import FrontierCurve, LambdaGrid, suboptimality, sweep_lambda, write_curve
from .fedavg import FederationConfig, run_federated_training, write_round_trace
from .ingestion import (SyntheticOracle, full_evaluation_table, generate_synthetic, load_corpus, make_oracle,
                        save_oracle)
from .kmeans import KmeansRouterState, build_centralized_kmeans, build_federated_kmeans, save_state
from .mlp import (MlpArchitecture, MlpRouter, OptimizerConfig, init_params, local_train, save_checkpoint,
                  write_stable_npz)
from .partition import ClientPartition, PartitionConfig, build_partition, concat_tables, save_partition
from .personalization import (BlendedRouter, add_clients_kmeans, add_clients_mlp, add_model_kmeans,
                              add_model_mlp_federated, blend_weights, calibration_errors, personalize,
                              write_personalization_report)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticConfig:
    d_emb: int = 16
    n_models: int = 6
    n_tasks: int = 8
    n_queries: int = 20000
    center_radius: float = 3.0
    spread: float = 0.6
    skill_scale: float = 2.5
    quality_slope: float = 1.5
    cost_noise: float = 0.02
    # when set, this model is made to beat its neighbours across a cost band
    dominant_model: int | None = None


@dataclass(frozen=True)
class DataConfig:
    corpus: str | None = None  # path to a corpus file; synthetic when None
    synthetic: SyntheticConfig = SyntheticConfig()


@dataclass(frozen=True)
class MlpConfig:
    hidden_widths: tuple[int, ...] = (512, 512)
    dropout: float = 0.1
    optimizer: OptimizerConfig = OptimizerConfig()
    # epochs for local/centralized routers; None matches the per-client pass
    # count of federated training, round(participation * rounds)
    baseline_epochs: int | None = None

    def __post_init__(self):
        MlpArchitecture(1, 1, self.hidden_widths, self.dropout)  # raises on bad widths or dropout
        if self.baseline_epochs is not None and self.baseline_epochs < 1:
            raise ValueError("baseline_epochs must be >= 1")


@dataclass(frozen=True)
class KmeansConfig:
    k_local: int = 15
    k_global: int = 20
    n_init: int = 3
    max_iter: int = 30

    def __post_init__(self):
        if min(self.k_local, self.k_global, self.n_init, self.max_iter) < 1:
            raise ValueError("k_local, k_global, n_init and max_iter must be >= 1")


@dataclass(frozen=True)
class ExpansionConfig:
    withheld_models: tuple[int, ...] = ()
    calibration_fraction: float = 0.1
    new_clients: int = 0
    distill_weight: float = 1.0

    def __post_init__(self):
        if self.distill_weight < 0:
            raise ValueError("distill_weight must be >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    routers: str = "both"  # mlp | kmeans | both
    data: DataConfig = DataConfig()
    partition: PartitionConfig = PartitionConfig()
    federation: FederationConfig = FederationConfig()
    mlp: MlpConfig = MlpConfig()
    kmeans: KmeansConfig = KmeansConfig()
    grid: LambdaGrid = LambdaGrid()
    local_baselines: bool = True
    centralized_baseline: bool = True
    personalization: bool = False
    # fraction of each client's records held out to estimate blend weights;
    # 0 reuses the training records
    personalization_holdout: float = 0.0
    expansion: ExpansionConfig = ExpansionConfig()

    @property
    def families(self) -> tuple[str, ...]:
        return {"mlp": ("mlp",), "kmeans": ("kmeans",), "both": ("mlp", "kmeans")}[self.routers]


def derive_seed(master: int, tag: int) -> int:
    return int(rng_for(master, 5000 + tag).integers(2**31))


def _build(cls, raw: Any, path: str):
    if dataclasses.is_dataclass(raw):
        return raw
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"{path + '.' if path else ''}{sorted(unknown)[0]}: unknown field")
    kwargs = {}
    for name, value in raw.items():
        f = fields[name]
        sub = f"{path}.{name}" if path else name
        default = f.default if f.default is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        elif isinstance(default, tuple) or name == "hidden_widths":
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw, "")
    if cfg.routers not in ("mlp", "kmeans", "both"):
        raise ConfigError(f"routers: must be mlp, kmeans or both, got {cfg.routers!r}")
    dm = cfg.data.synthetic.dominant_model
    if dm is not None and not 0 <= dm < cfg.data.synthetic.n_models:
        raise ConfigError("data.synthetic.dominant_model: must index a model of the synthetic pool")
    withheld = cfg.expansion.withheld_models
    if not cfg.data.corpus and any(not 0 <= m < cfg.data.synthetic.n_models for m in withheld):
        raise ConfigError("expansion.withheld_models: must index models of the synthetic pool")
    if len(set(withheld)) != len(withheld) or (not cfg.data.corpus and len(withheld) >= cfg.data.synthetic.n_models):
        raise ConfigError("expansion.withheld_models: must be distinct and leave at least one model")
    if not 0 <= cfg.personalization_holdout < 1:
        raise ConfigError("personalization_holdout: must lie in [0, 1)")
    if not 0 < cfg.expansion.calibration_fraction <= 1:
        raise ConfigError("expansion.calibration_fraction: must lie in (0, 1]")
    if cfg.expansion.new_clients < 0 or cfg.expansion.new_clients >= cfg.partition.n_clients:
        raise ConfigError("expansion.new_clients: must be >= 0 and below partition.n_clients")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text()) or {}
    return config_from_dict(raw)


def config_to_dict(cfg) -> dict:
    def conv(v):
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v
    return conv(asdict(cfg))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


# ---------------------------------------------------------------- data

@dataclass
class Dataset:
    table: EvaluationTable
    pool: ModelPool
    oracle: SyntheticOracle | None

    @property
    def cost_normalizer(self) -> float:
        return float(self.table.cost.max()) if self.table.cost.max() > 0 else 1.0


def oracle_from_config(syn: SyntheticConfig, seed: int) -> SyntheticOracle:
    return make_oracle(syn.d_emb, syn.n_models, syn.n_tasks, seed, center_radius=syn.center_radius,
                       spread=syn.spread, skill_scale=syn.skill_scale, quality_slope=syn.quality_slope,
                       cost_noise=syn.cost_noise)


def dominant_model_oracle(syn: SyntheticConfig, seed: int, model: int, margin: float = 1.0,
                          skill_shrink: float = 0.3) -> SyntheticOracle:
    """Oracle in which ``model`` (mid-priced under the default cost ladder)
    beats every model at least as cheap and most pricier ones.

    Its bias is lifted ``margin`` above the best bias and its task-specific
    skill is shrunk, so its advantage holds across the query space.
    """
    base = oracle_from_config(syn, seed)
    bias = base.acc_bias.copy()
    weights = base.acc_weights.copy()
    bias[model] = bias.max() + margin
    weights[model] *= skill_shrink
    return dataclasses.replace(base, acc_bias=bias, acc_weights=weights)


def load_dataset(cfg: ExperimentConfig, oracle: SyntheticOracle | None = None) -> Dataset:
    if cfg.data.corpus:
        records, manifest, tasks = load_corpus(cfg.data.corpus)
        table = full_evaluation_table(records, manifest.model_pool.size, tasks)
        return Dataset(table, manifest.model_pool, None)
    syn = cfg.data.synthetic
    if oracle is None and syn.dominant_model is not None:
        oracle = dominant_model_oracle(syn, derive_seed(cfg.seed, 1), syn.dominant_model)
    elif oracle is None:
        oracle = oracle_from_config(syn, derive_seed(cfg.seed, 1))
    table, oracle = generate_synthetic(oracle, syn.n_queries, derive_seed(cfg.seed, 2))
    return Dataset(table, oracle.model_pool, oracle)


def make_partition(cfg: ExperimentConfig, table: EvaluationTable) -> ClientPartition:
    pc = dataclasses.replace(cfg.partition, seed=derive_seed(cfg.seed, 3))
    return build_partition(table, pc)


# ---------------------------------------------------------------- training

@dataclass
class TrainedRouters:
    mlp_fed: MlpRouter | None = None
    mlp_local: list[MlpRouter] = field(default_factory=list)
    mlp_central: MlpRouter | None = None
    km_fed: KmeansRouterState | None = None
    km_local: list[KmeansRouterState | None] = field(default_factory=list)
    km_central: KmeansRouterState | None = None
    trace: list = field(default_factory=list)
    initial_loss: float = float("nan")

    def family(self, name: str) -> tuple[Any, list, Any]:
        if name == "mlp":
            return self.mlp_fed, self.mlp_local, self.mlp_central
        return self.km_fed, self.km_local, self.km_central


def mlp_architecture(cfg: ExperimentConfig, d_emb: int, n_models: int) -> MlpArchitecture:
    return MlpArchitecture(d_emb, n_models, cfg.mlp.hidden_widths, cfg.mlp.dropout)


def baseline_epochs(cfg: ExperimentConfig) -> int:
    if cfg.mlp.baseline_epochs:
        return cfg.mlp.baseline_epochs
    return max(1, round_half_up(cfg.federation.participation * cfg.federation.rounds))


def train_mlp_family(cfg: ExperimentConfig, trains: Sequence[LoggedEvaluations], d_emb: int, n_models: int,
                     cost_normalizer: float, local: bool, central: bool, threads: int = 1,
                     track_loss: bool = True, out: TrainedRouters | None = None) -> TrainedRouters:
    out = out or TrainedRouters()
    arch = mlp_architecture(cfg, d_emb, n_models)
    init = init_params(arch, derive_seed(cfg.seed, 10))
    fed_cfg = dataclasses.replace(cfg.federation, seed=derive_seed(cfg.seed, 11))
    res = run_federated_training(trains, init, fed_cfg, cfg.mlp.optimizer, cost_normalizer, threads=threads,
                                 track_loss=track_loss)
    out.mlp_fed = MlpRouter(res.params, cost_normalizer)
    out.trace = res.trace
    out.initial_loss = res.initial_loss
    epochs = baseline_epochs(cfg)
    if local:
        out.mlp_local = [
            MlpRouter(local_train(init, tr, epochs, cfg.federation.batch_size, cfg.mlp.optimizer,
                                  derive_seed(cfg.seed, 100 + i), cost_normalizer), cost_normalizer)
            for i, tr in enumerate(trains)
        ]
    if central:
        pooled = LoggedEvaluations.concat(trains)
        out.mlp_central = MlpRouter(local_train(init, pooled, epochs, cfg.federation.batch_size, cfg.mlp.optimizer,
                                                derive_seed(cfg.seed, 12), cost_normalizer), cost_normalizer)
    return out


def train_kmeans_family(cfg: ExperimentConfig, trains: Sequence[LoggedEvaluations], n_models: int, local: bool,
                        central: bool, out: TrainedRouters | None = None) -> TrainedRouters:
    out = out or TrainedRouters()
    kc = cfg.kmeans
    out.km_fed = build_federated_kmeans(trains, n_models, kc.k_local, kc.k_global, kc.n_init, kc.max_iter,
                                        derive_seed(cfg.seed, 20))
    if local:
        out.km_local = [
            build_centralized_kmeans(tr, n_models, kc.k_global, kc.n_init, kc.max_iter, derive_seed(cfg.seed, 200 + i))
            if len(tr) else None
            for i, tr in enumerate(trains)
        ]
    if central:
        pooled = LoggedEvaluations.concat(trains)
        out.km_central = build_centralized_kmeans(pooled, n_models, kc.k_global, kc.n_init, kc.max_iter,
                                                  derive_seed(cfg.seed, 21))
    return out


def train_routers(cfg: ExperimentConfig, partition: ClientPartition, d_emb: int, n_models: int,
                  cost_normalizer: float, threads: int = 1, track_loss: bool = True) -> TrainedRouters:
    trains = [c.train for c in partition.clients]
    out = TrainedRouters()
    if "mlp" in cfg.families:
        train_mlp_family(cfg, trains, d_emb, n_models, cost_normalizer, cfg.local_baselines,
                         cfg.centralized_baseline, threads, track_loss, out)
    if "kmeans" in cfg.families:
        train_kmeans_family(cfg, trains, n_models, cfg.local_baselines, cfg.centralized_baseline, out)
    return out


# ---------------------------------------------------------------- evaluation

def curve_or_none(estimator, table: EvaluationTable, grid: LambdaGrid) -> FrontierCurve | None:
    if estimator is None or len(table) == 0:
        return None
    return sweep_lambda(estimator, table, grid)


@dataclass
class FamilyReport:
    global_fed: FrontierCurve
    global_local: list[FrontierCurve | None]
    global_central: FrontierCurve | None
    local_fed: list[FrontierCurve | None]
    local_local: list[FrontierCurve | None]
    local_blend: list[FrontierCurve | None] = field(default_factory=list)
    blends: list[BlendedRouter | None] = field(default_factory=list)

    def mean_local_global_auc(self) -> float:
        return fmean([c.auc for c in self.global_local if c is not None])


def evaluate_family(cfg: ExperimentConfig, partition: ClientPartition, routers: TrainedRouters, family: str,
                    n_models: int, personalization: bool = False) -> FamilyReport:
    fed, local, central = routers.family(family)
    test = concat_tables([c.test for c in partition.clients])
    grid = cfg.grid
    rep = FamilyReport(
        sweep_lambda(fed, test, grid),
        [curve_or_none(r, test, grid) for r in local],
        curve_or_none(central, test, grid),
        [curve_or_none(fed, c.test, grid) for c in partition.clients],
        [curve_or_none(r, c.test, grid) for r, c in zip(local, partition.clients)] if local else [],
    )
    if personalization and local:
        for r, c in zip(local, partition.clients):
            if r is None or len(c.train) == 0:
                rep.blends.append(None)
                rep.local_blend.append(None)
                continue
            if cfg.personalization_holdout > 0:
                b = crossfit_personalize(cfg, fed, r, c, family, n_models)
            else:
                b = personalize(fed, r, c.train, n_models)
            rep.blends.append(b)
            rep.local_blend.append(curve_or_none(b, c.test, grid))
    return rep


def crossfit_personalize(cfg: ExperimentConfig, fed, local, client, family: str, n_models: int) -> BlendedRouter:
    """Blend weights from held-out errors, applied to the full-data local router.

    A second local router is fit on the remaining records; both it and the
    federated router are scored on the held-out part.
    """
    n = len(client.train)
    k = int(math.floor(cfg.personalization_holdout * n + 0.5))
    perm = rng_for(derive_seed(cfg.seed, 60), client.client_id).permutation(n)
    held, fit = client.train.take(np.sort(perm[:k])), client.train.take(np.sort(perm[k:]))
    if family == "mlp":
        epochs = baseline_epochs(cfg)
        params = local_train(init_params(local.params.arch, derive_seed(cfg.seed, 10)), fit,
                             epochs, cfg.federation.batch_size, cfg.mlp.optimizer,
                             derive_seed(cfg.seed, 100 + client.client_id), local.cost_normalizer)
        probe = MlpRouter(params, local.cost_normalizer)
    else:
        kc = cfg.kmeans
        probe = build_centralized_kmeans(fit, n_models, kc.k_global, kc.n_init, kc.max_iter,
                                         derive_seed(cfg.seed, 200 + client.client_id)) if len(fit) else None
    local_err = calibration_errors(probe, held, n_models) if probe is not None else \
        (np.full(n_models, np.nan), np.full(n_models, np.nan))
    return BlendedRouter(fed, local, blend_weights(calibration_errors(fed, held, n_models), local_err))


def mean_suboptimality(estimators, oracle: SyntheticOracle, X, lam: float) -> float:
    return fmean([suboptimality(e, oracle, X, lam) for e in estimators if e is not None])


# ---------------------------------------------------------------- expansion scenarios

def calibration_split(train: LoggedEvaluations, fraction: float, seed: int) -> np.ndarray:
    """Row positions of the calibration subset of a client's prompts."""
    n = len(train)
    k = int(math.floor(fraction * n + 0.5))
    return np.sort(rng_for(seed, 1313).permutation(n)[:k])


def expand_models(cfg: ExperimentConfig, ds: Dataset, partition: ClientPartition, routers_before: TrainedRouters,
                  withheld: Sequence[int]) -> dict[str, tuple[FrontierCurve, FrontierCurve, Any]]:
    """Routers trained without ``withheld`` models gain them via calibration.

    ``partition`` and ``routers_before`` must use the reduced pool (model
    indices of the kept models in original order); the withheld models are
    appended in the given order.
    """
    kept = [m for m in range(ds.table.n_models) if m not in set(withheld)]
    order = kept + list(withheld)
    test_kept = concat_tables([c.test for c in partition.clients])
    # partition tables hold reduced pools; rebuild full-pool test rows from the corpus
    test_rows = np.concatenate([c.test_rows for c in partition.clients])
    full = ds.table.subset(test_rows)
    full = EvaluationTable(full.embeddings, full.accuracy[:, order], full.cost[:, order], full.tasks, full.task_names)
    out = {}
    calib_rows = [c.train_rows[calibration_split(c.train, cfg.expansion.calibration_fraction,
                                                 derive_seed(cfg.seed, 40 + c.client_id))]
                  for c in partition.clients]
    for family in cfg.families:
        fed, _, _ = routers_before.family(family)
        before = sweep_lambda(fed, test_kept, cfg.grid)
        router = fed
        for j, m in enumerate(withheld):
            calib = [ds.table.log(r, np.full(len(r), m)) for r in calib_rows]
            if family == "mlp":
                fc = dataclasses.replace(cfg.federation, seed=derive_seed(cfg.seed, 30 + j))
                params = add_model_mlp_federated(router.params, calib, fc, cfg.mlp.optimizer,
                                                 router.cost_normalizer, seed=derive_seed(cfg.seed, 35 + j))
                router = MlpRouter(params, router.cost_normalizer)
            else:
                router = add_model_kmeans(router, calib)
        after = sweep_lambda(router, full, cfg.grid)
        out[family] = (before, after, router)
    return out


# ---------------------------------------------------------------- artifact directory
#
# Stages communicate through files in one output directory:
#   partition      config.frozen.yaml, table.npz, [oracle.json], partition.json
#   train          checkpoints/*, round_trace.csv
#   eval           curves/*, auc_summary.csv
#   personalize    personalization_<family>.csv, personalization_summary.csv
#   expand-models  expand_models_summary.csv
#   expand-clients expand_clients_summary.csv

FROZEN = "config.frozen.yaml"
TABLE = "table.npz"
ORACLE = "oracle.json"
PARTITION = "partition.json"


class MissingArtifact(FileNotFoundError):
    pass


def require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"expected {path} (run the '{stage}' stage first)")
    return path


def save_table(path, table: EvaluationTable, pool: ModelPool) -> None:
    write_stable_npz(path, {
        "embeddings": table.embeddings, "accuracy": table.accuracy, "cost": table.cost, "tasks": table.tasks,
        "task_names": np.array(table.task_names, dtype=str), "models": np.array(pool.models, dtype=str),
        "c_max": np.array(pool.c_max),
    })


def load_table(path) -> tuple[EvaluationTable, ModelPool]:
    with np.load(path) as z:
        table = EvaluationTable(z["embeddings"], z["accuracy"], z["cost"], z["tasks"], tuple(z["task_names"].tolist()))
        pool = ModelPool(tuple(z["models"].tolist()), float(z["c_max"].item()))
    return table, pool


@dataclass
class Workspace:
    """Everything the post-partition stages need, read back from disk."""
    out: Path
    cfg: ExperimentConfig
    ds: Dataset
    partition: ClientPartition

    @property
    def table(self) -> EvaluationTable:
        # partition tables hold the training pool, i.e. without withheld models
        withheld = list(self.cfg.expansion.withheld_models)
        return self.ds.table.drop_models(withheld) if withheld else self.ds.table

    @property
    def base_clients(self):
        n_new = self.cfg.expansion.new_clients
        return self.partition.clients[:len(self.partition.clients) - n_new]

    @property
    def new_clients(self):
        n_new = self.cfg.expansion.new_clients
        return self.partition.clients[len(self.partition.clients) - n_new:] if n_new else []

    @property
    def base_partition(self) -> ClientPartition:
        k = len(self.base_clients)
        return ClientPartition(self.base_clients, self.partition.config, self.partition.model_proportions[:k])

    @property
    def ckpt(self) -> Path:
        return self.out / "checkpoints"


def stage_partition(cfg: ExperimentConfig, out) -> Workspace:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / FROZEN).write_text(dump_config(cfg))
    ds = load_dataset(cfg)
    save_table(out / TABLE, ds.table, ds.pool)
    if ds.oracle is not None:
        save_oracle(out / ORACLE, ds.oracle)
    ws = Workspace(out, cfg, ds, None)
    ws.partition = make_partition(cfg, ws.table)
    save_partition(out / PARTITION, ws.partition)
    log.info("partitioned %d queries over %d clients", len(ds.table), len(ws.partition.clients))
    return ws


def open_workspace(out) -> Workspace:
    from .ingestion import load_oracle
    from .partition import load_partition
    out = Path(out)
    cfg = load_config(require(out / FROZEN, "partition"))
    table, pool = load_table(require(out / TABLE, "partition"))
    oracle = load_oracle(out / ORACLE) if (out / ORACLE).exists() else None
    ws = Workspace(out, cfg, Dataset(table, pool, oracle), None)
    ws.partition = load_partition(require(out / PARTITION, "partition"), ws.table)
    return ws


def stage_train(ws: Workspace, threads: int = 1) -> TrainedRouters:
    cfg, cn = ws.cfg, ws.ds.cost_normalizer
    routers = train_routers(cfg, ws.base_partition, ws.table.d_emb, ws.table.n_models, cn, threads)
    ws.ckpt.mkdir(exist_ok=True)
    if routers.mlp_fed is not None:
        save_checkpoint(ws.ckpt / "mlp_fed.npz", routers.mlp_fed.params, cn)
        for i, r in enumerate(routers.mlp_local):
            save_checkpoint(ws.ckpt / f"mlp_local_{i}.npz", r.params, cn)
        if routers.mlp_central is not None:
            save_checkpoint(ws.ckpt / "mlp_central.npz", routers.mlp_central.params, cn)
        write_round_trace(ws.out / "round_trace.csv", routers.trace)
    if routers.km_fed is not None:
        save_state(ws.ckpt / "kmeans_fed.json", routers.km_fed)
        for i, r in enumerate(routers.km_local):
            if r is not None:
                save_state(ws.ckpt / f"kmeans_local_{i}.json", r)
        if routers.km_central is not None:
            save_state(ws.ckpt / "kmeans_central.json", routers.km_central)
    return routers


def load_routers(ws: Workspace) -> TrainedRouters:
    from .kmeans import load_state
    from .mlp import load_checkpoint

    def mlp(name):
        params, cn, _ = load_checkpoint(name)
        return MlpRouter(params, cn)

    ck = ws.ckpt
    out = TrainedRouters()
    n = len(ws.base_clients)
    if "mlp" in ws.cfg.families:
        out.mlp_fed = mlp(require(ck / "mlp_fed.npz", "train"))
        if ws.cfg.local_baselines:
            out.mlp_local = [mlp(require(ck / f"mlp_local_{i}.npz", "train")) for i in range(n)]
        if ws.cfg.centralized_baseline:
            out.mlp_central = mlp(require(ck / "mlp_central.npz", "train"))
    if "kmeans" in ws.cfg.families:
        out.km_fed = load_state(require(ck / "kmeans_fed.json", "train"))
        if ws.cfg.local_baselines:
            out.km_local = [load_state(ck / f"kmeans_local_{i}.json") if (ck / f"kmeans_local_{i}.json").exists()
                            else None for i in range(n)]
        if ws.cfg.centralized_baseline:
            out.km_central = load_state(require(ck / "kmeans_central.json", "train"))
    return out


def _auc_or_nan(c: FrontierCurve | None) -> float:
    return float("nan") if c is None else c.auc


def stage_eval(ws: Workspace, routers: TrainedRouters | None = None) -> list[tuple]:
    routers = routers or load_routers(ws)
    curves = ws.out / "curves"
    curves.mkdir(exist_ok=True)
    rows = []
    for fam in ws.cfg.families:
        rep = evaluate_family(ws.cfg, ws.base_partition, routers, fam, ws.table.n_models)
        write_curve(curves / f"{fam}_fed_global.csv", rep.global_fed)
        rows.append((fam, "federated", "global", rep.global_fed.auc))
        if rep.global_central is not None:
            write_curve(curves / f"{fam}_central_global.csv", rep.global_central)
            rows.append((fam, "centralized", "global", rep.global_central.auc))
        for i in range(len(ws.base_clients)):
            if rep.local_fed[i] is not None:
                write_curve(curves / f"{fam}_fed_client{i}.csv", rep.local_fed[i])
            rows.append((fam, "federated", f"client{i}", _auc_or_nan(rep.local_fed[i])))
            if rep.global_local:
                if rep.global_local[i] is not None:
                    write_curve(curves / f"{fam}_local{i}_global.csv", rep.global_local[i])
                    write_curve(curves / f"{fam}_local{i}_client{i}.csv", rep.local_local[i])
                rows.append((fam, f"local{i}", "global", _auc_or_nan(rep.global_local[i])))
                rows.append((fam, f"local{i}", f"client{i}", _auc_or_nan(rep.local_local[i])))
    write_summary(ws.out / "auc_summary.csv", rows)
    return rows


def stage_personalize(ws: Workspace, routers: TrainedRouters | None = None) -> list[tuple]:
    if not ws.cfg.local_baselines:
        raise ConfigError("personalization needs local routers: set local_baselines: true")
    routers = routers or load_routers(ws)
    curves = ws.out / "curves"
    curves.mkdir(exist_ok=True)
    rows = []
    for fam in ws.cfg.families:
        rep = evaluate_family(ws.cfg, ws.base_partition, routers, fam, ws.table.n_models, personalization=True)
        for i, blend in enumerate(rep.local_blend):
            if blend is not None:
                write_curve(curves / f"{fam}_blend{i}_client{i}.csv", blend)
            rows.append((fam, f"blend{i}", f"client{i}", _auc_or_nan(blend)))
        write_personalization_report(ws.out / f"personalization_{fam}.csv",
                                     [(i, b.weights) for i, b in enumerate(rep.blends) if b is not None])
    write_summary(ws.out / "personalization_summary.csv", rows)
    return rows


def stage_expand_models(ws: Workspace, routers: TrainedRouters | None = None) -> list[tuple]:
    withheld = list(ws.cfg.expansion.withheld_models)
    if not withheld:
        raise ConfigError("expansion.withheld_models: no models were withheld from training")
    routers = routers or load_routers(ws)
    res = expand_models(ws.cfg, ws.ds, ws.base_partition, routers, withheld)
    rows = []
    curves = ws.out / "curves"
    curves.mkdir(exist_ok=True)
    for fam, (before, after, router) in res.items():
        write_curve(curves / f"{fam}_expand_before.csv", before)
        write_curve(curves / f"{fam}_expand_after.csv", after)
        rows += [(fam, "before", "global", before.auc), (fam, "after", "global", after.auc)]
        if fam == "mlp":
            save_checkpoint(ws.ckpt / "mlp_expanded.npz", router.params, router.cost_normalizer)
        else:
            save_state(ws.ckpt / "kmeans_expanded.json", router)
    write_summary(ws.out / "expand_models_summary.csv", rows)
    return rows


def stage_expand_clients(ws: Workspace, routers: TrainedRouters | None = None) -> list[tuple]:
    new = ws.new_clients
    if not new:
        raise ConfigError("expansion.new_clients: no clients were held back from training")
    cfg = ws.cfg
    routers = routers or load_routers(ws)
    test_all = concat_tables([c.test for c in ws.partition.clients])
    trains = [c.train for c in new]
    rows = []
    curves = ws.out / "curves"
    curves.mkdir(exist_ok=True)
    for fam in cfg.families:
        if fam == "mlp":
            fc = dataclasses.replace(cfg.federation, seed=derive_seed(cfg.seed, 50))
            cn = routers.mlp_fed.cost_normalizer
            res = add_clients_mlp(routers.mlp_fed.params, trains, cfg.expansion.distill_weight, fc,
                                  cfg.mlp.optimizer, cn, track_loss=False)
            before, after = routers.mlp_fed, MlpRouter(res.params, cn)
            save_checkpoint(ws.ckpt / "mlp_new_clients.npz", res.params, cn)
        else:
            before, after = routers.km_fed, add_clients_kmeans(routers.km_fed, trains)
            save_state(ws.ckpt / "kmeans_new_clients.json", after)
        b, a = sweep_lambda(before, test_all, cfg.grid), sweep_lambda(after, test_all, cfg.grid)
        write_curve(curves / f"{fam}_clients_before.csv", b)
        write_curve(curves / f"{fam}_clients_after.csv", a)
        rows += [(fam, "before", "global", b.auc), (fam, "after", "global", a.auc)]
    write_summary(ws.out / "expand_clients_summary.csv", rows)
    return rows


def run_experiment(cfg: ExperimentConfig, out_dir, threads: int = 1) -> Workspace:
    """Every stage the config enables, in order."""
    ws = stage_partition(cfg, out_dir)
    routers = stage_train(ws, threads)
    stage_eval(ws, routers)
    if cfg.personalization:
        stage_personalize(ws, routers)
    if cfg.expansion.withheld_models:
        stage_expand_models(ws, routers)
    if cfg.expansion.new_clients:
        stage_expand_clients(ws, routers)
    return ws


def write_summary(path, rows) -> None:
    lines = ["family,router,eval_set,auc"] + [f"{f},{r},{e},{a!r}" for f, r, e, a in rows]
    Path(path).write_text("\n".join(lines) + "\n")
