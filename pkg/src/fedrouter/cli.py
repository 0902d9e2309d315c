"""Command-line entry point: ``fedrouter <subcommand> ...``.

Stages read and write one artifact directory (``--out``); ``run`` chains
all stages the config enables.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import zipfile
from pathlib import Path

import numpy as np

from . import experiment as ex

log = logging.getLogger("fedrouter")


def _config(args) -> ex.ExperimentConfig:
    cfg = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _workspace(args) -> ex.Workspace:
    ws = ex.open_workspace(args.out)
    if getattr(args, "seed", None) is not None and args.seed != ws.cfg.seed:
        raise ex.ConfigError(f"seed: artifacts in {args.out} were produced with seed {ws.cfg.seed}")
    return ws


def cmd_run(args) -> int:
    ws = ex.run_experiment(_config(args), args.out, threads=args.threads)
    print(f"wrote {ws.out}")
    return 0


def cmd_partition(args) -> int:
    ws = ex.stage_partition(_config(args), args.out)
    sizes = [len(c.train) for c in ws.partition.clients]
    print(f"{len(sizes)} clients, train sizes {sizes}")
    return 0


def cmd_train(args) -> int:
    ex.stage_train(_workspace(args), threads=args.threads)
    print(f"checkpoints in {Path(args.out) / 'checkpoints'}")
    return 0


def _print_rows(rows) -> None:
    for fam, router, ev, auc in rows:
        print(f"{fam:7s} {router:22s} {ev:10s} {auc:.4f}")


def cmd_eval(args) -> int:
    _print_rows(ex.stage_eval(_workspace(args)))
    return 0


def cmd_personalize(args) -> int:
    _print_rows(ex.stage_personalize(_workspace(args)))
    return 0


def cmd_expand_models(args) -> int:
    _print_rows(ex.stage_expand_models(_workspace(args)))
    return 0


def cmd_expand_clients(args) -> int:
    _print_rows(ex.stage_expand_clients(_workspace(args)))
    return 0


# ---------------------------------------------------------------- inspect

def describe_checkpoint(path: Path) -> list[str]:
    from .mlp import load_checkpoint
    params, cn, _ = load_checkpoint(path)
    a = params.arch
    lines = [f"mlp checkpoint {path}",
             f"  d_emb={a.d_emb} n_models={a.n_models} hidden={list(a.hidden_widths)} dropout={a.dropout}",
             f"  cost_normalizer={cn!r} parameters={sum(v.size for v in params.tensors.values())}"]
    lines += [f"  {k}: {tuple(v.shape)}" for k, v in params.tensors.items()]
    return lines


def describe_state(path: Path) -> list[str]:
    from .kmeans import load_state
    st = load_state(path)
    occ = st.occupancy()
    K, M = st.stats.counts.shape
    per_model = (st.stats.counts > 0).sum(axis=0).tolist()
    return [f"kmeans state {path}",
            f"  K={K} n_models={M} d_emb={st.centroids.shape[1]}",
            f"  occupied (k,m) cells: {int((st.stats.counts > 0).sum())}/{K * M} ({occ:.3f})",
            f"  clusters per model: {per_model}",
            f"  records: {int(st.stats.counts.sum())}"]


def describe_partition(path: Path) -> list[str]:
    doc = json.loads(path.read_text())
    lines = [f"partition {path}", f"  config: {doc['config']}"]
    for c in doc["clients"]:
        counts = np.bincount(np.array(c["train_models"], dtype=np.int64),
                             minlength=len(doc["model_proportions"][0]) if doc["model_proportions"] else 0)
        lines.append(f"  client {c['client_id']}: train={len(c['train_rows'])} test={len(c['test_rows'])} "
                     f"logged per model={counts.tolist()}")
    return lines


def describe_dir(path: Path) -> list[str]:
    cfg = ex.load_config(ex.require(path / ex.FROZEN, "partition"))
    lines = [f"experiment {path}", f"  master seed={cfg.seed} routers={cfg.routers}"]
    seeds = {"oracle": 1, "data": 2, "partition": 3, "mlp_init": 10, "fedavg": 11, "kmeans": 20}
    lines.append("  derived seeds: " + " ".join(f"{k}={ex.derive_seed(cfg.seed, t)}" for k, t in seeds.items()))
    if (path / ex.TABLE).exists():
        table, pool = ex.load_table(path / ex.TABLE)
        lines.append(f"  table: {len(table)} queries x {table.n_models} models, d_emb={table.d_emb}, "
                     f"models={list(pool.models)}")
    if (path / ex.PARTITION).exists():
        lines += describe_partition(path / ex.PARTITION)
    ck = path / "checkpoints"
    if ck.exists():
        for f in sorted(ck.iterdir()):
            lines += describe(f)
    return lines


def describe(path: Path) -> list[str]:
    if path.is_dir():
        return describe_dir(path)
    if not path.exists():
        raise FileNotFoundError(f"nothing to inspect at {path}")
    if path.suffix == ".npz" and zipfile.is_zipfile(path) and "meta.json" in zipfile.ZipFile(path).namelist():
        return describe_checkpoint(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        if doc.get("format") == "fedrouter-kmeans":
            return describe_state(path)
        if "clients" in doc:
            return describe_partition(path)
    raise ValueError(f"{path}: not a checkpoint, K-means state, partition manifest or experiment directory")


def cmd_inspect(args) -> int:
    target = Path(args.path) if args.path else Path(args.out)
    print("\n".join(describe(target)))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedrouter", description="Federated LLM-routing simulator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, config=False, seed=True, threads=False, help=None):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--out", required=True, help="artifact directory")
        if config:
            sp.add_argument("--config", help="YAML experiment config (defaults when omitted)")
        if seed:
            sp.add_argument("--seed", type=int, help="override the master seed")
        if threads:
            sp.add_argument("--threads", type=int, default=1, help="worker threads for client training")
        sp.set_defaults(fn=fn)
        return sp

    add("run", cmd_run, config=True, threads=True, help="all enabled stages")
    add("partition", cmd_partition, config=True, help="load or generate data and split it across clients")
    add("train", cmd_train, threads=True, help="federated, local and centralized routers")
    add("eval", cmd_eval, help="frontier curves and AUC summary")
    add("personalize", cmd_personalize, help="blend federated and local routers per client")
    add("expand-models", cmd_expand_models, help="onboard withheld models")
    add("expand-clients", cmd_expand_clients, help="onboard held-back clients")
    sp = sub.add_parser("inspect", help="print metadata of a checkpoint, state, manifest or directory")
    sp.add_argument("path", nargs="?")
    sp.add_argument("--out", help="experiment directory (when no path is given)")
    sp.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "inspect" and not (args.path or args.out):
        parser.error("inspect needs a path or --out")
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.fn(args)
    except (ex.ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
