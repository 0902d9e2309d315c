import time
from pathlib import Path

import numpy as np
import pytest

from fedrouter import experiment as ex
from fedrouter.cli import main
from fedrouter.evaluation import read_curve

SMOKE = """\
seed: 3
data:
  synthetic: {d_emb: 8, n_queries: 1500, n_tasks: 4}
partition: {n_clients: 4}
federation: {rounds: 5}
mlp: {hidden_widths: [16, 16]}
personalization: true
expansion: {withheld_models: [2], new_clients: 1}
"""

SUMMARIES = ["auc_summary.csv", "personalization_summary.csv", "expand_models_summary.csv",
             "expand_clients_summary.csv", "personalization_mlp.csv", "personalization_kmeans.csv"]


@pytest.fixture(scope="module")
def smoke_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "smoke.yaml"
    p.write_text(SMOKE)
    return p


@pytest.fixture(scope="module")
def smoke_run(smoke_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    t0 = time.perf_counter()
    assert main(["run", "--config", str(smoke_cfg), "--out", str(out)]) == 0
    return out, time.perf_counter() - t0


def write_cfg(tmp_path, text):
    p = tmp_path / "c.yaml"
    p.write_text(text)
    return p


# ---------------------------------------------------------------- config

def test_defaults_mirror_training_setup():
    cfg = ex.ExperimentConfig()
    assert cfg.kmeans.k_local == 15 and cfg.kmeans.k_global == 20
    assert cfg.mlp.hidden_widths == (512, 512) and cfg.mlp.dropout == 0.1
    assert cfg.mlp.optimizer.lr == 1e-3 and cfg.mlp.optimizer.weight_decay == 3e-4
    assert cfg.federation.participation == 0.6 and cfg.federation.batch_size == 128
    assert cfg.partition.train_fraction == 0.75 and cfg.grid.count == 100
    assert ex.baseline_epochs(cfg) == 30


def test_zero_participation_names_field(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "federation: {participation: 0}\n")
    with pytest.raises(ex.ConfigError, match="federation: participation"):
        ex.load_config(cfg)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "participation" in capsys.readouterr().err


@pytest.mark.parametrize("text, field", [
    ("federation: {roundz: 3}\n", "federation.roundz"),
    ("routers: svm\n", "routers"),
    ("partition: {alpha_query: -1}\n", "partition"),
    ("mlp: {hidden_widths: []}\n", "mlp"),
    ("mlp: {optimizer: {name: lion}}\n", "mlp.optimizer"),
    ("data: {synthetic: {dominant_model: 9}}\n", "dominant_model"),
    ("expansion: {withheld_models: [7]}\n", "withheld_models"),
    ("expansion: {new_clients: 10}\n", "new_clients"),
    ("personalization_holdout: 1.0\n", "personalization_holdout"),
    ("partition: 5\n", "partition"),
])
def test_config_errors_name_the_field(tmp_path, text, field):
    with pytest.raises(ex.ConfigError, match=field):
        ex.load_config(write_cfg(tmp_path, text))


def test_missing_config_file(tmp_path):
    with pytest.raises(ex.ConfigError, match="not found"):
        ex.load_config(tmp_path / "nope.yaml")


def test_config_round_trip(smoke_cfg):
    cfg = ex.load_config(smoke_cfg)
    assert cfg.mlp.hidden_widths == (16, 16) and cfg.expansion.withheld_models == (2,)
    assert ex.config_from_dict(__import__("yaml").safe_load(ex.dump_config(cfg))) == cfg


def test_derived_seeds_are_stable_and_distinct():
    seeds = [ex.derive_seed(0, t) for t in (1, 2, 3, 10, 11, 20)]
    assert len(set(seeds)) == len(seeds)
    assert ex.derive_seed(0, 1) == ex.derive_seed(0, 1) != ex.derive_seed(1, 1)


def test_dominant_model_oracle_leads_on_accuracy():
    syn = ex.SyntheticConfig(d_emb=8, n_models=5, n_tasks=4)
    o = ex.dominant_model_oracle(syn, 0, 2)
    X = o.centers
    assert np.all(o.true_accuracy(X)[:, 2] >= o.true_accuracy(X)[:, :2].max(axis=1))


# ---------------------------------------------------------------- pipeline

def test_smoke_run_completes_with_all_files(smoke_run):
    out, seconds = smoke_run
    assert seconds < 60
    for name in [ex.FROZEN, ex.TABLE, ex.ORACLE, ex.PARTITION, "round_trace.csv", *SUMMARIES,
                 "checkpoints/mlp_fed.npz", "checkpoints/mlp_central.npz", "checkpoints/mlp_local_0.npz",
                 "checkpoints/kmeans_fed.json", "checkpoints/kmeans_central.json", "checkpoints/mlp_expanded.npz",
                 "checkpoints/kmeans_expanded.json", "checkpoints/mlp_new_clients.npz",
                 "curves/mlp_fed_global.csv", "curves/kmeans_local0_client0.csv", "curves/mlp_blend1_client1.csv"]:
        assert (out / name).exists(), name
    # three base clients, the fourth is held back for client expansion
    assert not (out / "checkpoints/mlp_local_3.npz").exists()


def test_every_numeric_file_has_a_header(smoke_run):
    out, _ = smoke_run
    for f in list(out.glob("*.csv")) + list((out / "curves").glob("*.csv")):
        first = f.read_text().splitlines()[0]
        assert first[0].isalpha() and "," in first, f


def test_curve_files_have_grid_rows(smoke_run):
    out, _ = smoke_run
    text = (out / "curves/mlp_fed_global.csv").read_text().splitlines()
    assert len([l for l in text[1:] if not l.startswith("#")]) == 100
    c = read_curve(out / "curves/mlp_fed_global.csv")
    assert c.lambdas[0] == pytest.approx(1e-2) and c.lambdas[-1] == pytest.approx(1e7)
    row = [l for l in (out / "auc_summary.csv").read_text().splitlines() if l.startswith("mlp,federated,global")]
    assert float(row[0].split(",")[-1]) == c.auc


def test_staged_run_matches_single_run(smoke_run, smoke_cfg, tmp_path):
    out, _ = smoke_run
    staged = tmp_path / "staged"
    assert main(["partition", "--config", str(smoke_cfg), "--out", str(staged)]) == 0
    for cmd in ("train", "eval", "personalize", "expand-models", "expand-clients"):
        assert main([cmd, "--out", str(staged)]) == 0, cmd
    for name in SUMMARIES + ["checkpoints/mlp_fed.npz", "checkpoints/kmeans_fed.json", ex.PARTITION, ex.TABLE]:
        assert (staged / name).read_bytes() == (out / name).read_bytes(), name


def test_threads_give_identical_outputs(smoke_run, smoke_cfg, tmp_path):
    out, _ = smoke_run
    assert main(["run", "--config", str(smoke_cfg), "--out", str(tmp_path), "--threads", "3"]) == 0
    for name in SUMMARIES + ["checkpoints/mlp_fed.npz"]:
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes(), name


def test_missing_upstream_artifact(tmp_path, capsys):
    assert main(["eval", "--out", str(tmp_path / "empty")]) == 2
    assert "config.frozen.yaml" in capsys.readouterr().err
    with pytest.raises(ex.MissingArtifact, match="partition"):
        ex.open_workspace(tmp_path / "empty")


def test_missing_checkpoint_names_file(smoke_cfg, tmp_path, capsys):
    assert main(["partition", "--config", str(smoke_cfg), "--out", str(tmp_path)]) == 0
    assert main(["eval", "--out", str(tmp_path)]) == 2
    assert "mlp_fed.npz" in capsys.readouterr().err


def test_seed_override(smoke_cfg, smoke_run, tmp_path, capsys):
    out, _ = smoke_run
    assert main(["partition", "--config", str(smoke_cfg), "--out", str(tmp_path), "--seed", "8"]) == 0
    assert ex.load_config(tmp_path / ex.FROZEN).seed == 8
    assert (tmp_path / ex.PARTITION).read_bytes() != (out / ex.PARTITION).read_bytes()
    assert main(["train", "--out", str(tmp_path), "--seed", "9"]) == 2
    assert "seed" in capsys.readouterr().err


def test_inspect_outputs(smoke_run, capsys):
    out, _ = smoke_run
    assert main(["inspect", str(out / "checkpoints/kmeans_fed.json")]) == 0
    text = capsys.readouterr().out
    assert "K=20" in text and "occupied (k,m) cells" in text
    assert main(["inspect", str(out / "checkpoints/mlp_fed.npz")]) == 0
    text = capsys.readouterr().out
    assert "hidden=[16, 16]" in text and "acc_W: (5, 16)" in text
    assert main(["inspect", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "master seed=3" in text and "client 0:" in text and f"fedavg={ex.derive_seed(3, 11)}" in text
    assert main(["inspect", str(out / "round_trace.csv")]) == 2


def test_expansion_stage_requires_configuration(smoke_run, tmp_path, capsys):
    cfg = write_cfg(tmp_path, "data: {synthetic: {d_emb: 4, n_queries: 300, n_tasks: 2}}\n"
                              "partition: {n_clients: 2}\nfederation: {rounds: 1}\nmlp: {hidden_widths: [4]}\n")
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    assert not (out / "expand_models_summary.csv").exists()
    assert main(["expand-models", "--out", str(out)]) == 2
    assert "withheld_models" in capsys.readouterr().err


def test_corpus_source(tmp_path, small_oracle):
    from fedrouter.ingestion import generate_synthetic, save_corpus
    table, _ = generate_synthetic(small_oracle, 300, seed=0)
    save_corpus(tmp_path / "c.csv", table, small_oracle.model_pool)
    cfg = write_cfg(tmp_path, f"data: {{corpus: {tmp_path / 'c.csv'}}}\nrouters: kmeans\n"
                              "partition: {n_clients: 3}\nkmeans: {k_local: 4, k_global: 5}\n")
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    assert not (out / ex.ORACLE).exists() and (out / "checkpoints/kmeans_fed.json").exists()


def test_bad_threads_flag(tmp_path):
    with pytest.raises(SystemExit):
        main(["run", "--out", str(tmp_path), "--threads", "0"])
