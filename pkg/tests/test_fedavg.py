import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedrouter.data import LoggedEvaluations
from fedrouter.fedavg import (FederationConfig, aggregate, participant_count, run_federated_training,
                              sample_participants, write_round_trace)
from fedrouter.ingestion import generate_synthetic, make_oracle
from fedrouter.mlp import (MlpArchitecture, MlpParams, OptimizerConfig, OptimizerState, adamw_step, init_params,
                           loss_and_gradient, mean_loss)
from fedrouter.partition import PartitionConfig, build_partition

SGD = OptimizerConfig("sgd", lr=0.05, weight_decay=0.0, clip_norm=None)


def scalar(v):
    return MlpParams(MlpArchitecture(1, 1, (1,)), {"w": np.array([float(v)])})


def clients_for(rng, sizes, d=3, M=2):
    return [LoggedEvaluations(rng.standard_normal((n, d)), rng.integers(0, M, n), rng.random(n), rng.random(n))
            for n in sizes]


def test_config_rejects_zero_participation():
    with pytest.raises(ValueError, match="participation"):
        FederationConfig(participation=0.0)
    with pytest.raises(ValueError):
        FederationConfig(rounds=-1)


def test_participant_sampling():
    assert sample_participants(7, 1.0, 3, 0).tolist() == list(range(7))
    ids = sample_participants(10, 0.6, 0, 1)
    assert len(ids) == 6 and len(set(ids.tolist())) == 6
    assert np.array_equal(sample_participants(10, 0.6, 4, 2), sample_participants(10, 0.6, 4, 2))
    assert participant_count(10, 0.05) == 1 and participant_count(10, 0.25) == 3 and participant_count(4, 0.6) == 2
    with pytest.raises(ValueError):
        sample_participants(4, 0.0, 0, 0)


def test_aggregate_examples():
    assert aggregate([scalar(1.0), scalar(3.0)], [100, 300])["w"][0] == 2.5
    assert aggregate([scalar(0.3)], [5])["w"][0] == 0.3
    p = init_params(MlpArchitecture(3, 2, (4,)), 0)
    assert aggregate([p, p.copy()], [1, 2]).max_abs_diff(p) == 0.0
    with pytest.raises(ValueError):
        aggregate([p, init_params(MlpArchitecture(3, 2, (5,)), 0)], [1, 1])
    with pytest.raises(ValueError):
        aggregate([scalar(1), scalar(2)], [0, 0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 1000), min_size=2, max_size=6), st.integers(0, 2**31 - 1))
def test_aggregate_is_order_invariant_convex(weights, seed):
    rng = np.random.default_rng(seed)
    arch = MlpArchitecture(2, 2, (3,))
    ps = [init_params(arch, int(s)) for s in rng.integers(0, 10_000, len(weights))]
    out = aggregate(ps, weights)
    perm = rng.permutation(len(ps))
    shuffled = aggregate([ps[i] for i in perm], [weights[i] for i in perm])
    assert out.max_abs_diff(shuffled) < 1e-15
    for k in out.tensors:
        stack = np.stack([p[k] for p in ps])
        assert np.all(out[k] <= stack.max(axis=0) + 1e-15) and np.all(out[k] >= stack.min(axis=0) - 1e-15)


def test_zero_rounds_returns_initial(rng):
    p = init_params(MlpArchitecture(3, 2, (4,)), 0)
    res = run_federated_training(clients_for(rng, [5, 6]), p, FederationConfig(rounds=0))
    assert res.params.max_abs_diff(p) == 0.0 and res.trace == []


def test_single_client_equals_centralized(rng):
    (data,) = clients_for(rng, [30])
    p0 = init_params(MlpArchitecture(3, 2, (6,), 0.0), 1)
    cfg = FederationConfig(rounds=6, participation=1.0, batch_size=64)
    res = run_federated_training([data], p0, cfg, SGD)
    p = p0
    losses = []
    for _ in range(6):
        _, g = loss_and_gradient(p, data, 1.0)
        p, _ = adamw_step(p, OptimizerState.fresh(p), g, SGD)
        losses.append(mean_loss(p, data, 1.0))
    assert res.params.max_abs_diff(p) < 1e-12
    np.testing.assert_allclose([r.global_loss for r in res.trace], losses, rtol=1e-12)


def test_weights_and_non_participant_influence(rng):
    clients = clients_for(rng, [10, 20, 30, 0, 15])
    p0 = init_params(MlpArchitecture(3, 2, (4,), 0.0), 2)
    cfg = FederationConfig(rounds=1, participation=0.6, seed=3, batch_size=8)
    res = run_federated_training(clients, p0, cfg, SGD)
    rec = res.trace[0]
    assert abs(sum(rec.weights) - 1.0) < 1e-12
    sizes = [10, 20, 30, 0, 15]
    total = sum(sizes[i] for i in rec.participants)
    assert rec.weights == [sizes[i] / total for i in rec.participants]
    idle = next(i for i in range(5) if i not in rec.participants and sizes[i])
    altered = list(clients)
    altered[idle] = clients_for(np.random.default_rng(99), [sizes[idle]])[0]
    again = run_federated_training(altered, p0, cfg, SGD, track_loss=False)
    assert again.params.max_abs_diff(res.params) == 0.0


def test_all_empty_clients_rejected():
    with pytest.raises(ValueError):
        run_federated_training([LoggedEvaluations.empty(3)], init_params(MlpArchitecture(3, 2, (4,)), 0))


def test_threads_do_not_change_results(rng):
    clients = clients_for(rng, [40, 25, 33, 18])
    p0 = init_params(MlpArchitecture(3, 2, (8,), 0.1), 0)
    cfg = FederationConfig(rounds=3, participation=0.75, batch_size=16, seed=5)
    a = run_federated_training(clients, p0, cfg, threads=1)
    b = run_federated_training(clients, p0, cfg, threads=3)
    assert a.params.max_abs_diff(b.params) == 0.0
    assert [r.global_loss for r in a.trace] == [r.global_loss for r in b.trace]


def test_fixed_local_steps(rng):
    (data,) = clients_for(rng, [50])
    p0 = init_params(MlpArchitecture(3, 2, (4,), 0.0), 0)
    cfg = FederationConfig(rounds=1, participation=1.0, batch_size=50, local_steps=3)
    res = run_federated_training([data], p0, cfg, SGD, track_loss=False)
    p = p0
    for _ in range(3):
        _, g = loss_and_gradient(p, data, 1.0)
        p, _ = adamw_step(p, OptimizerState.fresh(p), g, SGD)
    assert res.params.max_abs_diff(p) < 1e-12


def test_ten_clients_halve_the_loss():
    oracle = make_oracle(8, 4, 6, seed=0)
    table, _ = generate_synthetic(oracle, 3000, seed=1)
    part = build_partition(table, PartitionConfig(seed=2))
    p0 = init_params(MlpArchitecture(8, 4, (32, 32), 0.1), 3)
    res = run_federated_training([c.train for c in part.clients], p0, FederationConfig(rounds=50, seed=4))
    assert res.trace[-1].global_loss <= 0.5 * res.initial_loss


def test_round_trace_file(tmp_path, rng):
    res = run_federated_training(clients_for(rng, [6, 7]), init_params(MlpArchitecture(3, 2, (4,)), 0),
                                 FederationConfig(rounds=2, participation=1.0))
    write_round_trace(tmp_path / "t.csv", res.trace)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "round,participants,weights,participant_loss,global_loss,wall_time"
    assert len(lines) == 3 and lines[1].startswith("0,0;1,")
