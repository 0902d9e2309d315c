import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedrouter.data import validate_dataset
from fedrouter.evaluation import route
from fedrouter.ingestion import (CorpusFormatError, SyntheticOracle, clipped_normal_mean, full_evaluation_table,
                                 generate_synthetic, load_corpus, load_oracle, make_oracle, oracle_best_model,
                                 oracle_policy, save_corpus, save_oracle)


def write(tmp_path, text, name="c.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def oracle_2d(bias=(0.0, 0.0), costs=(0.1, 0.9), noise=0.05, spread=0.5):
    return SyntheticOracle(np.zeros((1, 2)), spread, np.ones(1), np.zeros((len(costs), 2)), np.array(bias),
                           np.array(costs), noise, 1.0)


def test_three_row_corpus(tmp_path):
    p = write(tmp_path, "task,model,accuracy,cost,e0,e1,e2,e3\n"
                        "a,gpt,1,0.2,0.1,0.2,0.3,0.4\n"
                        "a,llama,0,0.37,0.1,0.2,0.3,0.4\n"
                        "b,gpt,0.5,0.1,1,1,1,1\n")
    recs, man, tasks = load_corpus(p)
    assert len(recs) == 3 and man.d_emb == 4 and man.n_records == 3
    assert man.cost_normalizer == 0.37
    assert man.model_pool.models == ("gpt", "llama") and tasks == ["a", "b"]
    assert recs[1].model_index == 1 and recs[1].embedding == (0.1, 0.2, 0.3, 0.4)
    assert validate_dataset(recs, man) == []


def test_non_numeric_cost_names_row_and_column(tmp_path):
    p = write(tmp_path, "task,model,accuracy,cost,e0\na,m,1,0.2,0.0\na,m,1,cheap,0.0\n")
    with pytest.raises(CorpusFormatError, match=r"row 3, column 'cost'"):
        load_corpus(p)


def test_inconsistent_embedding_width(tmp_path):
    p = write(tmp_path, "task,model,accuracy,cost,e0,e1\na,m,1,0.2,0.0,1.0\na,m,1,0.2,0.0\n")
    with pytest.raises(CorpusFormatError, match="row 3"):
        load_corpus(p)


@pytest.mark.parametrize("text", ["", "task,model,accuracy,cost\n", "task,model,acc,cost,e0\n",
                                  "task,model,accuracy,cost,e1\n", "task,model,accuracy,cost,e0\n"])
def test_bad_headers(tmp_path, text):
    with pytest.raises(CorpusFormatError):
        load_corpus(write(tmp_path, text))


def test_corpus_round_trip(tmp_path, small_oracle):
    table, _ = generate_synthetic(small_oracle, 40, seed=1)
    save_corpus(tmp_path / "c.csv", table, small_oracle.model_pool)
    recs, man, tasks = load_corpus(tmp_path / "c.csv")
    back = full_evaluation_table(recs, man.model_pool.size, tasks)
    np.testing.assert_array_equal(back.embeddings, table.embeddings)
    np.testing.assert_array_equal(back.accuracy, table.accuracy)
    np.testing.assert_array_equal(back.cost, table.cost)
    assert [back.task_names[t] for t in back.tasks] == [table.task_names[t] for t in table.tasks]


def test_full_table_requires_every_model(tmp_path):
    p = write(tmp_path, "task,model,accuracy,cost,e0\na,m0,1,0.2,0.0\na,m1,1,0.2,0.0\nb,m0,1,0.2,5.0\n")
    recs, man, tasks = load_corpus(p)
    with pytest.raises(CorpusFormatError, match="models \\[1\\]"):
        full_evaluation_table(recs, 2, tasks)


def test_generation_is_deterministic(small_oracle):
    a, _ = generate_synthetic(small_oracle, 300, seed=4)
    b, _ = generate_synthetic(small_oracle, 300, seed=4)
    c, _ = generate_synthetic(small_oracle, 300, seed=5)
    for f in ("embeddings", "accuracy", "cost", "tasks"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    assert not np.array_equal(a.embeddings, c.embeddings)


def test_degenerate_accuracy_one():
    o = oracle_2d(bias=(1e3, 0.0))
    table, _ = generate_synthetic(o, 500, seed=0)
    assert np.all(table.accuracy[:, 0] == 1.0)


def test_mean_cost_close_to_base_cost():
    o = oracle_2d(costs=(0.1, 0.9), noise=0.05)
    table, _ = generate_synthetic(o, 1000, seed=3)
    sigma = 0.05 / np.sqrt(1000)
    assert abs(table.cost[:, 0].mean() - 0.1) < 3 * sigma
    assert abs(table.cost[:, 1].mean() - 0.9) < 3 * sigma


def test_costs_are_bounded():
    o = oracle_2d(costs=(0.0, 1.0), noise=0.3)
    table, _ = generate_synthetic(o, 2000, seed=0)
    assert table.cost.min() == 0.0 and table.cost.max() == 1.0


def test_sample_accuracy_matches_oracle_mean():
    o = oracle_2d(bias=(0.3, -1.0), spread=0.0)
    table, _ = generate_synthetic(o, 20000, seed=11)
    p = o.true_accuracy(np.zeros((1, 2)))[0]
    n = len(table)
    for m in range(2):
        sigma = np.sqrt(p[m] * (1 - p[m]) / n)
        assert abs(table.accuracy[:, m].mean() - p[m]) < 5 * sigma


def test_clipped_mean_against_monte_carlo():
    rng = np.random.default_rng(0)
    for mu, s in [(0.05, 0.1), (0.5, 0.2), (0.95, 0.3)]:
        y = np.clip(rng.normal(mu, s, 400_000), 0, 1)
        se = y.std() / np.sqrt(len(y))
        assert abs(float(clipped_normal_mean(mu, s, 1.0)) - y.mean()) < 5 * se
    assert float(clipped_normal_mean(1.4, 0.0, 1.0)) == 1.0


def test_oracle_invariants(small_oracle):
    X = np.random.default_rng(1).standard_normal((200, small_oracle.d_emb)) * 10
    acc = small_oracle.true_accuracy(X)
    assert np.all((acc >= 0) & (acc <= 1))
    assert np.all((small_oracle.true_cost(X) >= 0) & (small_oracle.true_cost(X) <= small_oracle.c_max))


def test_oracle_file_round_trip(tmp_path, small_oracle):
    save_oracle(tmp_path / "o.json", small_oracle)
    back = load_oracle(tmp_path / "o.json")
    X = np.random.default_rng(0).standard_normal((5, small_oracle.d_emb))
    assert np.array_equal(back.true_accuracy(X), small_oracle.true_accuracy(X))
    assert back.model_names == small_oracle.model_names


def test_best_model_at_extreme_lambdas(small_oracle):
    x = small_oracle.centers[0]
    assert oracle_best_model(small_oracle, x, 0.0) == int(np.argmax(small_oracle.true_accuracy(x)[0]))
    assert oracle_best_model(small_oracle, x, 1e9) == int(np.argmin(small_oracle.base_costs))
    with pytest.raises(ValueError):
        oracle_best_model(small_oracle, x, -1.0)


def test_best_model_brute_force():
    o = make_oracle(5, 3, 2, seed=9)
    rng = np.random.default_rng(2)
    for _ in range(50):
        x = rng.standard_normal(5) * 2
        lam = float(rng.uniform(0, 3))
        a = o.true_accuracy(x)[0]
        c = o.true_cost(x)[0]
        u = [a[m] - lam * c[m] for m in range(3)]
        expected = max(range(3), key=lambda m: (u[m], -c[m], -m))
        assert oracle_best_model(o, x, lam) == expected


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 0.5), st.integers(0, 1000))
def test_best_model_ignores_cost_shift_at_zero_lambda(shift, seed):
    o = make_oracle(4, 4, 2, seed=seed, cost_range=(0.05, 0.5))
    shifted = dataclasses.replace(o, base_costs=o.base_costs + shift)
    X = np.random.default_rng(seed).standard_normal((20, 4))
    assert np.array_equal(oracle_policy(o, X, 0.0), oracle_policy(shifted, X, 0.0))


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(0.01, 10), st.integers(0, 1000))
def test_best_model_ignores_utility_shift(shift, lam, seed):
    o = make_oracle(4, 4, 2, seed=seed)
    X = np.random.default_rng(seed).standard_normal((20, 4))
    u = o.utilities(X, lam)
    assert np.array_equal(route(u, o.true_cost(X)), route(u + shift, o.true_cost(X)))
    assert np.array_equal(route(u, o.true_cost(X)), oracle_policy(o, X, lam))


def test_generate_rejects_bad_args(small_oracle):
    with pytest.raises(ValueError):
        generate_synthetic(small_oracle, 0, seed=0)
    with pytest.raises(ValueError):
        generate_synthetic(small_oracle, 10, seed=0, n_tasks=small_oracle.n_tasks + 1)
