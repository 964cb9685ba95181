import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import ols
from trafficdl.errors import ParameterError, TrainingError
from trafficdl.hypersearch import (
    FULL_DEPTH_RANGE,
    SearchSpace,
    random_search,
    sample_config,
    write_leaderboard,
)


def linear_split(seed=0, n=600):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    y = X @ [0.8, -0.4, 0.2] + 0.1 * rng.normal(size=n)
    cut = 2 * n // 3
    return (X[:cut], y[:cut]), (X[cut:], y[cut:])


TINY = dict(width_range=(1, 6), depth_range=(1, 2), search_epochs=4, final_epochs=4, budget=3)


def test_single_point_space():
    space = SearchSpace(activations=("relu",), depth_range=(2, 2), width_range=(5, 5),
                        lambda_range=(1e-3, 1e-3))
    rng = np.random.default_rng(0)
    for _ in range(20):
        cfg = sample_config(space, rng, input_dim=4)
        assert cfg.activation == "relu"
        assert cfg.hidden_widths == (5, 5)
        assert cfg.penalty_weight == 1e-3


def test_activation_frequencies():
    rng = np.random.default_rng(1)
    space = SearchSpace()
    acts = [sample_config(space, rng).activation for _ in range(10_000)]
    assert abs(acts.count("tanh") / 1e4 - 0.5) < 0.02


def test_lambda_log_uniform():
    rng = np.random.default_rng(2)
    space = SearchSpace()
    lams = np.array([sample_config(space, rng).penalty_weight for _ in range(4000)])
    assert lams.min() >= 1e-4 and lams.max() <= 1e-2
    # log10 is uniform on [-4, -2]: each half holds about half the mass
    assert abs(np.mean(np.log10(lams) < -3) - 0.5) < 0.03


def test_sampled_configs_inside_space():
    rng = np.random.default_rng(3)
    space = SearchSpace(depth_range=FULL_DEPTH_RANGE)
    assert all(space.contains(sample_config(space, rng)) for _ in range(10_000))


@given(lo=st.integers(0, 5), span=st.integers(0, 5), wlo=st.integers(1, 50), seed=st.integers(0, 99))
def test_sampling_property(lo, span, wlo, seed):
    space = SearchSpace(depth_range=(lo, lo + span), width_range=(wlo, wlo + 10))
    cfg = sample_config(space, np.random.default_rng(seed))
    assert space.contains(cfg)


def test_sampling_deterministic():
    space = SearchSpace()
    a = [sample_config(space, np.random.default_rng(5)) for _ in range(3)]
    b = [sample_config(space, np.random.default_rng(5)) for _ in range(3)]
    assert a == b


@pytest.mark.parametrize("kwargs", [
    dict(activations=()), dict(activations=("sigmoid",)), dict(depth_range=(3, 2)),
    dict(width_range=(0, 5)), dict(lambda_range=(0, 1e-2)), dict(budget=0),
])
def test_space_validation(kwargs):
    with pytest.raises(ParameterError):
        SearchSpace(**kwargs)


def test_space_json(tmp_path):
    p = tmp_path / "space.json"
    p.write_text('{"budget": 7, "depth_range": [1, 3]}')
    space = SearchSpace.from_json(p)
    assert space.budget == 7 and space.depth_range == (1, 3)
    assert SearchSpace.from_dict(space.to_dict()) == space
    with pytest.raises(ParameterError):
        SearchSpace.from_dict({"bogus": 1})


def test_budget_one():
    train, valid = linear_split()
    best, board = random_search(train, valid, SearchSpace(**{**TINY, "budget": 1}))
    assert len(board) == 1
    assert best is board[0].net


def test_leaderboard_sorted_and_head_is_best():
    train, valid = linear_split()
    space = SearchSpace(**TINY)
    best, board = random_search(train, valid, space, retrain=False)
    scores = [e.val_mse for e in board]
    assert scores == sorted(scores)
    assert best is board[0].net


def test_linear_config_reaches_ols():
    train, valid = linear_split()
    space = SearchSpace(depth_range=(0, 0), lambda_range=(1e-4, 1e-4), budget=2,
                        search_epochs=60, final_epochs=60, learning_rate=0.05)
    best, board = random_search(train, valid, space)
    w, b = ols(*train)
    ols_mse = np.mean((valid[0] @ w + b - valid[1]) ** 2)
    assert board[0].val_mse <= 1.05 * ols_mse


def test_identical_seeds_identical_boards():
    train, valid = linear_split()
    space = SearchSpace(**TINY)
    _, a = random_search(train, valid, space, seed=4, retrain=False)
    _, b = random_search(train, valid, space, seed=4, retrain=False)
    key = [(e.index, e.config, e.val_mse, e.train_mse) for e in a]
    assert key == [(e.index, e.config, e.val_mse, e.train_mse) for e in b]


def test_workers_do_not_change_board():
    train, valid = linear_split()
    space = SearchSpace(**TINY)
    _, a = random_search(train, valid, space, workers=1, retrain=False)
    _, b = random_search(train, valid, space, workers=2, retrain=False)
    assert [(e.index, e.val_mse) for e in a] == [(e.index, e.val_mse) for e in b]


def test_all_failures_raise():
    (X, y), (Xv, yv) = linear_split()
    space = SearchSpace(activations=("relu",), width_range=(50, 50), depth_range=(3, 3),
                        learning_rate=1e3, search_epochs=3, budget=2)
    with pytest.raises(TrainingError, match="all 2 candidate"):
        random_search((X * 1e3, y * 1e3), (Xv * 1e3, yv * 1e3), space)


def test_leaderboard_csv(tmp_path):
    train, valid = linear_split()
    _, board = random_search(train, valid, SearchSpace(**TINY), retrain=False)
    p = tmp_path / "board.csv"
    write_leaderboard(board, p)
    rows = list(csv.DictReader(p.open()))
    assert [int(r["rank"]) for r in rows] == [1, 2, 3]
    assert {"depth", "widths", "activation", "lambda", "val_mse", "train_mse", "seconds"} <= set(rows[0])
    assert float(rows[0]["val_mse"]) == board[0].val_mse
