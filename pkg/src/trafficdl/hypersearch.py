"""Random search over network depth, widths, activation and penalty weight."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from functools import partial

import numpy as np

from ._parallel import parallel_map
from .deepnet import NetConfig, init_network, predict, sgd_train
from .errors import ParameterError, TrainingError
from .seeding import derive_seed

logger = logging.getLogger(__name__)

FULL_DEPTH_RANGE = (1, 60)


@dataclass(frozen=True)
class SearchSpace:
    activations: tuple = ("tanh", "relu")
    depth_range: tuple = (1, 8)
    width_range: tuple = (1, 200)
    lambda_range: tuple = (1e-4, 1e-2)
    budget: int = 50
    penalty_kind: str = "l2"
    dropout_p: float = 0.0
    search_epochs: int = 50
    final_epochs: int = 200
    patience: int | None = 10
    learning_rate: float = 0.01
    lr_decay: float = 1e-4
    batch_size: int = 32

    def __post_init__(self):
        for name in ("activations", "depth_range", "width_range", "lambda_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.activations or any(a not in ("tanh", "relu") for a in self.activations):
            raise ParameterError("activations must be a non-empty subset of {tanh, relu}")
        d0, d1 = self.depth_range
        w0, w1 = self.width_range
        l0, l1 = self.lambda_range
        if not (0 <= d0 <= d1):
            raise ParameterError("depth_range must satisfy 0 <= lo <= hi")
        if not (1 <= w0 <= w1):
            raise ParameterError("width_range must satisfy 1 <= lo <= hi")
        if not (0 < l0 <= l1):
            raise ParameterError("lambda_range must satisfy 0 < lo <= hi")
        if self.budget < 1:
            raise ParameterError("budget must be at least 1")

    def contains(self, cfg):
        return (
            cfg.activation in self.activations
            and self.depth_range[0] <= cfg.depth <= self.depth_range[1]
            and all(self.width_range[0] <= w <= self.width_range[1] for w in cfg.hidden_widths)
            and self.lambda_range[0] <= cfg.penalty_weight <= self.lambda_range[1]
        )

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ParameterError(f"unknown search space keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def sample_config(space, rng, input_dim=1, output_dim=1, seed=0):
    """Draw one configuration: uniform activation, depth and widths, log-uniform lambda."""
    act = space.activations[int(rng.integers(len(space.activations)))]
    depth = int(rng.integers(space.depth_range[0], space.depth_range[1] + 1))
    widths = tuple(int(w) for w in rng.integers(space.width_range[0], space.width_range[1] + 1,
                                                size=depth))
    lo, hi = np.log(space.lambda_range[0]), np.log(space.lambda_range[1])
    lam = float(np.exp(rng.uniform(lo, hi))) if hi > lo else float(space.lambda_range[0])
    lam = min(max(lam, space.lambda_range[0]), space.lambda_range[1])
    return NetConfig(
        input_dim=input_dim,
        hidden_widths=widths,
        activation=act,
        output_dim=output_dim,
        penalty_kind=space.penalty_kind,
        penalty_weight=lam,
        dropout_p=space.dropout_p,
        learning_rate=space.learning_rate,
        lr_decay=space.lr_decay,
        batch_size=space.batch_size,
        epochs=space.search_epochs,
        seed=seed,
        patience=space.patience,
    )


@dataclass(frozen=True)
class LeaderboardEntry:
    index: int
    config: NetConfig
    val_mse: float
    train_mse: float
    seconds: float
    error: str | None = None
    net: object = dataclasses.field(default=None, repr=False, compare=False)

    @property
    def ok(self):
        return self.error is None


def _mse(net, data):
    X, Y = (data.X, data.y) if hasattr(data, "X") else data
    P = predict(net, X)
    return float(np.mean((P - np.asarray(Y).reshape(P.shape)) ** 2))


def _evaluate(item, train, valid):
    idx, cfg = item
    t0 = time.perf_counter()
    try:
        net = sgd_train(init_network(cfg), train, valid)
        va, tr = _mse(net, valid), _mse(net, train)
        if not (math.isfinite(va) and math.isfinite(tr)):
            raise TrainingError("non-finite score", [])
        err = None
    except TrainingError as exc:
        va = tr = math.inf
        err = str(exc)
        net = None
    return LeaderboardEntry(idx, cfg, va, tr, time.perf_counter() - t0, err, net)


def _dims(design):
    X, Y = (design.X, design.y) if hasattr(design, "X") else design
    Y = np.asarray(Y)
    return np.asarray(X).shape[1], 1 if Y.ndim == 1 else Y.shape[1]


def random_search(train, valid, space, seed=0, workers=1, retrain=True):
    """Train ``space.budget`` sampled configurations and rank them by validation MSE.

    Ties are broken by parameter count, then by sample index.  The winner is
    retrained from scratch for ``space.final_epochs`` epochs when ``retrain``
    is set (keeping whichever of the two has the lower validation MSE).

    Returns
    -------
    best : DeepNet
    leaderboard : list of LeaderboardEntry, sorted best first; failed
        trainings sit at the end with infinite scores.
    """
    in_dim, out_dim = _dims(train)
    rng = np.random.default_rng(derive_seed(seed, "search"))
    configs = [
        (i, sample_config(space, rng, in_dim, out_dim, seed=derive_seed(seed, "candidate", i)))
        for i in range(space.budget)
    ]
    entries = parallel_map(partial(_evaluate, train=train, valid=valid), configs, workers)
    board = sorted(entries, key=lambda e: (e.val_mse, e.config.n_params, e.index))
    if not board[0].ok:
        failures = "; ".join(f"#{e.index}: {e.error}" for e in entries)
        raise TrainingError(f"all {len(entries)} candidate trainings failed: {failures}", [])
    head = board[0]
    logger.info("search winner #%d val_mse=%.5g", head.index, head.val_mse)
    best = head.net
    if retrain and space.final_epochs != space.search_epochs:
        full = dataclasses.replace(head.config, epochs=space.final_epochs)
        try:
            longer = sgd_train(init_network(full), train, valid)
            if _mse(longer, valid) <= _mse(best, valid):
                best = longer
        except TrainingError as exc:
            logger.warning("final retraining failed (%s); keeping search-length fit", exc)
    return best, board


LEADERBOARD_COLUMNS = ("rank", "index", "depth", "widths", "activation", "lambda",
                       "val_mse", "train_mse", "seconds", "error")


def write_leaderboard(board, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LEADERBOARD_COLUMNS)
        for rank, e in enumerate(board, 1):
            w.writerow([
                rank, e.index, e.config.depth, "-".join(map(str, e.config.hidden_widths)),
                e.config.activation, repr(e.config.penalty_weight),
                repr(e.val_mse), repr(e.train_mse), f"{e.seconds:.3f}", e.error or "",
            ])
