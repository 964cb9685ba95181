"""Feed-forward predictors trained by mini-batch SGD with l2/l1 penalties and dropout.

Layer ``l`` computes ``z_l = f(W_l z_{l-1} + b_l)`` with ``W_l`` of shape
``(N_l, N_{l-1})``; the last layer is affine only.  Training minimises

    0.5 * mean_i ||y_i - yhat_i||^2 + lam * phi(W, b)

with ``phi`` the squared l2 norm or the l1 norm of all weights and biases.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError, NumericalError, ParameterError, TrainingError

logger = logging.getLogger(__name__)

MODEL_FORMAT = "trafficdl.deepnet"
MODEL_VERSION = 1
DIVERGENCE_LOSS = 1e12


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    hidden_widths: tuple = ()
    activation: str = "tanh"
    output_dim: int = 1
    penalty_kind: str = "l2"
    penalty_weight: float = 1e-3
    dropout_p: float = 0.0
    learning_rate: float = 0.01
    lr_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    patience: int | None = None  # stop after this many epochs without validation gain

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1:
            raise ParameterError("input_dim must be at least 1")
        if self.output_dim < 1:
            raise ParameterError("output_dim must be at least 1")
        if any(w < 1 for w in self.hidden_widths):
            raise ParameterError("hidden widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        if self.penalty_kind not in ("l2", "l1", "none"):
            raise ParameterError(f"unknown penalty {self.penalty_kind!r}")
        if self.penalty_weight < 0:
            raise ParameterError("penalty weight must be non-negative")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ParameterError("dropout_p must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ParameterError("invalid optimiser settings")
        if self.patience is not None and self.patience < 1:
            raise ParameterError("patience must be at least 1")

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden_widths, self.output_dim)

    @property
    def depth(self):
        return len(self.hidden_widths)

    @property
    def n_params(self):
        d = self.layer_dims
        return sum(d[i + 1] * (d[i] + 1) for i in range(len(d) - 1))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _tanh_grad(z):
    t = np.tanh(z)
    return 1.0 - t * t


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z):
    return (z > 0).astype(z.dtype)


ACTIVATIONS = {"tanh": (np.tanh, _tanh_grad), "relu": (_relu, _relu_grad)}


@dataclass(eq=False)
class DeepNet:
    config: NetConfig
    weights: list
    biases: list
    loss_trace: list = field(default_factory=list)
    inference_scaled: bool = False

    @property
    def n_layers(self):
        return len(self.weights)

    def copy(self):
        return DeepNet(self.config, [w.copy() for w in self.weights],
                       [b.copy() for b in self.biases], list(self.loss_trace),
                       self.inference_scaled)

    def params(self):
        return [*self.weights, *self.biases]

    def to_dict(self):
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "config": self.config.to_dict(),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "loss_trace": [list(map(float, r)) for r in self.loss_trace],
            "inference_scaled": self.inference_scaled,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != MODEL_FORMAT:
            raise DataError("not a deep net model file")
        if d.get("version") != MODEL_VERSION:
            raise DataError(f"unsupported model version {d.get('version')}")
        net = cls(
            config=NetConfig.from_dict(d["config"]),
            weights=[np.array(w, dtype=float).reshape(o, i) for w, (i, o) in
                     zip(d["weights"], _pairs(NetConfig.from_dict(d["config"]).layer_dims))],
            biases=[np.array(b, dtype=float) for b in d["biases"]],
            loss_trace=[tuple(r) for r in d.get("loss_trace", [])],
            inference_scaled=bool(d.get("inference_scaled", False)),
        )
        return net

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _pairs(dims):
    return list(zip(dims[:-1], dims[1:]))


def init_network(config):
    """Glorot-uniform weights, zero biases, reproducible from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    weights, biases = [], []
    for fan_in, fan_out in _pairs(config.layer_dims):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return DeepNet(config, weights, biases)


def _forward(net, X, masks=None):
    f, _ = ACTIVATIONS[net.config.activation]
    acts = [X if masks is None else X * masks[0]]
    pre = []
    last = net.n_layers - 1
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = acts[-1] @ W.T + b
        pre.append(z)
        if l == last:
            acts.append(z)
        else:
            a = f(z)
            if masks is not None:
                a = a * masks[l + 1]
            acts.append(a)
    return acts, pre


def forward(net, x):
    """Prediction and per-layer activations (input first, output last) for one input."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size != net.config.input_dim:
        raise DimensionError(f"input must have length {net.config.input_dim}")
    acts, _ = _forward(net, x[None, :])
    return acts[-1][0], [a[0] for a in acts]


def penalty(net):
    kind = net.config.penalty_kind
    if kind == "none":
        return 0.0
    if kind == "l2":
        return float(sum(np.sum(p * p) for p in net.params()))
    return float(sum(np.sum(np.abs(p)) for p in net.params()))


def _penalty_grad(p, kind):
    if kind == "l2":
        return 2.0 * p
    if kind == "l1":
        return np.sign(p)
    return np.zeros_like(p)


def loss_and_gradients(net, X, Y, dropout_mask=None):
    """Penalised half-MSE on a batch and its gradients by backpropagation.

    Parameters
    ----------
    net : DeepNet
    X : ndarray, shape (B, input_dim)
    Y : ndarray, shape (B, output_dim) or (B,)
    dropout_mask : list of ndarray, optional
        One 0/1 array per dropout site (input, then each hidden layer), each
        broadcastable to that layer's activations.  Dropped units contribute
        nothing forward or backward.

    Returns
    -------
    loss : float
    grads : tuple ``(weight_grads, bias_grads)`` matching ``net.weights``/``net.biases``
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float).reshape(X.shape[0], -1)
    B = X.shape[0]
    if B == 0:
        raise DataError("empty batch")
    if X.shape[1] != net.config.input_dim or Y.shape[1] != net.config.output_dim:
        raise DimensionError("batch does not match network dimensions")
    data_loss, grads = _backprop(net, X, Y, dropout_mask)
    loss = data_loss + net.config.penalty_weight * penalty(net)
    if not math.isfinite(loss):
        raise NumericalError("non-finite loss")
    return loss, grads


def _backprop(net, X, Y, dropout_mask=None):
    """Half-MSE data term and full (penalised) gradients for a validated batch."""
    B = X.shape[0]
    _, fgrad = ACTIVATIONS[net.config.activation]
    acts, pre = _forward(net, X, dropout_mask)
    err = acts[-1] - Y
    lam = net.config.penalty_weight
    kind = net.config.penalty_kind
    data_loss = 0.5 * float(np.sum(err * err)) / B
    if not math.isfinite(data_loss):
        raise NumericalError("non-finite loss")
    delta = err / B
    gW = [None] * net.n_layers
    gb = [None] * net.n_layers
    for l in range(net.n_layers - 1, -1, -1):
        gW[l] = delta.T @ acts[l] + lam * _penalty_grad(net.weights[l], kind)
        gb[l] = delta.sum(axis=0) + lam * _penalty_grad(net.biases[l], kind)
        if l > 0:
            delta = (delta @ net.weights[l]) * fgrad(pre[l - 1])
            if dropout_mask is not None:
                delta = delta * dropout_mask[l]
    return data_loss, (gW, gb)


def _mse(net, X, Y):
    P = _forward(net, X)[0][-1]
    return float(np.mean((P - Y) ** 2))


def _inference_copy(net):
    out = net.copy()
    p = net.config.dropout_p
    if p > 0 and not net.inference_scaled:
        out.weights = [w * (1.0 - p) for w in out.weights]
        out.inference_scaled = True
    return out


def sgd_train(net, train, valid=None, epochs=None):
    """Train ``net`` by shuffled mini-batch SGD; returns a new trained net.

    ``train``/``valid`` are :class:`LagDesign` objects (or ``(X, Y)`` pairs).
    The step size decays as ``lr / (1 + decay * step)``.  With dropout, each
    step draws Bernoulli(1 - p) keep masks for the input and hidden units;
    the returned net has its weights scaled by ``1 - p`` for inference.
    The parameters of the epoch with the lowest validation MSE (training MSE
    when no validation set is given) are kept.  With ``config.patience`` set,
    training stops once that many epochs pass without a new best.

    ``loss_trace`` gets one ``(train_mse, valid_mse)`` pair per epoch,
    measured in inference mode; ``valid_mse`` is NaN without a validation set.
    """
    cfg = net.config
    Xtr, Ytr = _xy(train, cfg)
    Xva, Yva = _xy(valid, cfg) if valid is not None else (None, None)
    epochs = cfg.epochs if epochs is None else int(epochs)
    rng = np.random.default_rng([cfg.seed, 1])
    work = net.copy()
    work.inference_scaled = False
    p = cfg.dropout_p
    keep = 1.0 - p
    dims = cfg.layer_dims
    n = Xtr.shape[0]
    bs = min(cfg.batch_size, n)
    step = 0
    best, best_score = net.copy(), np.inf
    since_best = 0
    trace = list(net.loss_trace)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            masks = None
            if p > 0:
                masks = [(rng.random((1, d)) < keep).astype(float) for d in dims[:-1]]
            try:
                loss, (gW, gb) = _backprop(work, Xtr[idx], Ytr[idx], masks)
            except NumericalError:
                raise TrainingError("non-finite loss during training", trace) from None
            if loss > DIVERGENCE_LOSS:
                raise TrainingError(f"training diverged (loss {loss:.3g})", trace)
            lr = cfg.learning_rate / (1.0 + cfg.lr_decay * step)
            for l in range(work.n_layers):
                work.weights[l] -= lr * gW[l]
                work.biases[l] -= lr * gb[l]
            step += 1
        inf = _inference_copy(work)
        tr = _mse(inf, Xtr, Ytr)
        va = _mse(inf, Xva, Yva) if Xva is not None else float("nan")
        if not (math.isfinite(tr) and tr < DIVERGENCE_LOSS):
            raise TrainingError(f"training diverged at epoch {epoch}", trace)
        trace.append((tr, va))
        score = va if Xva is not None else tr
        if score < best_score:
            best_score = score
            best = inf
            since_best = 0
        else:
            since_best += 1
            if cfg.patience is not None and since_best >= cfg.patience:
                break
    best.loss_trace = trace
    if epochs == 0:
        best = net.copy()
    return best


def _xy(design, cfg):
    if isinstance(design, tuple):
        X, Y = design
    else:
        X, Y = design.X, design.y
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(X.shape[0], -1)
    if X.shape[1] != cfg.input_dim or Y.shape[1] != cfg.output_dim:
        raise DimensionError(
            f"design is {X.shape[1]}->{Y.shape[1]}, net is {cfg.input_dim}->{cfg.output_dim}"
        )
    return X, Y


def predict(net, design):
    """Row-wise predictions, shape ``(n_rows, output_dim)``."""
    X = design.X if hasattr(design, "X") else np.asarray(design, dtype=float)
    X = np.atleast_2d(X)
    if X.shape[1] != net.config.input_dim:
        raise DimensionError(f"expected {net.config.input_dim} inputs, got {X.shape[1]}")
    return _forward(_inference_copy(net), X)[0][-1]


def dropout_ridge_penalty(X, w, p):
    """``p (1 - p) sum_j (X^T X)_jj w_j^2``: the ridge term dropout induces on a linear fit."""
    X = np.asarray(X, dtype=float)
    w = np.asarray(w, dtype=float).ravel()
    if X.shape[1] != w.size:
        raise DimensionError("X columns and w length differ")
    return float(p * (1.0 - p) * np.sum(np.sum(X * X, axis=0) * w * w))
