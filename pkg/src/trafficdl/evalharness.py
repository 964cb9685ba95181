"""Filter -> lag design -> selection -> model pipelines, scored in and out of sample.

A pipeline is described by a :class:`PipelineSpec`; labels follow the
compact convention ``<model><filter><L>``, e.g. ``DLM8L`` is a deep net on
median-8 filtered data with lasso-selected inputs and ``VARTF15L`` a sparse
VAR on trend-filtered data.
"""

from __future__ import annotations

import dataclasses
import logging
import re
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .datastore import build_lag_design, split_train_test, write_wide_csv
from .deepnet import NetConfig, init_network, predict, sgd_train
from .errors import DataError, DimensionError, ParameterError, TrafficDLError
from .filters import FilterSpec, filter_field
from .hypersearch import SearchSpace, random_search
from .seeding import derive_seed
from .sparsevar import fit_sparse_var, select_lambda, support

logger = logging.getLogger(__name__)

MODELS = ("naive", "var", "dl", "dl-search")
METRIC_ROWS = ("IS MSE", "IS R2", "OS MSE", "OS R2")
DEFAULT_NET = {"hidden_widths": (7, 3), "activation": "tanh", "penalty_kind": "l2",
               "penalty_weight": 1e-3, "epochs": 200}


def mse(y, yhat):
    y = np.asarray(y, dtype=float).ravel()
    yhat = np.asarray(yhat, dtype=float).ravel()
    if y.shape != yhat.shape:
        raise DimensionError("y and yhat differ in length")
    if y.size == 0:
        raise DataError("mse of empty vectors")
    return float(np.mean((y - yhat) ** 2))


def r2(y, yhat):
    y = np.asarray(y, dtype=float).ravel()
    yhat = np.asarray(yhat, dtype=float).ravel()
    if y.shape != yhat.shape:
        raise DimensionError("y and yhat differ in length")
    sst = float(np.sum((y - y.mean()) ** 2))
    if not sst > 0:
        raise DataError("R2 undefined for a constant target")
    return 1.0 - float(np.sum((y - yhat) ** 2)) / sst


def naive_forecast(field, h):
    """Persistence forecast: ``yhat[:, t + h] = y[:, t]`` within each day (NaN elsewhere)."""
    h = int(h)
    if h < 1:
        raise ParameterError("h must be at least 1")
    out = np.full(field.speeds.shape, np.nan)
    for _, sl in field.day_slices():
        block = field.speeds[:, sl]
        if block.shape[1] > h:
            out[:, sl.start + h:sl.stop] = block[:, :-h]
    return out


@dataclass(frozen=True)
class PipelineSpec:
    label: str = ""
    model: str = "var"
    filter: FilterSpec = field(default_factory=FilterSpec)
    selector: str = "none"  # "none" or "lasso"
    selector_lambda: float | None = None  # None: choose on a validation grid
    var_lambda: float | None = None
    net: dict = field(default_factory=dict)
    search: SearchSpace | None = None
    h: int = 8
    k: int = 12
    target: str = "S11"
    seed: int = 0
    raw_target: bool = False
    valid_frac: float = 0.25
    lambda_grid_size: int = 10

    def __post_init__(self):
        if self.model not in MODELS:
            raise ParameterError(f"unknown model {self.model!r}")
        if self.selector not in ("none", "lasso"):
            raise ParameterError(f"unknown selector {self.selector!r}")
        object.__setattr__(self, "filter", FilterSpec.parse(self.filter))
        if isinstance(self.search, dict):
            object.__setattr__(self, "search", SearchSpace.from_dict(self.search))
        if self.model == "dl-search" and self.search is None:
            object.__setattr__(self, "search", SearchSpace())
        if self.h < 1 or self.k < 1:
            raise ParameterError("need h >= 1 and k >= 1")
        if not self.label:
            object.__setattr__(self, "label", self.default_label())

    def default_label(self):
        if self.model == "naive":
            return "naive" + self.filter.label
        head = "VAR" if self.model == "var" else "DL"
        return head + self.filter.label + ("L" if self.selector == "lasso" else "")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return {
            "label": self.label, "model": self.model, "filter": self.filter.to_dict(),
            "selector": self.selector, "selector_lambda": self.selector_lambda,
            "var_lambda": self.var_lambda, "net": _jsonable(self.net),
            "search": None if self.search is None else self.search.to_dict(),
            "h": self.h, "k": self.k, "target": self.target, "seed": self.seed,
            "raw_target": self.raw_target, "valid_frac": self.valid_frac,
            "lambda_grid_size": self.lambda_grid_size,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "name" in d and "model" not in d:
            base = parse_label(d.pop("name"))
            return base.replace(**{k: v for k, v in d.items()})
        return cls(**d)


def _jsonable(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


_LABEL = re.compile(r"(DL|VAR|naive)(M\d+|TF[0-9.]+)?(L)?", re.IGNORECASE)


def parse_label(text, **overrides):
    """Spec from a compact label such as ``DLM8L``, ``VARTF15L`` or ``naive``.

    ``DL`` labels map to a random architecture search.  ``VAR`` is always a
    lasso fit, so its trailing ``L`` only marks the label.
    """
    m = _LABEL.fullmatch(text.strip())
    if not m:
        raise ParameterError(f"cannot parse pipeline label {text!r}")
    head, filt, lasso = m.groups()
    head = head.lower()
    model = {"dl": "dl-search", "var": "var", "naive": "naive"}[head]
    kw = dict(label=text.strip(), model=model, filter=FilterSpec.parse(filt or "none"),
              selector="lasso" if lasso else "none")
    kw.update(overrides)
    return PipelineSpec(**kw)


STANDARD_VARIANTS = ("DLL", "DLM8L", "DLM8", "DLTF15L", "DLTF15", "VARM8L", "VARTF15L")


def standard_specs(**overrides):
    return [parse_label(lab, **overrides) for lab in STANDARD_VARIANTS]


@dataclass
class EvalRow:
    label: str
    is_mse: float = float("nan")
    is_r2: float = float("nan")
    os_mse: float = float("nan")
    os_r2: float = float("nan")
    n_train: int = 0
    n_test: int = 0
    status: str = "ok"

    def as_dict(self):
        return dataclasses.asdict(self)


@dataclass
class PipelineResult:
    row: EvalRow
    predictions: pd.DataFrame
    models: dict
    provenance: list


def _inner_split(train, frac):
    days = train.days
    if days.size < 2:
        raise DataError("need at least two training days for a validation split")
    n_valid = min(days.size - 1, max(1, int(round(frac * days.size))))
    mask = np.isin(train.row_days, days[: days.size - n_valid])
    return train.take_rows(mask), train.take_rows(~mask)


def _lasso(spec, train, fit_part, valid, lam, log):
    if lam is None:
        lam, table = select_lambda(fit_part, valid, n=spec.lambda_grid_size)
        log.append(f"lasso lambda {lam:.4g} chosen on validation grid "
                   f"({len(table)} points)")
    model = fit_sparse_var(train, lam)
    log.append(f"lasso fit lambda={lam:.4g}, nnz={int(model.support.sum())}")
    return model


def _design(spec, field_, filtered, log):
    design = build_lag_design(filtered, spec.k, spec.h, targets=[spec.target])
    if spec.raw_target and filtered is not field_:
        raw = build_lag_design(field_, spec.k, spec.h, targets=[spec.target],
                               standardize=False)
        design = dataclasses.replace(design, y=raw.y)
        log.append("targets taken from the unfiltered field")
    log.append(f"lag design {design.n_rows} rows x {design.X.shape[1]} columns")
    return design


def run_pipeline(spec, field_, split="first_half_days", workers=1):
    """Fit one pipeline on the training days and score it on both halves.

    Returns a :class:`PipelineResult` whose ``predictions`` frame holds one
    row per design row (issue time, target time, split, y, yhat).
    """
    log = []
    filtered = filter_field(field_, spec.filter, workers=workers)
    log.append(f"filter {spec.filter.label or 'none'}")
    design = _design(spec, field_, filtered, log)
    train, test = split_train_test(design, split)
    log.append(f"split: {train.n_rows} train rows, {test.n_rows} test rows")
    models = {}

    if spec.model == "naive":
        col = design.column_index(spec.target, 0)
        pred_tr = train.raw_X()[:, col]
        pred_te = test.raw_X()[:, col]
    elif spec.model == "var":
        fit_part, valid = _inner_split(train, spec.valid_frac)
        lam = spec.var_lambda if spec.var_lambda is not None else spec.selector_lambda
        var = _lasso(spec, train, fit_part, valid, lam, log)
        models["var"] = var
        pred_tr = var.predict(train.raw_X())[:, 0]
        pred_te = var.predict(test.raw_X())[:, 0]
    else:
        fit_part, valid = _inner_split(train, spec.valid_frac)
        cols = np.arange(design.X.shape[1])
        if spec.selector == "lasso":
            sel = _lasso(spec, train, fit_part, valid, spec.selector_lambda, log)
            models["selector"] = sel
            chosen = support(sel, spec.target)
            if not chosen:
                chosen = [(spec.target, 0)]
                log.append("lasso support empty; using the target's own lag 0")
            cols = np.array([design.column_index(s, l) for s, l in chosen])
            log.append(f"{cols.size} predictors selected")
        ym, ys = float(fit_part.y.mean()), float(fit_part.y.std()) or 1.0

        def xy(d):
            return d.X[:, cols], (d.y[:, 0] - ym) / ys

        seed = derive_seed(spec.seed, spec.label, "dl")
        if spec.model == "dl":
            cfg = NetConfig(**{**DEFAULT_NET, **spec.net, "input_dim": int(cols.size),
                               "output_dim": 1, "seed": seed})
            net = sgd_train(init_network(cfg), xy(fit_part), xy(valid))
        else:
            net, board = random_search(xy(fit_part), xy(valid), spec.search, seed=seed,
                                       workers=workers)
            models["leaderboard"] = board
            log.append(f"search winner: depth {net.config.depth}, widths "
                       f"{list(net.config.hidden_widths)}, {net.config.activation}")
        models["dl"] = net
        models["dl_columns"] = [design.column_map[c] for c in cols]
        models["target_scale"] = (ym, ys)
        pred_tr = predict(net, train.X[:, cols])[:, 0] * ys + ym
        pred_te = predict(net, test.X[:, cols])[:, 0] * ys + ym

    y_tr, y_te = train.y[:, 0], test.y[:, 0]
    if pred_tr.size != train.n_rows or pred_te.size != test.n_rows:
        raise DataError("row accounting mismatch between split and predictions")
    row = EvalRow(spec.label, mse(y_tr, pred_tr), r2(y_tr, pred_tr),
                  mse(y_te, pred_te), r2(y_te, pred_te), train.n_rows, test.n_rows)
    frames = []
    for name, d, yv, pv in (("train", train, y_tr, pred_tr), ("test", test, y_te, pred_te)):
        frames.append(pd.DataFrame({
            "issue_time": d.timestamps,
            "target_time": d.target_times(),
            "day": d.row_days,
            "split": name,
            "y": yv,
            "yhat": pv,
        }))
    preds = pd.concat(frames, ignore_index=True)
    for line in log:
        logger.info("[%s] %s", spec.label, line)
    return PipelineResult(row, preds, models, log)


def compare_models(specs, field_, split="first_half_days", workers=1, keep_results=False):
    """Run every spec; a failing spec yields a row marked ``failed`` instead of raising."""
    if not specs:
        raise ParameterError("need at least one spec")
    rows, results = [], []
    for spec in specs:
        try:
            res = run_pipeline(spec, field_, split, workers)
            rows.append(res.row)
            results.append(res)
        except TrafficDLError as exc:
            logger.warning("spec %s failed: %s", spec.label, exc)
            rows.append(EvalRow(spec.label, status=f"failed: {exc}"))
            results.append(None)
    return (rows, results) if keep_results else rows


def format_table(rows):
    """Metrics as rows, specs as columns."""
    data = {r.label: [r.is_mse, r.is_r2, r.os_mse, r.os_r2] for r in rows}
    return pd.DataFrame(data, index=list(METRIC_ROWS))


def export_heatmap(field_, predictions, target, path):
    """Wide time x milepost grid with ``target``'s column replaced by forecasts.

    ``predictions`` is a Series indexed by target timestamp (or a frame with
    ``target_time`` and ``yhat`` columns).  Times without a forecast are blank.
    """
    if isinstance(predictions, pd.DataFrame):
        predictions = pd.Series(predictions["yhat"].to_numpy(),
                                index=pd.DatetimeIndex(predictions["target_time"]))
    i = field_.sensor_index(target)
    ts = pd.DatetimeIndex(field_.timestamps)
    pos = ts.get_indexer(pd.DatetimeIndex(predictions.index))
    if np.any(pos < 0):
        raise DataError("predictions contain timestamps outside the field")
    if len(np.unique(pos)) != len(pos):
        raise DataError("duplicate prediction timestamps")
    grid = np.array(field_.speeds, dtype=float)
    grid[i] = np.nan
    grid[i, pos] = predictions.to_numpy(dtype=float)
    write_wide_csv(field_, path, speeds=grid)
    return grid
