"""Command-line entry point: ``trafficdl <subcommand> [options]``.

Every run resolves its configuration (flags over ``--config`` file over
defaults), writes its outputs, and records a manifest next to them.
``trafficdl replay MANIFEST`` re-executes a manifest.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from ._parallel import default_workers
from .datastore import (build_lag_design, drop_bad_days, impute_spatial, load_speed_csv,
                        split_tail_days, write_sensor_csv, write_speed_csv)
from .deepnet import NetConfig, init_network, sgd_train
from .diagnostics import diagnostics_report
from .errors import DataError, NumericalError, ParameterError, TrafficDLError
from .evalharness import (PipelineSpec, compare_models, export_heatmap, format_table,
                          parse_label)
from .filters import FilterSpec, filter_field
from .hypersearch import SearchSpace, random_search, write_leaderboard
from .seeding import derive_seed
from .sparsevar import fit_sparse_var, select_lambda, support
from .synthgen import CorridorParams, gen_dataset

logger = logging.getLogger("trafficdl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# defaults per subcommand; ``None`` means "required" or "choose automatically"
# --------------------------------------------------------------------------

DATA_DEFAULTS = {"data": None, "sensors": None, "filter": "none", "lags": 12, "horizon": 8}

DEFAULTS = {
    "synth": {"days": 180, "sensors": 21, "mix": "normal=0.8,event=0.1,weather=0.1",
              "seed": 7, "out": None, "params": {}},
    "filter": {"data": None, "sensors": None, "filter": "M8", "method": None, "window": 8,
               "lambda": 15.0, "order": 2, "alpha": 0.5, "out": None},
    "fit-var": {**DATA_DEFAULTS, "lambda": None, "target": None, "out": None},
    "fit-dl": {**DATA_DEFAULTS, "target": "S11", "select": "lasso", "hidden": "7,3",
               "activation": "tanh", "penalty": "l2", "lambda": 1e-3, "dropout": 0.0,
               "epochs": 200, "lr": 0.01, "batch": 32, "seed": 0, "out": None},
    "search": {**DATA_DEFAULTS, "target": "S11", "select": "lasso", "budget": 50,
               "space": None, "seed": 0, "out": None},
    "eval": {"data": None, "sensors": None, "specs": None,
             "labels": "naive,DLL,DLM8L,DLM8,DLTF15L,DLTF15,VARM8L,VARTF15L",
             "budget": None, "seed": 0, "target": "S11", "lags": 12, "horizon": 8,
             "out": None},
    "diagnose": {"input": None, "regressors": None, "lags": 24, "bg_order": 4,
                 "lwg_q": 10, "seed": 0, "out": None},
}

# outputs whose bytes depend on wall-clock time, excluded from replay checks
VOLATILE = {"leaderboard.csv"}


def _add_data_args(p, with_filter=True):
    p.add_argument("--data", help="long-format speed CSV (timestamp,sensor_id,speed)")
    p.add_argument("--sensors", help="optional sensor metadata CSV (sensor_id,milepost)")
    if with_filter:
        p.add_argument("--filter", help="none, M8, TF15, TF(15,1), EWMA(0.3)")
    p.add_argument("--lags", type=int, help="lags k per sensor")
    p.add_argument("--horizon", type=int, help="forecast horizon h in steps")


def build_parser():
    parser = _Parser(prog="trafficdl", description="Short-term traffic speed forecasting.")
    parser.add_argument("--version", action="version", version=f"trafficdl {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file with option values")
    common.add_argument("--workers", type=int, help="max parallel workers")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corridor")
    p.add_argument("--days", type=int)
    p.add_argument("--sensors", type=int)
    p.add_argument("--mix", help="e.g. normal=0.8,event=0.1,weather=0.1")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output speed CSV")

    p = sub.add_parser("filter", parents=[common], help="filter every sensor series")
    p.add_argument("--data", help="long-format speed CSV (timestamp,sensor_id,speed)")
    p.add_argument("--sensors", help="optional sensor metadata CSV (sensor_id,milepost)")
    p.add_argument("--filter", help="compact spec: none, M8, TF15, TF(15,1), EWMA(0.3)")
    p.add_argument("--method", choices=["none", "median", "tf", "ewma"],
                   help="filter kind; overrides --filter and reads the options below")
    p.add_argument("--window", type=int, help="median window length")
    p.add_argument("--lambda", dest="lambda", type=float, help="trend-filter penalty")
    p.add_argument("--order", type=int, choices=[1, 2], help="trend-filter difference order")
    p.add_argument("--alpha", type=float, help="EWMA weight in (0, 1]")
    p.add_argument("--out")

    p = sub.add_parser("fit-var", parents=[common], help="fit a sparse VAR")
    _add_data_args(p)
    p.add_argument("--lambda", dest="lambda", type=float)
    p.add_argument("--target", help="comma-separated target sensors (default: all)")
    p.add_argument("--out", help="model JSON")

    p = sub.add_parser("fit-dl", parents=[common], help="train one deep net")
    _add_data_args(p)
    p.add_argument("--target")
    p.add_argument("--select", choices=["none", "lasso"])
    p.add_argument("--hidden", help="comma-separated widths, e.g. 7,3")
    p.add_argument("--activation", choices=["tanh", "relu"])
    p.add_argument("--penalty", choices=["l2", "l1", "none"])
    p.add_argument("--lambda", dest="lambda", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="model JSON")

    p = sub.add_parser("search", parents=[common], help="random architecture search")
    _add_data_args(p)
    p.add_argument("--target")
    p.add_argument("--select", choices=["none", "lasso"])
    p.add_argument("--budget", type=int)
    p.add_argument("--space", help="SearchSpace JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("eval", parents=[common], help="compare pipelines")
    p.add_argument("--data")
    p.add_argument("--sensors")
    p.add_argument("--specs", help="JSON list of pipeline specs or labels")
    p.add_argument("--labels", help="comma-separated labels, e.g. DLM8L,VARM8L,naive")
    p.add_argument("--budget", type=int, help="search budget for DL specs")
    p.add_argument("--seed", type=int)
    p.add_argument("--target")
    p.add_argument("--lags", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("diagnose", parents=[common], help="residual test battery")
    p.add_argument("--input", help="CSV with y and yhat columns")
    p.add_argument("--regressors", help="optional CSV of regressors")
    p.add_argument("--lags", type=int)
    p.add_argument("--bg-order", dest="bg_order", type=int)
    p.add_argument("--lwg-q", dest="lwg_q", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="report JSON")

    p = sub.add_parser("replay", help="re-run a manifest")
    p.add_argument("manifest")
    p.add_argument("--out-dir", help="write outputs here instead of the recorded paths")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(command, args):
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(cfg) - {"workers"}
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in DEFAULTS[command]:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    for key, val in cfg.items():
        if val is None and key in REQUIRED.get(command, ()):
            raise UsageError(f"{command}: --{key} is required")
    return cfg


REQUIRED = {
    "synth": ("out",),
    "filter": ("data", "out"),
    "fit-var": ("data", "out"),
    "fit-dl": ("data", "out"),
    "search": ("data", "out"),
    "eval": ("data", "out"),
    "diagnose": ("input", "out"),
}


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _abs(path):
    return None if path is None else str(Path(path).resolve())


def _load(cfg):
    """Read speeds, impute across space and drop days that still have gaps."""
    field_ = load_speed_csv(cfg["data"], sensors_path=cfg.get("sensors"))
    if field_.missing.any():
        field_ = impute_spatial(field_)
        if field_.missing.any():
            before = field_.days.size
            field_ = drop_bad_days(field_, max_missing_frac=0.0)
            logger.info("dropped %d day(s) with unfillable gaps", before - field_.days.size)
    return field_


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _sensor_path(out):
    p = Path(out)
    return p.with_name(p.stem + "_sensors.csv")


def _targets(field_, spec):
    if spec in (None, "", "all"):
        return list(field_.sensor_ids)
    return [s.strip() for s in str(spec).split(",")]


def _prepared_design(cfg, workers):
    field_ = _load(cfg)
    filtered = filter_field(field_, cfg["filter"], workers=workers)
    return field_, filtered


def _selected_columns(design, target, select, seed, workers):
    if select != "lasso":
        return np.arange(design.X.shape[1]), None
    fit_part, valid = split_tail_days(design)
    lam, _ = select_lambda(fit_part, valid, workers=workers)
    sel = fit_sparse_var(design, lam, workers=workers)
    chosen = support(sel, target) or [(target, 0)]
    return np.array([design.column_index(s, l) for s, l in chosen]), lam


def _dl_payload(net, design, cols, target, ym, ys, extra):
    return {
        "format": "trafficdl.dl_predictor",
        "version": 1,
        "target": target,
        "k": design.k,
        "h": design.h,
        "columns": [list(design.column_map[c]) for c in cols],
        "center": design.center[cols].tolist(),
        "scale": design.scale[cols].tolist(),
        "target_center": ym,
        "target_scale": ys,
        "net": net.to_dict(),
        **extra,
    }


def _dl_data(design, cols):
    fit_part, valid = _inner_days(design)
    ym = float(fit_part.y[:, 0].mean())
    ys = float(fit_part.y[:, 0].std()) or 1.0

    def xy(d):
        return d.X[:, cols], (d.y[:, 0] - ym) / ys

    return xy(fit_part), xy(valid), ym, ys


def _inner_days(design, frac=0.25):
    days = design.days
    if days.size < 2:
        raise DataError("need at least two days")
    n_valid = min(days.size - 1, max(1, int(round(frac * days.size))))
    mask = np.isin(design.row_days, days[: days.size - n_valid])
    return design.take_rows(mask), design.take_rows(~mask)


# --------------------------------------------------------------------------
# subcommands: each returns the list of output paths it wrote
# --------------------------------------------------------------------------

def cmd_synth(cfg, workers):
    extra = dict(cfg.get("params", {}))
    if "bottleneck" not in extra:
        # keep the default bottleneck at the same relative position on shorter corridors
        ref = CorridorParams()
        extra["bottleneck"] = max(1, round(ref.bottleneck * cfg["sensors"] / ref.n_sensors))
    params = CorridorParams(**{**extra, "n_sensors": cfg["sensors"], "seed": cfg["seed"]})
    field_ = gen_dataset(params, cfg["days"], cfg["mix"], seed=cfg["seed"])
    out = cfg["out"]
    write_speed_csv(field_, out)
    sensors = _sensor_path(out)
    write_sensor_csv(field_, sensors)
    logger.info("wrote %d days x %d sensors to %s", cfg["days"], cfg["sensors"], out)
    return [out, str(sensors)]


def _filter_spec(cfg):
    if not cfg.get("method"):
        return FilterSpec.parse(cfg["filter"])
    return FilterSpec(kind=cfg["method"], window=cfg["window"], lam=cfg["lambda"],
                      order=cfg["order"], alpha=cfg["alpha"])


def cmd_filter(cfg, workers):
    field_ = _load(cfg)
    out = filter_field(field_, _filter_spec(cfg), workers=workers)
    write_speed_csv(out, cfg["out"])
    return [cfg["out"]]


def cmd_fit_var(cfg, workers):
    _, filtered = _prepared_design(cfg, workers)
    design = build_lag_design(filtered, cfg["lags"], cfg["horizon"],
                              targets=_targets(filtered, cfg["target"]))
    lam = cfg["lambda"]
    if lam is None:
        fit_part, valid = split_tail_days(design)
        lam, table = select_lambda(fit_part, valid, workers=workers)
        logger.info("lambda %.4g chosen on validation days", lam)
    model = fit_sparse_var(design, lam, workers=workers)
    model.fit_meta["filter"] = FilterSpec.parse(cfg["filter"]).to_dict()
    model.save(cfg["out"])
    return [cfg["out"]]


def cmd_fit_dl(cfg, workers):
    _, filtered = _prepared_design(cfg, workers)
    target = cfg["target"]
    design = build_lag_design(filtered, cfg["lags"], cfg["horizon"], targets=[target])
    cols, lam = _selected_columns(design, target, cfg["select"], cfg["seed"], workers)
    train, valid, ym, ys = _dl_data(design, cols)
    hidden = [int(w) for w in str(cfg["hidden"]).split(",") if w.strip()]
    config = NetConfig(input_dim=int(cols.size), hidden_widths=hidden,
                       activation=cfg["activation"], penalty_kind=cfg["penalty"],
                       penalty_weight=cfg["lambda"], dropout_p=cfg["dropout"],
                       learning_rate=cfg["lr"], batch_size=cfg["batch"],
                       epochs=cfg["epochs"], seed=derive_seed(cfg["seed"], "fit-dl"))
    net = sgd_train(init_network(config), train, valid)
    _write_json(_dl_payload(net, design, cols, target, ym, ys, {"selector_lambda": lam}),
                cfg["out"])
    return [cfg["out"]]


def cmd_search(cfg, workers):
    _, filtered = _prepared_design(cfg, workers)
    target = cfg["target"]
    design = build_lag_design(filtered, cfg["lags"], cfg["horizon"], targets=[target])
    cols, lam = _selected_columns(design, target, cfg["select"], cfg["seed"], workers)
    train, valid, ym, ys = _dl_data(design, cols)
    space = SearchSpace.from_json(cfg["space"]) if cfg["space"] else SearchSpace()
    space = dataclasses.replace(space, budget=cfg["budget"])
    net, board = random_search(train, valid, space, seed=cfg["seed"], workers=workers)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    best = out / "best_model.json"
    _write_json(_dl_payload(net, design, cols, target, ym, ys,
                            {"selector_lambda": lam, "space": space.to_dict()}), best)
    lb = out / "leaderboard.csv"
    write_leaderboard(board, lb)
    return [str(best), str(lb)]


def _load_specs(cfg):
    base = {"seed": cfg["seed"], "target": cfg["target"], "k": cfg["lags"],
            "h": cfg["horizon"]}
    if cfg["specs"]:
        with open(cfg["specs"]) as fh:
            raw = json.load(fh)
        specs = []
        for item in raw:
            if isinstance(item, str):
                specs.append(parse_label(item, **base))
            else:
                specs.append(PipelineSpec.from_dict({**base, **item}))
    else:
        specs = [parse_label(lab.strip(), **base) for lab in cfg["labels"].split(",")
                 if lab.strip()]
    if cfg["budget"] is not None:
        specs = [s.replace(search=dataclasses.replace(s.search, budget=cfg["budget"]))
                 if s.model == "dl-search" else s for s in specs]
    return specs


def cmd_eval(cfg, workers):
    field_ = _load(cfg)
    specs = _load_specs(cfg)
    rows, results = compare_models(specs, field_, workers=workers, keep_results=True)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    written = []
    table = format_table(rows)
    table.to_csv(out / "table.csv", index_label="metric")
    (out / "table.txt").write_text(table.to_string(float_format=lambda v: f"{v:.4f}") + "\n")
    written += [str(out / "table.csv"), str(out / "table.txt")]
    for spec, row, res in zip(specs, rows, results):
        if res is None:
            continue
        tag = spec.label
        pred_path = out / f"predictions_{tag}.csv"
        preds = res.predictions.copy()
        for col in ("issue_time", "target_time"):
            preds[col] = pd.DatetimeIndex(preds[col]).strftime("%Y-%m-%dT%H:%M:%S")
        preds.to_csv(pred_path, index=False)
        heat_path = out / f"heatmap_{tag}.csv"
        test = res.predictions[res.predictions.split == "test"]
        export_heatmap(field_, test, spec.target, heat_path)
        diag = diagnostics_report(test["y"].to_numpy(), test["yhat"].to_numpy(),
                                  seed=derive_seed(spec.seed, tag, "diagnostics"))
        diag_path = out / f"diagnostics_{tag}.json"
        _write_json(diag.to_dict(), diag_path)
        written += [str(pred_path), str(heat_path), str(diag_path)]
    print(table.to_string(float_format=lambda v: f"{v:.4f}"))
    return written


def cmd_diagnose(cfg, workers):
    frame = pd.read_csv(cfg["input"])
    missing = {"y", "yhat"} - set(frame.columns)
    if missing:
        raise DataError(f"{cfg['input']} lacks column(s) {sorted(missing)}")
    if "split" in frame.columns:
        frame = frame[frame["split"] == "test"]
    regs = None
    if cfg["regressors"]:
        regs = pd.read_csv(cfg["regressors"]).select_dtypes("number").to_numpy(dtype=float)
    report = diagnostics_report(frame["y"].to_numpy(float), frame["yhat"].to_numpy(float),
                                regressors=regs, portmanteau_lags=cfg["lags"],
                                bg_order=cfg["bg_order"], lwg_q=cfg["lwg_q"],
                                seed=cfg["seed"])
    _write_json(report.to_dict(), cfg["out"])
    text = Path(cfg["out"]).with_suffix(".txt")
    text.write_text(report.format_table() + "\n")
    print(report.format_table())
    return [cfg["out"], str(text)]


COMMANDS = {
    "synth": cmd_synth,
    "filter": cmd_filter,
    "fit-var": cmd_fit_var,
    "fit-dl": cmd_fit_dl,
    "search": cmd_search,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
}

PATH_KEYS = ("data", "sensors", "specs", "space", "input", "regressors", "out")


def manifest_path(command, cfg):
    out = Path(cfg["out"])
    if command in ("search", "eval"):
        return out / "manifest.json"
    return out.with_name(out.name + ".manifest.json")


def execute(command, cfg, workers):
    """Run a subcommand with a resolved config and write its manifest."""
    cfg = dict(cfg)
    if command == "synth":
        paths = ("out",)
    else:
        paths = PATH_KEYS
    for key in paths:
        if isinstance(cfg.get(key), str) and not (command == "synth" and key == "sensors"):
            cfg[key] = _abs(cfg[key])
    t0 = time.perf_counter()
    outputs = COMMANDS[command](cfg, workers)
    manifest = {
        "tool": "trafficdl",
        "version": __version__,
        "subcommand": command,
        "config": cfg,
        "seed": cfg.get("seed"),
        "workers": workers,
        "outputs": [_abs(p) for p in outputs],
        "primary_outputs": [_abs(p) for p in outputs if Path(p).name not in VOLATILE],
        "wall_seconds": round(time.perf_counter() - t0, 3),
    }
    mpath = manifest_path(command, cfg)
    _write_json(manifest, mpath)
    logger.info("manifest written to %s", mpath)
    return manifest


def replay(manifest_file, out_dir=None, workers=None):
    with open(manifest_file) as fh:
        manifest = json.load(fh)
    command = manifest["subcommand"]
    if command not in COMMANDS:
        raise DataError(f"manifest names unknown subcommand {command!r}")
    cfg = dict(manifest["config"])
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg["out"] = str(out_dir / Path(cfg["out"]).name)
    return execute(command, cfg, workers or manifest.get("workers") or 1)


def _setup_logging(verbose):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    _setup_logging(getattr(args, "verbose", False))
    try:
        if args.command == "replay":
            replay(args.manifest, args.out_dir)
            return EXIT_OK
        cfg = resolve_config(args.command, args)
        workers = args.workers or cfg.pop("workers", None) or default_workers()
        cfg.pop("workers", None)
        execute(args.command, cfg, workers)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ParameterError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrafficDLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
