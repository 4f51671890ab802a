"""Command-line entry point: ``yieldnet <subcommand> [options]``.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""

import argparse
import json
import os
import sys
import warnings

import numpy as np

from . import analysis, baselines, data
from .errors import ConfigMismatchError, DivergenceError, FormatError, InputError, ShapeError
from .model import ModelConfig, TrainConfig, init_params, load_params, rmse, save_params, train, write_history
from .tensor import SeededRng

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

# config-file / flag keys that map onto ModelConfig and TrainConfig fields
MODEL_KEYS = {
    "image_size": int, "timesteps": int, "bands": int, "conv_layers": int, "conv_filters": int,
    "kernel": int, "stride": int, "lstm_layers": int, "lstm_hidden": int, "head_layers": int,
    "dropout_keep": float, "leaky_slope": float,
}
TRAIN_KEYS = {
    "learning_rate": float, "beta1": float, "beta2": float, "eps": float, "epochs": int,
    "batch_size": int, "clip_norm": float,
}
RUN_KEYS = {"seed": int, "train_years": str, "val_year": int, "test_year": int, "state": str,
            "n_draws": int, "method": str, "features": str}


class UsageError(Exception):
    pass


def _parse_years(text):
    years = []
    for part in str(text).split(","):
        lo, _, hi = part.strip().partition("-")
        years.extend(range(int(lo), int(hi or lo) + 1))
    return years


def resolve_config(args):
    """Defaults < config file < command-line flags. Returns a flat dict."""
    resolved = {"image_size": 300, "timesteps": 24, "bands": 12, "conv_layers": 5, "conv_filters": 16,
                "kernel": 3, "stride": 2, "lstm_layers": 3, "lstm_hidden": 512, "head_layers": 3,
                "dropout_keep": 0.75, "leaky_slope": 0.01, "learning_rate": 1e-3, "beta1": 0.9,
                "beta2": 0.999, "eps": 1e-8, "epochs": 100, "batch_size": 4, "clip_norm": 5.0,
                "seed": 0, "train_years": "2001-2009", "val_year": 2010, "test_year": 2011,
                "state": None, "n_draws": 5, "method": None, "features": "ndvi"}
    types = {**MODEL_KEYS, **TRAIN_KEYS, **RUN_KEYS}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            kv = data.parse_key_values(fh.read(), args.config)
        for key, value in kv.items():
            if key not in types:
                raise InputError(f"{args.config}: unknown key {key!r}")
            try:
                resolved[key] = types[key](value)
            except ValueError as exc:
                raise InputError(f"{args.config}: bad value for {key!r}: {exc}") from exc
    for key in types:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def model_config(cfg):
    return ModelConfig(
        input_height=cfg["image_size"], input_width=cfg["image_size"], bands=cfg["bands"],
        timesteps=cfg["timesteps"], conv_layers=cfg["conv_layers"], conv_filters=cfg["conv_filters"],
        kernel=cfg["kernel"], stride=cfg["stride"], lstm_layers=cfg["lstm_layers"],
        lstm_hidden=cfg["lstm_hidden"], head_layers=cfg["head_layers"],
        dropout_keep=cfg["dropout_keep"], leaky_slope=cfg["leaky_slope"])


def write_meta(out_dir, subcommand, cfg, extra=None):
    meta = {"subcommand": subcommand, **{k: v for k, v in sorted(cfg.items())}, **(extra or {})}
    with open(os.path.join(out_dir, "run.meta"), "w") as fh:
        for key in sorted(meta):
            fh.write(f"{key} = {json.dumps(meta[key])}\n")


def _out_dir(args):
    out = args.out
    try:
        os.makedirs(out, exist_ok=True)
        probe = os.path.join(out, ".write_probe")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise UsageError(f"cannot write to output directory {out}: {exc}") from exc
    return out


def _load_split(cfg, args, agri_mask):
    manifest = data.read_manifest(args.manifest, getattr(args, "labels", None))
    if getattr(args, "raster_dir", None):
        manifest.root = os.path.abspath(args.raster_dir)
    if cfg["state"]:
        manifest = manifest.filter(lambda r: r.state == cfg["state"])
    return data.split_by_year(manifest, _parse_years(cfg["train_years"]), cfg["val_year"], cfg["test_year"])


def _fit_input(entries, config):
    """Pad frames to the model's input size and check the band count."""
    out = []
    for rec, seq in entries:
        if seq.data.shape[3] != config.bands:
            raise ConfigMismatchError(
                f"{rec.region_id}/{rec.year} has {seq.data.shape[3]} bands but the model uses {config.bands}")
        if seq.data.shape[1:3] != (config.input_height, config.input_width):
            seq = data.pad_to(seq, config.input_height, config.input_width)
        out.append((rec, seq))
    return out


# subcommands -------------------------------------------------------------------

def cmd_synth(args):
    try:
        with open(args.spec) as fh:
            spec = data.SyntheticSpec.from_text(fh.read(), args.spec)
    except OSError as exc:
        raise UsageError(f"cannot read spec {args.spec}: {exc}") from exc
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else 0
    manifest = data.generate_synthetic(spec, seed, out)
    write_meta(out, "synth", {"seed": seed, "spec": os.path.basename(args.spec)},
               {"n_entries": len(manifest)})
    print(f"wrote {len(manifest)} region-years to {out}")
    return EXIT_OK


def cmd_train(args):
    cfg = resolve_config(args)
    out = _out_dir(args)
    config = model_config(cfg)
    agri_mask = config.bands == 9
    train_m, val_m, _ = _load_split(cfg, args, agri_mask)
    if len(train_m) == 0:
        raise InputError("manifest has no training rows for the requested years/state")
    train_e, skipped = data.load_sequences(train_m, agri_mask)
    val_e, skipped_v = data.load_sequences(val_m, agri_mask)
    if skipped or skipped_v:
        raise InputError(f"unreadable rasters: {[r.region_id + '/' + str(r.year) for r, _ in skipped + skipped_v]}")
    train_e, val_e = _fit_input(train_e, config), _fit_input(val_e, config)
    if not train_e:
        raise InputError("no training rasters could be loaded")
    stats = data.compute_norm_stats(seq for _, seq in train_e)
    train_s, val_s = data.to_samples(train_e, stats), data.to_samples(val_e, stats)
    labels = np.array([s.label for s in train_s])
    label_std = float(labels.std()) if labels.std() > 0 else 1.0
    rng = SeededRng(cfg["seed"])
    params = init_params(config, rng, float(labels.mean()), label_std)
    params.norm_stats = stats
    tcfg = TrainConfig(cfg["learning_rate"], cfg["beta1"], cfg["beta2"], cfg["eps"], cfg["epochs"],
                       cfg["batch_size"], cfg["seed"], cfg["clip_norm"])
    best, history = train(params, train_s, val_s, tcfg)
    ckpt = os.path.join(out, "checkpoint.yckp")
    save_params(best, ckpt)
    write_history(history, os.path.join(out, "history.csv"))
    train_rmse = analysis.evaluate(best, config, train_s).rmse
    final = min((h["val_rmse"] for h in history), default=float("nan"))
    write_meta(out, "train", cfg, {"train_rmse": train_rmse, "best_val_rmse": final})
    print(f"train RMSE {train_rmse:.4f} kg/ha; best validation RMSE {final:.4f} kg/ha")
    return EXIT_OK


def _load_model(args, cfg):
    try:
        params = load_params(args.checkpoint)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {args.checkpoint}: {exc}") from exc
    if args.bands is not None and args.bands != params.config.bands:
        raise ConfigMismatchError(f"checkpoint uses {params.config.bands} bands, run asked for {args.bands}")
    if params.norm_stats is None:
        raise FormatError("checkpoint carries no normalization statistics")
    return params


def _test_samples(args, cfg, params, split="test"):
    config = params.config
    train_m, val_m, test_m = _load_split(cfg, args, config.bands == 9)
    m = {"train": train_m, "val": val_m, "test": test_m}[split]
    entries, skipped = data.load_sequences(m, config.bands == 9)
    entries = _fit_input(entries, config)
    return data.to_samples(entries, params.norm_stats), skipped


def cmd_evaluate(args):
    cfg = resolve_config(args)
    out = _out_dir(args)
    params = _load_model(args, cfg)
    samples, skipped = _test_samples(args, cfg, params)
    report = analysis.evaluate(params, params.config, samples, skipped=skipped)
    analysis.write_eval_rows(report, os.path.join(out, "eval_rows.csv"))
    baselines.write_results([(cfg["state"] or "all", "CNN-LSTM-%d" % params.config.bands, report.rmse)],
                            os.path.join(out, "results.csv"))
    with open(os.path.join(out, "skipped.txt"), "w") as fh:
        for rec, reason in skipped:
            fh.write(f"{rec.region_id}\t{rec.year}\t{reason}\n")
    write_meta(out, "evaluate", cfg, {"rmse": report.rmse, "n_skipped": len(skipped)})
    print(f"test RMSE {report.rmse:.4f} kg/ha over {len(report.rows)} regions")
    if skipped:
        print(f"{len(skipped)} rasters skipped; see skipped.txt", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def cmd_early(args):
    cfg = resolve_config(args)
    out = _out_dir(args)
    params = _load_model(args, cfg)
    samples, skipped = _test_samples(args, cfg, params)
    if skipped:
        raise InputError(f"{len(skipped)} test rasters could not be read")
    curve = analysis.early_curve(params, params.config, samples)
    analysis.write_curve(curve, os.path.join(out, "early_curve.csv"))
    write_meta(out, "early", cfg)
    print("t,rmse")
    for t, v in enumerate(curve, start=1):
        print(f"{t},{v:.4f}")
    return EXIT_OK


def cmd_importance(args):
    cfg = resolve_config(args)
    out = _out_dir(args)
    params = _load_model(args, cfg)
    samples, skipped = _test_samples(args, cfg, params)
    if skipped:
        raise InputError(f"{len(skipped)} test rasters could not be read")
    seed, draws = cfg["seed"], cfg["n_draws"]
    months = analysis.month_importance(params, params.config, samples, seed, draws)
    bands = analysis.band_importance(params, params.config, samples, seed, draws)
    analysis.write_month_importance(months, os.path.join(out, "month_importance.csv"))
    analysis.write_band_importance(bands, os.path.join(out, "band_importance.csv"))
    write_meta(out, "importance", cfg, {"baseline_rmse": months.baseline_rmse})
    top = max(months.month_delta, key=months.month_delta.get)
    print(f"baseline RMSE {months.baseline_rmse:.4f}; most important month {top}")
    return EXIT_OK


def cmd_baseline(args):
    cfg = resolve_config(args)
    method = cfg["method"]
    if method not in baselines.METHODS:
        raise UsageError(f"unknown method {method!r}; valid methods: {', '.join(baselines.METHODS)}")
    if cfg["features"] not in baselines.FEATURES:
        raise UsageError(f"unknown feature set {cfg['features']!r}; valid: {', '.join(baselines.FEATURES)}")
    out = _out_dir(args)
    train_m, val_m, test_m = _load_split(cfg, args, False)
    loaded = []
    for m in (train_m, val_m, test_m):
        entries, skipped = data.load_sequences(m)
        if skipped:
            raise InputError(f"{len(skipped)} rasters could not be read")
        loaded.append(entries)
    rows = []
    states = sorted({rec.state for rec, _ in loaded[2]})
    for state in states:
        split = [[e for e in entries if e[0].state == state] for entries in loaded]
        result = baselines.evaluate_baseline(method, *split, seed=cfg["seed"], features=cfg["features"])
        rows.append((state, method, result.rmse))
        print(f"{state}: {method} RMSE {result.rmse:.4f} kg/ha (setting {result.hyperparameter})")
    if not rows:
        raise InputError("test split is empty")
    baselines.write_results(rows, os.path.join(out, f"baseline_{method}.csv"))
    X, _, recs = baselines.ndvi_matrix(loaded[2])
    baselines.write_features(X, recs, os.path.join(out, "ndvi_test_features.csv"))
    write_meta(out, "baseline", cfg)
    return EXIT_OK


# parser ------------------------------------------------------------------------

def _add_common(p, model_flags=False):
    p.add_argument("--manifest", required=True, help="manifest.txt listing region-year rasters")
    p.add_argument("--labels", help="labels CSV (default: labels.csv next to the manifest)")
    p.add_argument("--raster-dir", dest="raster_dir", help="directory raster paths are relative to")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--state", help="restrict to one state")
    p.add_argument("--bands", type=int, choices=(9, 12))
    p.add_argument("--train-years", dest="train_years")
    p.add_argument("--val-year", dest="val_year", type=int)
    p.add_argument("--test-year", dest="test_year", type=int)
    if model_flags:
        p.add_argument("--timesteps", type=int)
        p.add_argument("--image-size", dest="image_size", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--learning-rate", dest="learning_rate", type=float)
        p.add_argument("--conv-layers", dest="conv_layers", type=int)
        p.add_argument("--lstm-layers", dest="lstm_layers", type=int)
        p.add_argument("--lstm-hidden", dest="lstm_hidden", type=int)
        p.add_argument("--dropout-keep", dest="dropout_keep", type=float)


def build_parser():
    parser = argparse.ArgumentParser(prog="yieldnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with a planted signal")
    p.add_argument("--spec", required=True, help="key = value file describing the planted signal")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the CNN-LSTM and write the best checkpoint")
    _add_common(p, model_flags=True)
    p.set_defaults(func=cmd_train)

    for name, func, text in (("evaluate", cmd_evaluate, "test-year RMSE and per-region errors"),
                             ("early", cmd_early, "RMSE of early (prefix) predictions"),
                             ("importance", cmd_importance, "month and band importance by noise substitution")):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--n-draws", dest="n_draws", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("baseline", help="NDVI/VCI baselines")
    _add_common(p)
    p.add_argument("--method", required=True, help="one of: " + ", ".join(baselines.METHODS))
    p.add_argument("--features", help="ridge/tree/forest inputs: ndvi (default) or monthly band means")
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, InputError, FormatError, ShapeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
