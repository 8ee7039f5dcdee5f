"""Command line: train, evaluate, predict, ablate, bench-scaling, emit-plots.

Exit codes: 0 success, 1 other failure, 2 config error, 3 data error,
4 numeric divergence. Every command creates a run directory named by
timestamp and seed and writes the effective config there first.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import config as cfgmod
from .bench import bench_scaling
from .config import RunConfig, serialize, set_fields
from .data import Dataset, load_csv, windows
from .errors import ConfigError, DataError, DivergenceError, UmambaError
from .model import ModelConfig, forecast
from .plots import BUNDLES, emit_plot_data
from .train import (Prepared, TrainConfig, evaluate_predictor, horizons_rows, load_run,
                    model_predictor, prepare, repeat_last_predictor, scaler_from_meta, train)

SINGLE_SCALE_NOTE = ("single-scale keeps the topmost skip: the decoder maps "
                     "concat(X_1, MTSP(X_1)) from 2*M1 to T")


def ablation_variants(mcfg: ModelConfig) -> list[tuple[str, ModelConfig]]:
    return [
        ("full", mcfg),
        ("no-CAM", replace(mcfg, use_cam=False)),
        ("no-RML", replace(mcfg, use_rml=False)),
        ("ULL-only", replace(mcfg, use_rml=False, use_cam=False)),
        ("single-scale", replace(mcfg, scales=mcfg.scales[:1])),
        ("single-RML", replace(mcfg, K=1)),
    ]


# ---------------------------------------------------------------- helpers


def make_run_dir(root, seed: int, label: str = "") -> Path:
    root = Path(root)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = f"{stamp}-seed{seed}" + (f"-{label}" if label else "")
    path = root / base
    k = 1
    while path.exists():
        path = root / f"{base}.{k}"
        k += 1
    path.mkdir(parents=True)
    return path


def load_dataset(cfg: RunConfig) -> Dataset:
    if not cfg.run.dataset_path:
        raise ConfigError("run.dataset_path is not set")
    return load_csv(cfg.run.dataset_path, cfg.run.dataset_name or None)


def fit_to_data(cfg: RunConfig, ds: Dataset) -> RunConfig:
    """Take the channel count from the data unless the config pins it."""
    if "model.N" in cfg.explicit:
        if cfg.model.N != ds.n_channels:
            raise ConfigError(f"model.N = {cfg.model.N} but the dataset has {ds.n_channels} channels")
        return cfg
    return set_fields(cfg, model={"N": ds.n_channels})


def read_config(args) -> RunConfig:
    cfg = cfgmod.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "set", None):
        cfg = cfgmod.with_overrides(cfg, args.set)
    return cfg


def echo_config(run_dir: Path, cfg: RunConfig) -> None:
    (run_dir / "config.txt").write_text(serialize(cfg))


def _say(msg: str) -> None:
    print(msg, flush=True)


def write_forecasts(path: Path, predict, ws, scaler, space: str, batch_size: int = 64):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window", "channel", "step", "truth", "prediction"])
        counter = [0]

        def sink(starts, y, pred):
            for b in range(y.shape[0]):
                win = counter[0]
                counter[0] += 1
                for c in range(y.shape[1]):
                    for s in range(y.shape[2]):
                        w.writerow([win, c, s, repr(float(y[b, c, s])), repr(float(pred[b, c, s]))])

        return evaluate_predictor(predict, ws, batch_size, scaler, space, sink)


def run_training(cfg: RunConfig, prep: Prepared | None, run_dir: Path, ds: Dataset | None = None):
    prep = prep or prepare(ds, cfg.model.L, cfg.model.T, cfg.train)
    history_path = run_dir / "history.csv"
    timing_path = run_dir / "timing.csv"
    result = train(cfg.model, cfg.train, prep, log=_say)
    history_path.write_text(result.history_csv())
    timing_path.write_text(result.timing_csv())
    result.save(run_dir / "checkpoint.umts")
    return result, prep


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = read_config(args)
    run_dir = make_run_dir(args.out or cfg.run.output_dir, cfg.seed)
    echo_config(run_dir, cfg)
    ds = load_dataset(cfg)
    cfg = fit_to_data(cfg, ds)
    echo_config(run_dir, cfg)
    _say(f"run directory {run_dir}")
    horizons = cfg.run.horizons or (cfg.model.T,)
    results = []
    for T in horizons:
        # several horizons: one model each, artifacts under T<horizon>/
        hcfg = cfg if len(horizons) == 1 else set_fields(cfg, model={"T": T})
        target = run_dir
        if len(horizons) > 1:
            target = run_dir / f"T{T}"
            target.mkdir()
            echo_config(target, hcfg)
            _say(f"== horizon {T}")
        result, prep = run_training(hcfg, None, target, ds)
        tm = evaluate_predictor(model_predictor(result.params, hcfg.model), prep.test, 64,
                                prep.scaler, cfg.train.metric_space)
        results.append((T, tm))
        _say(f"T={T} best epoch {result.best_epoch}  test mse {tm.mse:.5f}  mae {tm.mae:.5f}")
    (run_dir / "metrics.csv").write_text(horizons_rows(results))
    return 0


def _data_for_checkpoint(args, meta: dict, mcfg: ModelConfig) -> tuple[Prepared, TrainConfig]:
    tc = TrainConfig(**{k: (tuple(v) if k == "ratios" else v)
                        for k, v in meta.get("train_config", {}).items()})
    if args.space:
        tc = replace(tc, metric_space=args.space)
    ds = load_csv(args.data, args.name)
    if ds.n_channels != mcfg.N:
        raise ConfigError(f"checkpoint expects N={mcfg.N} channels, {args.data} has {ds.n_channels}")
    prep = prepare(ds, mcfg.L, mcfg.T, tc)
    saved = scaler_from_meta(meta)
    if saved is not None and not np.allclose(saved.mean, prep.scaler.mean):
        raise DataError("dataset statistics differ from the ones stored in the checkpoint")
    return prep, tc


def cmd_evaluate(args) -> int:
    run_dir = make_run_dir(args.out, 0, "eval")
    (run_dir / "config.txt").write_text(
        "\n".join(["[evaluate]", *(f"checkpoint = {c}" for c in args.checkpoint),
                   f"data = {args.data}", f"split = {args.split}", f"space = {args.space or ''}"]) + "\n")
    results = []
    for ckpt in args.checkpoint:
        params, mcfg, meta = load_run(ckpt)
        prep, tc = _data_for_checkpoint(args, meta, mcfg)
        ws = getattr(prep, args.split)
        predict = repeat_last_predictor(mcfg.T) if args.naive else model_predictor(params, mcfg)
        m = write_forecasts(run_dir / f"forecast_T{mcfg.T}.csv", predict, ws, prep.scaler,
                            tc.metric_space)
        results.append((mcfg.T, m))
        _say(f"{ckpt}: T={mcfg.T} {args.split} mse {m.mse:.5f} mae {m.mae:.5f} ({m.count} windows)")
    (run_dir / "metrics.csv").write_text(horizons_rows(results))
    _say(f"wrote {run_dir}")
    return 0


def cmd_predict(args) -> int:
    params, mcfg, meta = load_run(args.checkpoint)
    ds = load_csv(args.input)
    if ds.n_channels != mcfg.N:
        raise ConfigError(f"checkpoint expects N={mcfg.N} channels, input has {ds.n_channels}")
    if ds.rows < mcfg.L:
        raise DataError(f"input has {ds.rows} rows, the model needs the last L={mcfg.L}")
    scaler = scaler_from_meta(meta)
    vals = ds.values[-mcfg.L:]
    if scaler is not None:
        vals = scaler.transform(vals)
    pred = forecast(vals.T, params, mcfg).data.T  # (T, N)
    if scaler is not None:
        pred = scaler.inverse(pred)
    out = Path(args.output) if args.output else None
    fh = out.open("w", newline="") if out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", *ds.channels])
        for s, row in enumerate(pred, start=1):
            w.writerow([s, *(repr(float(v)) for v in row)])
    finally:
        if out:
            fh.close()
    return 0


def cmd_ablate(args) -> int:
    cfg = read_config(args)
    run_dir = make_run_dir(args.out or cfg.run.output_dir, cfg.seed, "ablate")
    echo_config(run_dir, cfg)
    ds = load_dataset(cfg)
    cfg = fit_to_data(cfg, ds)
    echo_config(run_dir, cfg)
    prep = prepare(ds, cfg.model.L, cfg.model.T, cfg.train)
    variants = ablation_variants(cfg.model)
    if args.variants:
        names = {v for v in args.variants}
        unknown = names - {n for n, _ in variants}
        if unknown:
            raise ConfigError(f"unknown ablation variants: {sorted(unknown)}")
        variants = [(n, m) for n, m in variants if n in names]
    table = run_dir / "ablation.csv"
    with table.open("w", newline="") as fh:
        fh.write(f"# {SINGLE_SCALE_NOTE}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "ULL", "RML", "CAM", "n", "K", "val_mse", "test_mse", "test_mae"])
        for name, mcfg in variants:
            _say(f"== {name}")
            sub = run_dir / name
            sub.mkdir()
            vcfg = replace(cfg, model=mcfg)
            echo_config(sub, vcfg)
            result, _ = run_training(vcfg, prep, sub)
            tm = evaluate_predictor(model_predictor(result.params, mcfg), prep.test, 64,
                                    prep.scaler, cfg.train.metric_space)
            best = result.history[result.best_epoch - 1].val_mse if result.best_epoch else float("nan")
            w.writerow([name, 1, int(mcfg.use_rml), int(mcfg.use_cam), mcfg.n, mcfg.K,
                        repr(best), repr(tm.mse), repr(tm.mae)])
            fh.flush()
    _say(f"wrote {table}")
    return 0


def cmd_bench(args) -> int:
    cfg = read_config(args)
    run_dir = make_run_dir(args.out or cfg.run.output_dir, cfg.seed, "bench")
    echo_config(run_dir, cfg)
    rep = bench_scaling(args.L, cfg.model, repeats=args.repeats, seed=cfg.seed)
    (run_dir / "scaling.csv").write_text(rep.to_csv())
    _say(rep.to_csv().rstrip())
    _say(rep.summary())
    return 0


def cmd_emit(args) -> int:
    written = emit_plot_data(args.run, args.out, args.bundle, args.window)
    for b, p in written.items():
        _say(f"{b}: {p}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="umamba", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="run config file ([run]/[model]/[train] sections)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config key; repeatable")
        sp.add_argument("--out", help="root for run directories (default: run.output_dir)")

    sp = sub.add_parser("train", help="train on a CSV dataset")
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="score checkpoints on a split; writes metrics and forecasts")
    sp.add_argument("--checkpoint", nargs="+", required=True)
    sp.add_argument("--data", required=True, help="dataset CSV the checkpoints were trained on")
    sp.add_argument("--name", help="declared dataset name for manifest validation")
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.add_argument("--space", choices=("standardized", "raw"),
                    help="metric space (default: the one used in training)")
    sp.add_argument("--naive", action="store_true", help="score the repeat-last baseline instead")
    sp.add_argument("--out", default="runs")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("predict", help="forecast T steps after the last L rows of a CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", help="CSV path (default: stdout)")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("ablate", help="train and score the module ablation grid")
    with_config(sp)
    sp.add_argument("--variants", nargs="+", help="subset of: " + ", ".join(
        n for n, _ in ablation_variants(ModelConfig())))
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("bench-scaling", help="forward time and memory against lookback length")
    with_config(sp)
    sp.add_argument("--L", type=int, nargs="+", default=[128, 256, 512, 1024])
    sp.add_argument("--repeats", type=int, default=5)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("emit-plots", help="tidy CSVs for plotting from a run directory")
    sp.add_argument("--run", required=True)
    sp.add_argument("--out")
    sp.add_argument("--bundle", nargs="+", choices=BUNDLES)
    sp.add_argument("--window", type=int)
    sp.set_defaults(func=cmd_emit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UmambaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ad.NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DivergenceError.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
