"""ETTh1 desk run: train, then compare against the repeat-last and linear baselines.

    python3 scripts/desk_run.py --data data/ETTh1.csv

Prints test MSE/MAE for all three in standardized space and the fallback
checks (loss halving, validation below naive).
"""

import argparse
from dataclasses import replace

from umamba.config import load
from umamba.data import load_csv
from umamba.train import (baseline_metrics, evaluate_predictor, linear_config, model_predictor,
                          prepare, train)


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default="configs/etth1.cfg")
    p.add_argument("--data", help="overrides run.dataset_path")
    p.add_argument("--epochs", type=int)
    args = p.parse_args()

    cfg = load(args.config)
    tcfg = replace(cfg.train, epochs=args.epochs) if args.epochs is not None else cfg.train
    ds = load_csv(args.data or cfg.run.dataset_path, cfg.run.dataset_name or None)
    mcfg = replace(cfg.model, N=ds.n_channels)
    prep = prepare(ds, mcfg.L, mcfg.T, tcfg)

    scores = {}
    for name, m in (("umamba", mcfg), ("linear", linear_config(mcfg))):
        run = train(m, tcfg, prep, log=print)
        scores[name] = evaluate_predictor(model_predictor(run.params, m), prep.test, 64,
                                          prep.scaler, tcfg.metric_space)
        if name == "umamba":
            first, last = run.history[0].train_loss, run.history[-1].train_loss
            best_val = run.history[run.best_epoch - 1].val_mse
    scores["naive"] = baseline_metrics(prep, mcfg.T, space=tcfg.metric_space)
    naive_val = baseline_metrics(prep, mcfg.T, which="val", space=tcfg.metric_space)

    for name, m in scores.items():
        print(f"{name:8s} test mse {m.mse:.4f}  mae {m.mae:.4f}")
    print(f"train loss {first:.4f} -> {last:.4f} (halved: {last < 0.5 * first})")
    print(f"best val mse {best_val:.4f} vs naive {naive_val.mse:.4f}")


if __name__ == "__main__":
    main()
