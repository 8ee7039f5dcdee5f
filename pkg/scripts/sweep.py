"""Lookback or training-fraction sweep; writes the CSV the plot bundles read.

    python3 scripts/sweep.py lookback --data data/ETTh1.csv --out runs/sweeps
    python3 scripts/sweep.py fraction --data data/ETTh1.csv --epochs 5
"""

import argparse
from dataclasses import replace
from pathlib import Path

from umamba.config import load
from umamba.data import load_csv
from umamba.sweeps import fraction_sweep, lookback_sweep


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("kind", choices=("lookback", "fraction"))
    p.add_argument("--config", default="configs/etth1.cfg")
    p.add_argument("--data", help="overrides run.dataset_path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", default="runs/sweeps")
    args = p.parse_args()

    cfg = load(args.config)
    tcfg = replace(cfg.train, epochs=args.epochs) if args.epochs is not None else cfg.train
    ds = load_csv(args.data or cfg.run.dataset_path, cfg.run.dataset_name or None)
    mcfg = replace(cfg.model, N=ds.n_channels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sweep = lookback_sweep if args.kind == "lookback" else fraction_sweep
    path = sweep(out / f"{args.kind}_sweep.csv", mcfg, tcfg, ds, log=print)
    print(f"wrote {path}; plot data: python3 -m umamba emit-plots --run {out} --bundle {args.kind}")


if __name__ == "__main__":
    main()
