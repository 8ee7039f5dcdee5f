"""Lookback-length and training-fraction sweeps.

Each sweep trains one model per setting with the same seed and writes a tidy
CSV (``model,<key>,mse,mae``) that the ``lookback`` and ``fraction`` plot
bundles read. The repeat-last baseline is scored alongside for reference.
"""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

from .data import Dataset
from .model import ModelConfig
from .train import (TrainConfig, baseline_metrics, evaluate_predictor, linear_config,
                    model_predictor, prepare, train)

LOOKBACKS = (48, 96, 192, 336, 720)
FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)
MODELS = ("umamba", "linear", "naive")


def _score(name: str, mcfg: ModelConfig, tcfg: TrainConfig, prep, log):
    if name == "naive":
        return baseline_metrics(prep, mcfg.T, space=tcfg.metric_space)
    cfg = mcfg if name == "umamba" else linear_config(mcfg)
    run = train(cfg, tcfg, prep, log=log)
    return evaluate_predictor(model_predictor(run.params, cfg), prep.test, 64, prep.scaler,
                              tcfg.metric_space)


def _sweep(path: Path, key: str, settings, make, data: Dataset, models: Sequence[str], log) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", key, "mse", "mae"])
        for value in settings:
            mcfg, tcfg = make(value)
            prep = prepare(data, mcfg.L, mcfg.T, tcfg)
            for name in models:
                m = _score(name, mcfg, tcfg, prep, log)
                w.writerow([name, value, repr(m.mse), repr(m.mae)])
                fh.flush()
                if log:
                    log(f"{key}={value} {name}: mse {m.mse:.5f} mae {m.mae:.5f}")
    return path


def lookback_sweep(path, mcfg: ModelConfig, tcfg: TrainConfig, data: Dataset,
                   lookbacks: Sequence[int] = LOOKBACKS, models: Sequence[str] = MODELS,
                   log: Callable[[str], None] | None = None) -> Path:
    """One row per (model, L); the horizon and scales stay fixed."""
    return _sweep(path, "L", lookbacks, lambda L: (replace(mcfg, L=L), tcfg), data, models, log)


def fraction_sweep(path, mcfg: ModelConfig, tcfg: TrainConfig, data: Dataset,
                   fractions: Sequence[float] = FRACTIONS, models: Sequence[str] = MODELS,
                   log: Callable[[str], None] | None = None) -> Path:
    """Train on the most recent share of training windows; val and test stay whole."""
    return _sweep(path, "fraction", fractions,
                  lambda f: (mcfg, replace(tcfg, train_fraction=f)), data, models, log)
