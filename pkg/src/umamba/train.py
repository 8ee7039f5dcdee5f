"""Adam training loop, evaluation and the two sanity baselines."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import Dataset, MetricAccumulator, Metrics, Scaler, Segment, WindowSet, split, windows
from .errors import ConfigError, DivergenceError
from .mamba import Params
from .model import ModelConfig, forecast, init_model, load_checkpoint, model_forward, save_checkpoint
from .rng import Streams

METRIC_SPACES = ("standardized", "raw")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay: float = 0.8
    decay_after: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 2024
    stride: int = 1
    ratios: tuple[float, float, float] = (0.7, 0.2, 0.1)
    border_lookback: bool = False
    metric_space: str = "raw"
    train_fraction: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.metric_space not in METRIC_SPACES:
            raise ConfigError(f"metric_space must be one of {METRIC_SPACES}")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError("train_fraction must lie in (0, 1]")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be >= 0 (0 disables clipping)")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        return self.lr * self.lr_decay ** max(0, epoch - self.decay_after)


# ---------------------------------------------------------------- optimizer


@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Params, **kw) -> "OptState":
        return cls({k: np.zeros(p.shape) for k, p in params.items()},
                   {k: np.zeros(p.shape) for k, p in params.items()}, **kw)


def adam_step(params: Params, grads: dict[str, np.ndarray], state: OptState) -> None:
    """In-place bias-corrected Adam update of ``params`` (data only)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        p = params[name]
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def collect_grads(params: Params) -> dict[str, np.ndarray]:
    return {k: (p.grad if p.grad is not None else np.zeros(p.shape)) for k, p in params.items()}


# ---------------------------------------------------------------- data prep


@dataclass
class Prepared:
    """Standardized values, segments and window sets for one (L, T)."""

    scaler: Scaler
    values: np.ndarray
    segments: tuple[Segment, Segment, Segment]
    train: WindowSet
    val: WindowSet
    test: WindowSet


def prepare(data: Dataset | np.ndarray, L: int, T: int, tcfg: TrainConfig) -> Prepared:
    raw = data.values if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    if raw.ndim != 2:
        raise ConfigError(f"expected (rows, channels) values, got shape {raw.shape}")
    # split sizes come from the raw row count; the scaler sees training rows only
    segs_raw = split(raw, tcfg.ratios, min_len=0 if tcfg.border_lookback else L + T)
    scaler = Scaler.fit(segs_raw[0].values)
    values = scaler.transform(raw)
    segs = split(values, tcfg.ratios)
    tr = windows(segs[0], L, T, tcfg.stride)
    if tcfg.train_fraction < 1:
        keep = max(1, int(round(len(tr) * tcfg.train_fraction)))
        tr = WindowSet(tr.source, tr.starts[len(tr) - keep:], L, T)
    va = windows(segs[1], L, T, 1, tcfg.border_lookback)
    te = windows(segs[2], L, T, 1, tcfg.border_lookback)
    return Prepared(scaler, values, segs, tr, va, te)


# ---------------------------------------------------------------- evaluation

Predictor = Callable[[np.ndarray], np.ndarray]


def model_predictor(params: Params, cfg: ModelConfig) -> Predictor:
    def run(X: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return forecast(X, params, cfg).data
    return run


def repeat_last(X: np.ndarray, T: int) -> np.ndarray:
    return np.repeat(X[..., -1:], T, axis=-1)


def repeat_last_predictor(T: int) -> Predictor:
    return lambda X: repeat_last(X, T)


def evaluate_predictor(predict: Predictor, ws: WindowSet, batch_size: int = 64,
                       scaler: Scaler | None = None, space: str = "standardized",
                       sink: Callable[[np.ndarray, np.ndarray, np.ndarray], None] | None = None) -> Metrics:
    """Aggregate MSE/MAE over every window of ``ws`` at stride 1 order.

    The windows hold standardized values; ``space="raw"`` maps truth and
    prediction back through ``scaler`` before scoring.
    """
    if space not in METRIC_SPACES:
        raise ConfigError(f"metric space must be one of {METRIC_SPACES}")
    acc = MetricAccumulator()
    sc = scaler.channel_first() if scaler is not None else None
    for b in ws.batches(batch_size):
        pred = predict(b.X)
        y = b.Y
        if space == "raw":
            if sc is None:
                raise ConfigError("raw-space metrics need the dataset scaler")
            pred, y = sc.inverse(pred), sc.inverse(y)
        acc.update(y, pred)
        if sink is not None:
            sink(b.starts, y, pred)
    return acc.result()


def evaluate(params: Params, cfg: ModelConfig, ws: WindowSet, batch_size: int = 64,
             scaler: Scaler | None = None, space: str = "standardized") -> Metrics:
    if ws.L != cfg.L or ws.T != cfg.T:
        raise ConfigError(f"checkpoint expects L={cfg.L}, T={cfg.T}; windows have L={ws.L}, T={ws.T}")
    if ws.source.shape[1] != cfg.N:
        raise ConfigError(f"checkpoint expects N={cfg.N} channels, data has {ws.source.shape[1]}")
    return evaluate_predictor(model_predictor(params, cfg), ws, batch_size, scaler, space)


# ---------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mse: float
    val_mae: float
    seconds: float = field(default=0.0, compare=False)


@dataclass
class TrainRun:
    model_config: ModelConfig
    train_config: TrainConfig
    history: list[EpochRecord]
    best_epoch: int
    params: Params
    scaler: Scaler
    initial_loss: float = math.nan

    def history_csv(self) -> str:
        """Deterministic history; wall-clock seconds live in :meth:`timing_csv`."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_mse", "val_mae"])
        for r in self.history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_mse), repr(r.val_mae)])
        return buf.getvalue()

    def timing_csv(self) -> str:
        lines = ["epoch,seconds"] + [f"{r.epoch},{r.seconds:.3f}" for r in self.history]
        return "\n".join(lines) + "\n"

    def checkpoint_meta(self) -> dict:
        return {"best_epoch": self.best_epoch, "seed": self.train_config.seed,
                "train_config": asdict(self.train_config),
                "scaler_mean": [repr(float(x)) for x in self.scaler.mean],
                "scaler_std": [repr(float(x)) for x in self.scaler.std]}

    def save(self, path) -> bytes:
        return save_checkpoint(path, self.params, self.model_config, self.checkpoint_meta())


def scaler_from_meta(meta: dict) -> Scaler | None:
    if "scaler_mean" not in meta:
        return None
    return Scaler(np.array([float(x) for x in meta["scaler_mean"]]),
                  np.array([float(x) for x in meta["scaler_std"]]))


def _snapshot(params: Params) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def train(mcfg: ModelConfig, tcfg: TrainConfig, data: Dataset | np.ndarray | Prepared,
          log: Callable[[str], None] | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainRun:
    """Train from a seed-derived initialization; keeps the best-validation weights.

    The loss is MSE between the normalized-space forecast and the target
    normalized with the lookback statistics of each window.
    """
    prep = data if isinstance(data, Prepared) else prepare(data, mcfg.L, mcfg.T, tcfg)
    if prep.values.shape[1] != mcfg.N:
        raise ConfigError(f"model expects N={mcfg.N} channels, data has {prep.values.shape[1]}")
    st = Streams(tcfg.seed)
    params = init_model(mcfg, st["init"])
    opt = OptState.for_params(params, lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2,
                              eps=tcfg.adam_eps)
    history: list[EpochRecord] = []
    best = (math.inf, 0, _snapshot(params))
    initial = math.nan
    for epoch in range(1, tcfg.epochs + 1):
        t0 = time.perf_counter()
        opt.lr = tcfg.lr_at(epoch)
        order = st["shuffle"].permutation(len(prep.train))
        losses = []
        for b in prep.train.batches(tcfg.batch_size, order):
            for p in params.values():
                p.grad = None
            try:
                out, stats = model_forward(b.X, params, mcfg, training=True, rng=st["dropout"])
                loss = ad.mse_loss(out, (b.Y - stats.mean) / stats.std)
                loss.backward()
            except ad.NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch}: non-finite value during training ({exc})") from None
            lv = loss.item()
            if not math.isfinite(lv):
                raise DivergenceError(f"epoch {epoch}: loss became {lv}")
            if math.isnan(initial):
                initial = lv
            grads = collect_grads(params)
            clip_grads(grads, tcfg.clip_norm)
            adam_step(params, grads, opt)
            losses.append(lv)
        train_loss = math.fsum(losses) / len(losses)
        vm = evaluate(params, mcfg, prep.val, max(64, tcfg.batch_size), prep.scaler,
                      tcfg.metric_space)
        rec = EpochRecord(epoch, train_loss, vm.mse, vm.mae, time.perf_counter() - t0)
        history.append(rec)
        if vm.mse < best[0]:
            best = (vm.mse, epoch, _snapshot(params))
        if log:
            log(f"epoch {epoch:3d}  lr {opt.lr:.2e}  train {train_loss:.5f}  "
                f"val mse {vm.mse:.5f} mae {vm.mae:.5f}  {rec.seconds:.1f}s")
        if on_epoch:
            on_epoch(rec)
    for k, arr in best[2].items():
        # round to the stored precision so a reloaded checkpoint scores identically
        params[k].data = arr.astype("<f4").astype(np.float64)
    return TrainRun(mcfg, tcfg, history, best[1], params, prep.scaler, initial)


def load_run(path) -> tuple[Params, ModelConfig, dict]:
    params, cfg, meta = load_checkpoint(path)
    return params, ModelConfig.from_dict(cfg), meta


# ---------------------------------------------------------------- comparison helpers


def baseline_metrics(prep: Prepared, T: int, which: str = "test", batch_size: int = 64,
                     space: str = "standardized") -> Metrics:
    ws = getattr(prep, which)
    return evaluate_predictor(repeat_last_predictor(T), ws, batch_size, prep.scaler, space)


def linear_config(mcfg: ModelConfig) -> ModelConfig:
    """The single-linear baseline for the same L, T, N."""
    from dataclasses import replace
    return replace(mcfg, kind="linear")


def horizons_rows(results: Sequence[tuple[int, Metrics]]) -> str:
    lines = ["horizon,mse,mae,windows"]
    lines += [f"{T},{m.mse!r},{m.mae!r},{m.count}" for T, m in results]
    return "\n".join(lines) + "\n"
