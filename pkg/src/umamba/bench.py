"""Forward-pass scaling in the lookback length, against a quadratic reference.

Memory is the tracemalloc peak of Python-side allocations (numpy buffers
included) during one forward call, so it is comparable across L on one
machine but is not a resident-set number.
"""

from __future__ import annotations

import math
import statistics
import time
import tracemalloc
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .mamba import MambaBlockConfig, init_mamba, mamba_forward
from .model import ModelConfig, forecast, init_model
from .rng import Streams

RESOLUTION_WARN = 1e-3


@dataclass(frozen=True)
class ScalingRow:
    L: int
    seconds: float
    peak_bytes: int
    reference_seconds: float
    reference_bytes: int
    block_seconds: float


@dataclass(frozen=True)
class ScalingReport:
    rows: tuple[ScalingRow, ...]
    exponent: float
    reference_exponent: float
    block_exponent: float
    repeats: int

    @property
    def memory_ratio(self) -> float:
        return self.rows[-1].peak_bytes / max(1, self.rows[0].peak_bytes)

    def to_csv(self) -> str:
        lines = ["L,seconds,peak_bytes,reference_seconds,reference_bytes,block_seconds"]
        for r in self.rows:
            lines.append(f"{r.L},{r.seconds!r},{r.peak_bytes},{r.reference_seconds!r},"
                         f"{r.reference_bytes},{r.block_seconds!r}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        return (f"exponent {self.exponent:.3f}  reference {self.reference_exponent:.3f}  "
                f"block {self.block_exponent:.3f}  memory ratio {self.memory_ratio:.2f}")


def fit_exponent(Ls: Sequence[int], seconds: Sequence[float]) -> float:
    """Least-squares slope of log(seconds) against log(L)."""
    slope, _ = np.polyfit(np.log(np.asarray(Ls, float)), np.log(np.asarray(seconds, float)), 1)
    return float(slope)


def median_time(fn: Callable[[], object], repeats: int) -> float:
    fn()  # warm-up: numba compilation and allocator
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def peak_bytes(fn: Callable[[], object]) -> int:
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        fn()
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def attention_reference(X: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray) -> np.ndarray:
    """Plain softmax self-attention over the L time steps of every channel.

    ``X`` is ``(N, L)``; each scalar step is lifted to width ``d`` by the
    projections, and the full ``(N, L, L)`` score matrix is materialized.
    """
    x = X[..., None]
    q, k, v = x * wq, x * wk, x * wv  # (N, L, d)
    s = q @ np.swapaxes(k, -1, -2) / math.sqrt(wq.shape[-1])
    s = np.exp(s - s.max(axis=-1, keepdims=True))
    s /= s.sum(axis=-1, keepdims=True)
    return (s @ v).sum(axis=-1)


def bench_scaling(Ls: Sequence[int] = (128, 256, 512, 1024), cfg: ModelConfig | None = None,
                  repeats: int = 5, seed: int = 0, ref_width: int = 16,
                  block_width: int | None = None) -> ScalingReport:
    Ls = [int(L) for L in Ls]
    if len(Ls) < 3 or any(a >= b for a, b in zip(Ls, Ls[1:])):
        raise ConfigError("need at least 3 strictly increasing lengths")
    if Ls[-1] < 8 * Ls[0]:
        raise ConfigError("lengths must span at least a factor of 8")
    if repeats < 5:
        raise ConfigError("timings are medians of at least 5 repeats")
    base = cfg or ModelConfig()
    st = Streams(seed)
    rows = []
    d = ref_width
    wq, wk, wv = (st["init"].normal(size=d) for _ in range(3))
    bcfg = MambaBlockConfig(d_model=block_width or base.N, expand=base.expand,
                            d_state=base.d_state, conv_width=base.conv_width)
    bparams = init_mamba(bcfg, st["init"])
    for L in Ls:
        mcfg = replace(base, L=L)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            params = init_model(mcfg, st["init"])
        X = st["data"].normal(size=(mcfg.N, L))
        xb = ad.Tensor(st["data"].normal(size=(L, bcfg.d_model)))

        def run():
            return forecast(X, params, mcfg)

        def ref():
            return attention_reference(X, wq, wk, wv)

        def blk():
            return mamba_forward(xb, bparams, bcfg)

        t = median_time(run, repeats)
        tr = median_time(ref, repeats)
        tb = median_time(blk, repeats)
        for label, val in (("forecast", t), ("reference", tr)):
            if val < RESOLUTION_WARN:
                warnings.warn(f"{label} median {val * 1e3:.3f} ms at L={L} is near timer resolution",
                              stacklevel=2)
        rows.append(ScalingRow(L, t, peak_bytes(run), tr, peak_bytes(ref), tb))
    return ScalingReport(tuple(rows), fit_exponent(Ls, [r.seconds for r in rows]),
                         fit_exponent(Ls, [r.reference_seconds for r in rows]),
                         fit_exponent(Ls, [r.block_seconds for r in rows]), repeats)
