"""CSV ingestion, chronological splits, sliding windows and error metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class ManifestEntry:
    channels: int
    rows: int
    frequency: str
    family: str  # "ett" or "wide": selects channel mode and batch size defaults


MANIFEST: dict[str, ManifestEntry] = {
    "Weather": ManifestEntry(21, 52696, "10min", "wide"),
    "Traffic": ManifestEntry(862, 17544, "1h", "wide"),
    "Electricity": ManifestEntry(321, 26304, "1h", "wide"),
    "ETTh1": ManifestEntry(7, 17420, "1h", "ett"),
    "ETTh2": ManifestEntry(7, 17420, "1h", "ett"),
    "ETTm1": ManifestEntry(7, 69680, "15min", "ett"),
    "ETTm2": ManifestEntry(7, 69680, "15min", "ett"),
}
ALIASES = {"ecl": "Electricity", "electricity": "Electricity", "weather": "Weather",
           "traffic": "Traffic"}

BATCH_DEFAULTS = {"ETTh1": 32, "ETTh2": 32, "ETTm1": 32, "ETTm2": 32, "Weather": 16,
                  "Electricity": 8, "Traffic": 8}


def canonical_name(name: str | None) -> str | None:
    if name is None:
        return None
    if name in MANIFEST:
        return name
    low = name.lower()
    if low in ALIASES:
        return ALIASES[low]
    for key in MANIFEST:
        if key.lower() == low:
            return key
    return None


def default_channel_mode(name: str | None) -> str:
    key = canonical_name(name)
    if key is None:
        return "integration"
    return "integration" if MANIFEST[key].family == "ett" else "parallel"


def default_batch_size(name: str | None) -> int:
    return BATCH_DEFAULTS.get(canonical_name(name) or "", 32)


@dataclass
class Dataset:
    name: str
    channels: list[str]
    values: np.ndarray  # (rows, N)
    frequency: str = ""
    timestamps: list[str] | None = None

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]


def _parse_time(text: str):
    try:
        return datetime.fromisoformat(text.strip())
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return None


def check_timestamps(stamps: Sequence[str]) -> None:
    """Strictly increasing where every stamp parses as a date or a number."""
    parsed = [_parse_time(s) for s in stamps]
    if any(p is None for p in parsed):
        return
    if len({type(p) for p in parsed}) > 1:
        return
    for i in range(1, len(parsed)):
        if not parsed[i] > parsed[i - 1]:
            raise DataError(f"timestamps not strictly increasing at row {i + 1}: "
                            f"{stamps[i - 1]!r} then {stamps[i]!r}")


def validate_manifest(name: str, rows: int, channels: int) -> None:
    key = canonical_name(name)
    if key is None:
        return
    entry = MANIFEST[key]
    if (rows, channels) != (entry.rows, entry.channels):
        raise DataError(f"{key}: expected {entry.rows} rows x {entry.channels} channels, "
                        f"found {rows} rows x {channels} channels")


def load_csv(path, declared_name: str | None = None) -> Dataset:
    """Read a header-first CSV whose first column is a date or index.

    Rows and columns in error messages are 1-based file coordinates.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 2:
            raise DataError(f"{path}: need a time column and at least one value column")
        stamps: list[str] = []
        rows: list[list[float]] = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(rec)} fields, header has {len(header)}")
            vals = []
            for col, cell in enumerate(rec[1:], start=2):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: non-numeric cell {cell!r} at row {lineno}, "
                                    f"column {col} ({header[col - 1]})") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: missing or non-finite value at row {lineno}, "
                                    f"column {col} ({header[col - 1]})")
                vals.append(v)
            stamps.append(rec[0])
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    values = np.asarray(rows, dtype=np.float64)
    name = canonical_name(declared_name) or declared_name or path.stem
    if declared_name is not None:
        validate_manifest(declared_name, *values.shape)
    check_timestamps(stamps)
    key = canonical_name(name)
    freq = MANIFEST[key].frequency if key else ""
    return Dataset(name, header[1:], values, freq, stamps)


def write_csv(path, dataset: Dataset) -> None:
    stamps = dataset.timestamps or [str(i) for i in range(dataset.rows)]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", *dataset.channels])
        for s, row in zip(stamps, dataset.values):
            w.writerow([s, *(repr(float(v)) for v in row)])


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class Segment:
    """Rows ``[start, stop)`` of ``source``; ``name`` is train/val/test."""

    name: str
    start: int
    stop: int
    source: np.ndarray = field(repr=False, compare=False)

    def __len__(self) -> int:
        return self.stop - self.start

    @property
    def values(self) -> np.ndarray:
        return self.source[self.start:self.stop]


def split_sizes(rows: int, ratios: Sequence[float] = (0.7, 0.2, 0.1)) -> tuple[int, int, int]:
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"split ratios must be three positive numbers, got {tuple(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)!r}")
    # exact decimal arithmetic: 0.7 * 90 must floor to 63, not 62
    fr = [Fraction(repr(float(r))) for r in ratios]
    n_train = math.floor(fr[0] * rows)
    n_val = math.floor(fr[1] * rows)
    return n_train, n_val, rows - n_train - n_val


def split(data: Dataset | np.ndarray, ratios: Sequence[float] = (0.7, 0.2, 0.1),
          min_len: int = 0) -> tuple[Segment, Segment, Segment]:
    values = data.values if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    n_train, n_val, n_test = split_sizes(values.shape[0], ratios)
    bounds = [0, n_train, n_train + n_val, values.shape[0]]
    segs = tuple(Segment(nm, bounds[i], bounds[i + 1], values)
                 for i, nm in enumerate(("train", "val", "test")))
    for s in segs:
        if len(s) < min_len:
            raise DataError(f"{s.name} segment has {len(s)} rows, needs at least {min_len} (L+T)")
    return segs  # type: ignore[return-value]


# ---------------------------------------------------------------- windows


@dataclass
class WindowBatch:
    X: np.ndarray  # (B, N, L)
    Y: np.ndarray  # (B, N, T)
    starts: np.ndarray  # absolute source row of each lookback start


@dataclass(frozen=True)
class WindowSet:
    """Ordered windows over a segment; X rows [s, s+L), Y rows [s+L, s+L+T)."""

    source: np.ndarray = field(repr=False, compare=False)
    starts: np.ndarray = field(compare=False)
    L: int = 0
    T: int = 0

    def __len__(self) -> int:
        return len(self.starts)

    def batch(self, idx: Sequence[int] | np.ndarray) -> WindowBatch:
        idx = np.asarray(idx, dtype=np.int64)
        s = self.starts[idx]
        rows = s[:, None] + np.arange(self.L + self.T)[None, :]
        block = self.source[rows]  # (B, L+T, N)
        block = np.swapaxes(block, 1, 2)
        return WindowBatch(block[:, :, :self.L].copy(), block[:, :, self.L:].copy(), s)

    def batches(self, batch_size: int, order: np.ndarray | None = None) -> Iterator[WindowBatch]:
        order = np.arange(len(self)) if order is None else order
        for i in range(0, len(order), batch_size):
            yield self.batch(order[i:i + batch_size])


def window_count(length: int, L: int, T: int, stride: int = 1) -> int:
    if stride < 1:
        raise ConfigError("stride must be positive")
    if length < L + T:
        return 0
    return (length - L - T) // stride + 1


def windows(segment: Segment | np.ndarray, L: int, T: int, stride: int = 1,
            border_lookback: bool = False) -> WindowSet:
    """With ``border_lookback`` the lookback may reach back into earlier rows,
    while every target row stays inside the segment."""
    if isinstance(segment, np.ndarray):
        segment = Segment("all", 0, segment.shape[0], segment)
    lo = max(segment.start - L, 0) if border_lookback else segment.start
    length = segment.stop - lo
    count = window_count(length, L, T, stride)
    if count == 0:
        raise DataError(f"{segment.name} segment of {length} rows is shorter than L+T={L + T}")
    starts = lo + stride * np.arange(count, dtype=np.int64)
    return WindowSet(segment.source, starts, L, T)


# ---------------------------------------------------------------- scaling


@dataclass(frozen=True)
class Scaler:
    """Per-channel z-score fitted on the training rows."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Scaler":
        std = values.std(axis=0)
        return cls(values.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    def channel_first(self) -> "Scaler":
        """Stats shaped to broadcast over ``(..., N, T)`` arrays."""
        return Scaler(self.mean[:, None], self.std[:, None])


# ---------------------------------------------------------------- metrics


def _pair(y, yhat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: truth {y.shape} vs prediction {yhat.shape}")
    return y, yhat


def mse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean((y - yhat) ** 2))


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def signed_me(y, yhat) -> float:
    # the error formula without the absolute value; debugging aid only
    y, yhat = _pair(y, yhat)
    return float(np.mean(y - yhat))


@dataclass(frozen=True)
class Metrics:
    mse: float
    mae: float
    count: int  # evaluated windows


class MetricAccumulator:
    """Exact-sum aggregation so results do not depend on batching order."""

    def __init__(self):
        self._sq: list[float] = []
        self._abs: list[float] = []
        self._elems = 0
        self.windows = 0

    def update(self, y, yhat) -> None:
        y, yhat = _pair(y, yhat)
        err = (y - yhat).reshape(y.shape[0], -1)
        self._sq.extend(math.fsum(r) for r in err ** 2)
        self._abs.extend(math.fsum(r) for r in np.abs(err))
        self._elems += err.size
        self.windows += y.shape[0]

    def result(self) -> Metrics:
        if self._elems == 0:
            raise DataError("no windows evaluated")
        return Metrics(math.fsum(self._sq) / self._elems, math.fsum(self._abs) / self._elems,
                       self.windows)


# ---------------------------------------------------------------- synthetic series


def synthetic_sine(rows: int = 2000, channels: int = 1, period: float = 24.0, noise: float = 0.0,
                   rng: np.random.Generator | None = None) -> Dataset:
    t = np.arange(rows, dtype=np.float64)[:, None]
    phase = np.arange(channels, dtype=np.float64)[None, :] * 0.7
    vals = np.sin(2 * np.pi * t / period + phase)
    if noise:
        vals = vals + noise * (rng or np.random.default_rng(0)).normal(size=vals.shape)
    return Dataset("sine", [f"c{i}" for i in range(channels)], vals, "",
                   [str(i) for i in range(rows)])


def synthetic_ett(rows: int = 17420, rng: np.random.Generator | None = None) -> Dataset:
    """Seven hourly channels with daily and weekly cycles, trend and AR noise.

    Only a stand-in with the ETT shape; it carries no claim about real loads.
    """
    rng = rng or np.random.default_rng(0)
    t = np.arange(rows, dtype=np.float64)
    cols = []
    for c in range(7):
        amp_d, amp_w = rng.uniform(0.5, 2.0), rng.uniform(0.2, 1.0)
        trend = rng.uniform(-1, 1) * t / rows
        eps = rng.normal(scale=0.3, size=rows)
        ar = np.zeros(rows)
        for i in range(1, rows):
            ar[i] = 0.9 * ar[i - 1] + eps[i]
        cols.append(amp_d * np.sin(2 * np.pi * t / 24 + c) + amp_w * np.sin(2 * np.pi * t / 168)
                    + trend + 0.3 * ar)
    vals = np.stack(cols, axis=1)
    vals[:, 6] = vals[:, :6].mean(axis=1) * 2 + 0.2 * rng.normal(size=rows)
    base = datetime(2016, 7, 1)
    stamps = [(base + timedelta(hours=i)).isoformat(sep=" ") for i in range(rows)]
    names = ["HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"]
    return Dataset("synthetic_ett", names, vals, "1h", stamps)
