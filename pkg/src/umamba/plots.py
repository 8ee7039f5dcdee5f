"""Tidy CSV bundles for external plotting; nothing is rendered here."""

from __future__ import annotations

import csv
from pathlib import Path

from .errors import DataError

BUNDLES = ("overlay", "scaling", "lookback", "fraction")

# artifact each bundle is built from, relative to the run directory
SOURCES = {
    "overlay": "forecast_T*.csv",
    "scaling": "scaling.csv",
    "lookback": "lookback_sweep.csv",
    "fraction": "fraction_sweep.csv",
}


def _rows(path: Path) -> list[dict[str, str]]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def _write(path: Path, header: list[str], rows) -> int:
    n = 0
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(r)
            n += 1
    return n


def overlay_bundle(forecast_csv: Path, out: Path, window: int | None = None) -> int:
    """One forecast window: T rows per channel of (horizon, window, channel, step, truth, prediction)."""
    rows = _rows(forecast_csv)
    if not rows:
        raise DataError(f"{forecast_csv} holds no forecasts")
    pick = str(window if window is not None else rows[0]["window"])
    T = forecast_csv.stem.split("_T")[-1]
    sel = [(T, r["window"], r["channel"], r["step"], r["truth"], r["prediction"])
           for r in rows if r["window"] == pick]
    if not sel:
        raise DataError(f"window {pick} not present in {forecast_csv}")
    return _write(out, ["horizon", "window", "channel", "step", "truth", "prediction"], sel)


def scaling_bundle(scaling_csv: Path, out: Path) -> int:
    rows = _rows(scaling_csv)
    tidy = []
    for r in rows:
        tidy.append(("umamba", r["L"], r["seconds"], r["peak_bytes"]))
        tidy.append(("attention_reference", r["L"], r["reference_seconds"], r["reference_bytes"]))
    return _write(out, ["model", "L", "seconds", "bytes"], tidy)


def sweep_bundle(sweep_csv: Path, out: Path, key: str) -> int:
    rows = _rows(sweep_csv)
    return _write(out, ["model", key, "mse", "mae"],
                  ((r["model"], r[key], r["mse"], r["mae"]) for r in rows))


def emit_plot_data(run_dir, out_dir=None, bundles=None, window: int | None = None) -> dict[str, Path]:
    """Write ``plot_<bundle>.csv`` for each requested bundle.

    With ``bundles=None`` every bundle whose source artifact exists is
    written; naming a bundle whose artifact is absent is an error.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise DataError(f"run directory not found: {run_dir}")
    out_dir = Path(out_dir) if out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    requested = list(bundles) if bundles else list(BUNDLES)
    for b in requested:
        if b not in BUNDLES:
            raise DataError(f"unknown plot bundle {b!r}; choose from {BUNDLES}")
    written: dict[str, Path] = {}
    for b in requested:
        matches = sorted(run_dir.glob(SOURCES[b]))
        if not matches:
            if bundles:
                raise DataError(f"bundle {b!r} needs artifact {SOURCES[b]} in {run_dir}")
            continue
        target = out_dir / f"plot_{b}.csv"
        if b == "overlay":
            overlay_bundle(matches[0], target, window)
        elif b == "scaling":
            scaling_bundle(matches[0], target)
        elif b == "lookback":
            sweep_bundle(matches[0], target, "L")
        else:
            sweep_bundle(matches[0], target, "fraction")
        written[b] = target
    if not written:
        raise DataError(f"no plottable artifacts in {run_dir} (looked for "
                        + ", ".join(SOURCES.values()) + ")")
    return written
