"""Run configuration as flat ``key = value`` text with ``[section]`` headers.

Example::

    [run]
    dataset_path = data/ETTh1.csv
    dataset_name = ETTh1

    [model]
    scales = 256, 128, 64
    channel_mode = integration

    [train]
    epochs = 20
    seed = 2024

Keys left out take their defaults; a few defaults depend on the dataset
family (channel mode, batch size, scale dimensions) and are filled in from
the dataset name.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import MANIFEST, canonical_name, default_batch_size, default_channel_mode
from .errors import ConfigError
from .model import ModelConfig
from .train import TrainConfig

WIDE_SCALES = (512, 256)


@dataclass(frozen=True)
class RunSection:
    dataset_path: str = ""
    dataset_name: str = ""
    output_dir: str = "runs"
    horizons: tuple[int, ...] = ()


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    explicit: frozenset = field(default=frozenset(), compare=False)

    @property
    def seed(self) -> int:
        return self.train.seed


SECTIONS = {"run": RunSection, "model": ModelConfig, "train": TrainConfig}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text: str, typ, where: str):
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot read {text!r} as {typ.__name__}") from None


def _parse_value(text: str, typ, where: str):
    origin = typing.get_origin(typ)
    if origin is tuple:
        args = typing.get_args(typ)
        items = [t.strip() for t in text.split(",") if t.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse_scalar(t, args[0], where) for t in items)
        if len(items) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} comma-separated values, got {len(items)}")
        return tuple(_parse_scalar(t, a, where) for t, a in zip(items, args))
    return _parse_scalar(text, typ, where)


def serialize(cfg: RunConfig) -> str:
    out = []
    for name, cls in SECTIONS.items():
        obj = getattr(cfg, name)
        out.append(f"[{name}]")
        for f in dataclasses.fields(cls):
            out.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        out.append("")
    return "\n".join(out)


def parse(text: str, source: str = "<config>") -> RunConfig:
    values: dict[str, dict[str, object]] = {k: {} for k in SECTIONS}
    lines: dict[tuple[str, str], int] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        if section is None:
            raise ConfigError(f"{where}: key outside any section")
        key, _, val = (s.strip() for s in line.partition("="))
        cls = SECTIONS[section]
        hints = typing.get_type_hints(cls)
        if key not in hints or key == "explicit":
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        if key in values[section]:
            raise ConfigError(f"{where}: duplicate key {key!r} (first set on line {lines[section, key]})")
        values[section][key] = _parse_value(val, hints[key], f"{where}: key {key!r}")
        lines[section, key] = lineno
    return build(values, lines, source)


def build(values: dict[str, dict], lines: dict | None = None, source: str = "<config>") -> RunConfig:
    """Construct a RunConfig, filling dataset-family defaults for unset keys."""
    lines = lines or {}
    try:
        run = RunSection(**values.get("run", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: [run] {exc}") from None
    model_kw = dict(values.get("model", {}))
    train_kw = dict(values.get("train", {}))
    key = canonical_name(run.dataset_name) if run.dataset_name else None
    if key is not None:
        model_kw.setdefault("N", MANIFEST[key].channels)
        model_kw.setdefault("channel_mode", default_channel_mode(key))
        if MANIFEST[key].family == "wide":
            model_kw.setdefault("scales", WIDE_SCALES)
        train_kw.setdefault("batch_size", default_batch_size(key))
    out = {}
    for sec, cls, kw in (("model", ModelConfig, model_kw), ("train", TrainConfig, train_kw)):
        try:
            out[sec] = cls(**kw)
        except (ConfigError, ValueError, TypeError) as exc:
            bad = [k for k in kw if k in str(exc)]
            at = f" (line {lines[sec, bad[0]]})" if bad and (sec, bad[0]) in lines else ""
            raise ConfigError(f"{source}: [{sec}]{at} {exc}") from None
    explicit = frozenset(f"{s}.{k}" for s, d in values.items() for k in d)
    return RunConfig(run, out["model"], out["train"], explicit)


def load(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse(path.read_text(), str(path))


def with_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides (from the command line)."""
    values: dict[str, dict] = {k: {} for k in SECTIONS}
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(SECTIONS[sec]):
            if f"{sec}.{f.name}" in cfg.explicit:
                values[sec][f.name] = getattr(obj, f.name)
    for item in overrides:
        name, sep, val = item.partition("=")
        sec, dot, key = name.strip().partition(".")
        if not sep or not dot or sec not in SECTIONS:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        hints = typing.get_type_hints(SECTIONS[sec])
        if key not in hints or key == "explicit":
            raise ConfigError(f"override {item!r}: unknown key {key!r} in [{sec}]")
        values[sec][key] = _parse_value(val.strip(), hints[key], f"override {key!r}")
    return build(values, None, "<overrides>")


def set_fields(cfg: RunConfig, **sections) -> RunConfig:
    """``set_fields(cfg, model={"K": 1})`` with the explicit-key set kept current."""
    new = cfg
    explicit = set(cfg.explicit)
    for sec, kw in sections.items():
        new = replace(new, **{sec: replace(getattr(new, sec), **kw)})
        explicit |= {f"{sec}.{k}" for k in kw}
    return replace(new, explicit=frozenset(explicit))
