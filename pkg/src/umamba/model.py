"""U-shaped multi-scale forecaster.

Pipeline: instance normalization -> shared linear tokenizer (L -> M1) ->
encoder of down-projecting linears with a temporal signal processor on every
scale -> decoder of up-projecting linears fed by skip concatenations, whose
last map lands on the horizon T -> instance denormalization.

All tensors are ``(..., N, width)``: channels first, time/feature last.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError
from .mamba import MambaBlockConfig, Params
from .mtsp import ChannelMode, init_mtsp, mtsp_apply

REVIN_EPS = 1e-5
KINDS = ("umamba", "linear")


@dataclass(frozen=True)
class ModelConfig:
    L: int = 96
    T: int = 96
    N: int = 7
    scales: tuple[int, ...] = (256, 128, 64)
    K: int = 3
    channel_mode: str = "integration"
    dropout: float = 0.1
    expand: int = 2
    d_state: int = 16
    conv_width: int = 4
    kind: str = "umamba"
    use_rml: bool = True
    use_cam: bool = True
    skip_path: str = "input"
    extra_projection: bool = False
    per_channel_tokenizer: bool = False
    share_rml_weights: bool = False
    euler_discretization: bool = False
    mamba_skip: bool = True
    out_bias: bool = True
    revin_affine: bool = False
    scan: str = "fused"

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(m) for m in self.scales))
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if min(self.L, self.T, self.N) < 1:
            raise ConfigError("L, T and N must be positive")
        if self.L < 2:
            raise ConfigError("lookback L must be at least 2")
        M = self.scales
        if not M:
            raise ConfigError("scales: at least one dimension is required")
        if any(a <= b for a, b in zip(M, M[1:])):
            raise ConfigError(f"scales must strictly decrease, got {list(M)}")
        if M[-1] < 4:
            raise ConfigError(f"scales: smallest dimension must be >= 4, got {M[-1]}")
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        try:
            ChannelMode(self.channel_mode)
        except ValueError:
            raise ConfigError(f"unknown channel mode {self.channel_mode!r}") from None
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.skip_path not in ("input", "residual"):
            raise ConfigError(f"skip_path must be 'input' or 'residual', got {self.skip_path!r}")
        try:
            self.mamba
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def n(self) -> int:
        return len(self.scales)

    @property
    def mamba(self) -> MambaBlockConfig:
        return MambaBlockConfig(d_model=1, expand=self.expand, d_state=self.d_state,
                                conv_width=self.conv_width, skip_D=self.mamba_skip,
                                out_bias=self.out_bias, euler=self.euler_discretization,
                                scan=self.scan)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    eps: float = REVIN_EPS


@dataclass
class ScaleFeatures:
    encoder: list[Tensor] = field(default_factory=list)
    skips: list[Tensor] = field(default_factory=list)
    decoder: list[Tensor] = field(default_factory=list)


# ---------------------------------------------------------------- normalization


def revin_norm(X: np.ndarray, eps: float = REVIN_EPS) -> tuple[np.ndarray, NormStats]:
    """Per-window, per-channel z-score over the last axis (population std)."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] < 2:
        raise ConfigError("instance normalization needs at least 2 time steps")
    mean = X.mean(axis=-1, keepdims=True)
    std = np.maximum(X.std(axis=-1, keepdims=True), eps)
    return (X - mean) / std, NormStats(mean, std, eps)


def revin_denorm(Y, stats: NormStats):
    """Inverse of :func:`revin_norm`; accepts arrays or tensors."""
    if isinstance(Y, Tensor):
        if Y.shape[:-1] != stats.mean.shape[:-1]:
            raise ad.ShapeError(f"stats {stats.mean.shape} do not match forecast {Y.shape}")
        return ad.add(ad.mul(Y, stats.std), stats.mean)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.shape[:-1] != stats.mean.shape[:-1]:
        raise ad.ShapeError(f"stats {stats.mean.shape} do not match forecast {Y.shape}")
    return Y * stats.std + stats.mean


# ---------------------------------------------------------------- parameters


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _linear_params(rng, prefix: str, fan_in: int, fan_out: int) -> Params:
    return {
        prefix + "w": Tensor(_uniform(rng, (fan_in, fan_out), fan_in), True, prefix + "w"),
        prefix + "b": Tensor(_uniform(rng, (fan_out,), fan_in), True, prefix + "b"),
    }


def decoder_extents(cfg: ModelConfig) -> list[tuple[int, int]]:
    """(fan_in, fan_out) of every decoder linear, bottom to top."""
    M = cfg.scales
    n = len(M)
    if n == 1:
        return [(2 * M[0], cfg.T)]
    out = [(M[n - 1], M[n - 2])]
    for j in range(1, n):
        width = M[n - j - 1]
        target = M[n - j - 2] if n - j - 2 >= 0 else cfg.T
        out.append((2 * width, target))
    return out


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    params: Params = {}
    if cfg.kind == "linear":
        params |= _linear_params(rng, "head.", cfg.L, cfg.T)
        return params
    M = cfg.scales
    if M[0] <= cfg.L:
        warnings.warn(f"first scale {M[0]} does not expand the lookback {cfg.L}", stacklevel=2)
    if cfg.per_channel_tokenizer:
        params["tok.w"] = Tensor(_uniform(rng, (cfg.N, cfg.L, M[0]), cfg.L), True, "tok.w")
        params["tok.b"] = Tensor(_uniform(rng, (cfg.N, M[0]), cfg.L), True, "tok.b")
    else:
        params |= _linear_params(rng, "tok.", cfg.L, M[0])
    for i in range(1, cfg.n):
        params |= _linear_params(rng, f"enc.{i}.", M[i - 1], M[i])
    for i in range(cfg.n):
        params |= init_mtsp(cfg.mamba, cfg.channel_mode, cfg.N, M[i], cfg.K, rng,
                            prefix=f"mtsp.{i}.", use_rml=cfg.use_rml, use_cam=cfg.use_cam,
                            share_rml=cfg.share_rml_weights)
    for j, (fi, fo) in enumerate(decoder_extents(cfg)):
        params |= _linear_params(rng, f"dec.{j}.", fi, fo)
    if cfg.extra_projection:
        params |= _linear_params(rng, "proj.", cfg.T, cfg.T)
    if cfg.revin_affine:
        params["revin.gamma"] = Tensor(np.ones((cfg.N, 1)), True, "revin.gamma")
        params["revin.beta"] = Tensor(np.zeros((cfg.N, 1)), True, "revin.beta")
    return params


def count_parameters(params: Params) -> int:
    return sum(p.size for p in params.values())


# ---------------------------------------------------------------- forward pieces


def _dense(x: Tensor, params: Params, prefix: str) -> Tensor:
    return ad.linear(x, params[prefix + "w"], params[prefix + "b"])


def tokenize(Xn, params: Params, cfg: ModelConfig) -> Tensor:
    Xn = ad.as_tensor(Xn)
    if cfg.per_channel_tokenizer:
        return ad.add(ad.einsum("...nl,nlm->...nm", Xn, params["tok.w"]), params["tok.b"])
    return _dense(Xn, params, "tok.")


def encode(tokens: Tensor, params: Params, cfg: ModelConfig, training: bool = False,
           rng: np.random.Generator | None = None) -> ScaleFeatures:
    feats = ScaleFeatures()
    X = ad.dropout(tokens, cfg.dropout, training, rng)
    for i in range(cfg.n):
        if i > 0:
            X = ad.dropout(_dense(X, params, f"enc.{i}."), cfg.dropout, training, rng)
        feats.encoder.append(X)
        feats.skips.append(mtsp_apply(X, params, cfg.mamba, cfg.channel_mode, cfg.K,
                                      prefix=f"mtsp.{i}.", use_rml=cfg.use_rml,
                                      use_cam=cfg.use_cam, share_rml=cfg.share_rml_weights,
                                      skip_path=cfg.skip_path))
    return feats


def decode(feats: ScaleFeatures, params: Params, cfg: ModelConfig) -> Tensor:
    n = cfg.n
    skips = feats.skips
    if n == 1:
        # single-scale wiring: the top encoder feature stands in for the decoder path
        out = _dense(ad.concat([feats.encoder[0], skips[0]], axis=-1), params, "dec.0.")
        feats.decoder.append(out)
        return out
    Xp = skips[n - 1]
    feats.decoder.append(Xp)
    Xp = _dense(Xp, params, "dec.0.")
    feats.decoder.append(Xp)
    for j in range(1, n):
        Xp = _dense(ad.concat([Xp, skips[n - j - 1]], axis=-1), params, f"dec.{j}.")
        feats.decoder.append(Xp)
    return Xp


def check_finite_input(X: np.ndarray) -> None:
    bad = ~np.isfinite(X)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"non-finite input at channel {idx[-2]}, position {idx[-1]}"
                        + (f" (batch item {idx[0]})" if len(idx) > 2 else ""))


def model_forward(X, params: Params, cfg: ModelConfig, training: bool = False,
                  rng: np.random.Generator | None = None) -> tuple[Tensor, NormStats]:
    """Forecast in normalized space; returns the prediction and the window stats."""
    X = np.asarray(X, dtype=np.float64)
    check_finite_input(X)
    if X.shape[-2:] != (cfg.N, cfg.L):
        raise ad.ShapeError(f"expected (..., {cfg.N}, {cfg.L}) input, got {X.shape}")
    Xn, stats = revin_norm(X)
    if cfg.revin_affine:
        Xn = ad.add(ad.mul(Xn, params["revin.gamma"]), params["revin.beta"])
    if cfg.kind == "linear":
        out = _dense(ad.as_tensor(Xn), params, "head.")
    else:
        out = decode(encode(tokenize(Xn, params, cfg), params, cfg, training, rng), params, cfg)
        if cfg.extra_projection:
            out = _dense(out, params, "proj.")
    if cfg.revin_affine:
        out = ad.div(ad.sub(out, params["revin.beta"]), ad.add(params["revin.gamma"], REVIN_EPS ** 2))
    return out, stats


def forecast(X, params: Params, cfg: ModelConfig, training: bool = False,
             rng: np.random.Generator | None = None) -> Tensor:
    out, stats = model_forward(X, params, cfg, training, rng)
    return revin_denorm(out, stats)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"UMTS"
FORMAT_VERSION = 1


def save_checkpoint(path, params: Params, cfg: ModelConfig | dict, extra: dict | None = None) -> bytes:
    """Write ``params`` as little-endian float32 behind a textual index.

    Layout: magic, uint32 version, uint32 header length, UTF-8 header, data.
    Header lines are ``config <json>``, optional ``meta <json>``, then
    ``param <name> <d1>x<d2>... <offset>`` with offsets in float32 units.
    """
    config = cfg.to_dict() if isinstance(cfg, ModelConfig) else cfg
    lines = ["config " + json.dumps(config, sort_keys=True)]
    if extra:
        lines.append("meta " + json.dumps(extra, sort_keys=True))
    offset = 0
    chunks = []
    for name, t in params.items():
        if " " in name:
            raise ValueError(f"parameter names may not contain spaces: {name!r}")
        shape = "x".join(str(s) for s in t.shape) or "scalar"
        lines.append(f"param {name} {shape} {offset}")
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        offset += t.size
    header = ("\n".join(lines) + "\n").encode()
    blob = MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    if path is not None:
        Path(path).write_bytes(blob)
    return blob


def load_checkpoint(source) -> tuple[Params, dict, dict]:
    """Returns (params, config dict, meta dict)."""
    blob = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    if blob[:4] != MAGIC:
        raise DataError("not a checkpoint: bad magic bytes")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    header = blob[12:12 + hlen].decode()
    data = np.frombuffer(blob[12 + hlen:], dtype="<f4")
    config: dict = {}
    meta: dict = {}
    params: Params = {}
    for line in header.splitlines():
        kind, _, rest = line.partition(" ")
        if kind == "config":
            config = json.loads(rest)
        elif kind == "meta":
            meta = json.loads(rest)
        elif kind == "param":
            name, shape_s, off = rest.split(" ")
            shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split("x"))
            size = int(np.prod(shape)) if shape else 1
            start = int(off)
            if start + size > data.size:
                raise DataError(f"checkpoint truncated inside parameter {name}")
            arr = data[start:start + size].astype(np.float64).reshape(shape)
            params[name] = Tensor(arr, True, name)
        else:
            raise DataError(f"unrecognized checkpoint header line: {line[:40]!r}")
    return params, config, meta
