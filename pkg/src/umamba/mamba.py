"""Gated selective-SSM block.

Branch one: in-projection, depthwise causal convolution, SiLU, selective
scan. Branch two: in-projection, SiLU gate. The gated product goes through an
out-projection. Tokens are laid out ``(..., S, d_model)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ssm import (MAX_STATE, discretize, selective_params, selective_scan, ssm_scan,
                  ssm_scan_blocked)

Params = dict[str, Tensor]


@dataclass(frozen=True)
class MambaBlockConfig:
    d_model: int
    expand: int = 2
    d_state: int = 16
    conv_width: int = 4
    dt_rank: int = 0  # 0 picks ceil(d_model / 16)
    selective: bool = True
    skip_D: bool = True
    out_bias: bool = True
    euler: bool = False
    scan: str = "fused"  # fused | sequential | blocked
    scan_block: int = 64

    def __post_init__(self):
        if self.d_model < 1 or self.expand < 1:
            raise ValueError("d_model and expand must be positive")
        if not 1 <= self.d_state <= MAX_STATE:
            raise ValueError(f"d_state must lie in [1, {MAX_STATE}], got {self.d_state}")
        if self.conv_width < 1:
            raise ValueError("conv_width must be at least 1")
        if self.scan not in ("fused", "sequential", "blocked"):
            raise ValueError(f"unknown scan implementation {self.scan!r}")
        if self.scan_block < 1:
            raise ValueError("scan_block must be positive")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def rank(self) -> int:
        return self.dt_rank or math.ceil(self.d_model / 16)


def param_shapes(cfg: MambaBlockConfig) -> dict[str, tuple[int, ...]]:
    di, ds = cfg.d_inner, cfg.d_state
    shapes = {
        "in_proj": (cfg.d_model, 2 * di),
        "conv_w": (di, cfg.conv_width),
        "conv_b": (di,),
    }
    if cfg.selective:
        shapes |= {
            "dt_down": (di, cfg.rank),
            "dt_up": (cfg.rank, di),
            "dt_bias": (di,),
            "w_B": (di, ds),
            "w_C": (di, ds),
        }
    else:
        shapes |= {"dt_bias": (di,), "B": (ds,), "C": (ds,)}
    shapes["A_log"] = (di, ds)
    if cfg.skip_D:
        shapes["D"] = (di,)
    shapes["out_proj"] = (di, cfg.d_model)
    if cfg.out_bias:
        shapes["out_b"] = (cfg.d_model,)
    return shapes


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def init_mamba(cfg: MambaBlockConfig, rng: np.random.Generator, prefix: str = "") -> Params:
    di, ds = cfg.d_inner, cfg.d_state
    out: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name == "conv_w":
            out[name] = _uniform(rng, shape, cfg.conv_width)
        elif name in ("conv_b", "out_b"):
            out[name] = np.zeros(shape)
        elif name == "dt_bias":
            dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=shape))
            out[name] = inverse_softplus(dt)
        elif name == "dt_up":
            out[name] = _uniform(rng, shape, cfg.rank)
        elif name == "A_log":
            out[name] = np.log(np.tile(np.arange(1, ds + 1, dtype=float), (di, 1)))
        elif name == "D":
            out[name] = np.ones(shape)
        elif name in ("B", "C"):
            out[name] = rng.normal(size=shape) / math.sqrt(ds)
        else:
            out[name] = _uniform(rng, shape, shape[0])
    return {prefix + k: Tensor(v, requires_grad=True, name=prefix + k) for k, v in out.items()}


def mamba_forward(x: Tensor, params: Params, cfg: MambaBlockConfig, prefix: str = "") -> Tensor:
    def p(name):
        return params[prefix + name]

    if x.shape[-1] != cfg.d_model:
        raise ad.ShapeError(f"block expects width {cfg.d_model}, got input {x.shape}")
    di = cfg.d_inner
    u, z = ad.split_last(ad.matmul(x, p("in_proj")), [di, di])
    u = ad.swap_last(ad.causal_conv1d(ad.swap_last(u), p("conv_w"), p("conv_b")))
    u = ad.silu(u)
    if cfg.selective:
        delta, B, C = selective_params(u, p("dt_down"), p("dt_up"), p("dt_bias"), p("w_B"), p("w_C"))
    else:
        delta = ad.softplus(p("dt_bias"))
        B, C = p("B"), p("C")
    A = ad.mul(ad.exp(p("A_log")), -1.0)
    if cfg.scan == "fused":
        y = selective_scan(u, delta, A, B, C, euler=cfg.euler)
    else:
        if not cfg.selective:
            delta = ad.mul(delta, np.ones(u.shape))
        disc = discretize(A, B, delta, euler=cfg.euler)
        if cfg.scan == "blocked":
            y = ssm_scan_blocked(disc, C, u, cfg.scan_block)
        else:
            y = ssm_scan(disc, C, u)
    if cfg.skip_D:
        y = ad.add(y, ad.mul(u, p("D")))
    y = ad.mul(y, ad.silu(z))
    return ad.linear(y, p("out_proj"), p("out_b") if cfg.out_bias else None)
