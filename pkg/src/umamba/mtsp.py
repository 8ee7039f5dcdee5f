"""Temporal signal processor applied at every encoder scale.

Three paths are summed: residual Mamba layers scanning each channel along the
feature axis, one channel-adaptable Mamba block, and the untouched input.
Features are laid out ``(..., N, M)`` (channels, scale width).
"""

from __future__ import annotations

from dataclasses import replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .mamba import MambaBlockConfig, Params, init_mamba, mamba_forward

BlockFn = Callable[[Tensor], Tensor]


class ChannelMode(str, Enum):
    INDEPENDENCE = "independence"
    PARALLEL = "parallel"
    INTEGRATION = "integration"


def token_width(mode: ChannelMode | str, n_channels: int, width: int) -> int:
    mode = ChannelMode(mode)
    if mode is ChannelMode.INDEPENDENCE:
        return 1
    return width if mode is ChannelMode.PARALLEL else n_channels


def channel_transform(X: Tensor, mode: ChannelMode | str) -> Tensor:
    """Lay ``(..., N, M)`` features out as a token sequence for one Mamba block.

    independence: N sequences of length M, width 1 -> ``(..., N, M, 1)``
    parallel:     one sequence of N variable tokens -> ``(..., N, M)``
    integration:  one sequence of M position tokens -> ``(..., M, N)``
    """
    mode = ChannelMode(mode)
    if mode is ChannelMode.INDEPENDENCE:
        return ad.reshape(X, X.shape + (1,))
    if mode is ChannelMode.PARALLEL:
        return X
    return ad.swap_last(X)


def inverse_channel_transform(T: Tensor, mode: ChannelMode | str) -> Tensor:
    mode = ChannelMode(mode)
    if mode is ChannelMode.INDEPENDENCE:
        return ad.reshape(T, T.shape[:-1])
    if mode is ChannelMode.PARALLEL:
        return T
    return ad.swap_last(T)


def residual_mamba_layers(X: Tensor, blocks: Sequence[BlockFn], trace: list | None = None) -> Tensor:
    """r_0 = X; rml[k] = block_k(r_{k-1}); r_k = rml[k] - r_{k-1}; returns rml[K]."""
    if len(blocks) < 1:
        raise ValueError("residual Mamba layers need K >= 1 blocks")
    r = X
    rml = X
    for block in blocks:
        rml = block(r)
        r = ad.sub(rml, r)
        if trace is not None:
            trace.append((rml, r))
    return rml


def channel_adaptable(X: Tensor, mode: ChannelMode | str, block: BlockFn) -> Tensor:
    return inverse_channel_transform(block(channel_transform(X, mode)), mode)


def mtsp_forward(X: Tensor, rml_blocks: Sequence[BlockFn], cam_block: BlockFn | None,
                 mode: ChannelMode | str, skip_path: str = "input") -> Tensor:
    """Sum of the residual-layer path, the channel-adaptable path and a skip path.

    ``skip_path="residual"`` adds the final residual r_K instead of the input.
    Either Mamba path may be switched off by passing no blocks / ``None``.
    """
    if skip_path not in ("input", "residual"):
        raise ValueError(f"skip_path must be 'input' or 'residual', got {skip_path!r}")
    out = X
    if rml_blocks:
        trace: list = []
        rml = residual_mamba_layers(X, rml_blocks, trace)
        out = ad.add(rml, trace[-1][1] if skip_path == "residual" else X)
    if cam_block is not None:
        out = ad.add(out, channel_adaptable(X, mode, cam_block))
    return out


# ---------------------------------------------------------------- parameterized


def rml_block_config(base: MambaBlockConfig) -> MambaBlockConfig:
    return replace(base, d_model=1)


def cam_block_config(base: MambaBlockConfig, mode: ChannelMode | str, n_channels: int,
                     width: int) -> MambaBlockConfig:
    return replace(base, d_model=token_width(mode, n_channels, width))


def init_mtsp(base: MambaBlockConfig, mode: ChannelMode | str, n_channels: int, width: int,
              K: int, rng: np.random.Generator, prefix: str = "", use_rml: bool = True,
              use_cam: bool = True, share_rml: bool = False) -> Params:
    params: Params = {}
    if use_rml:
        if K < 1:
            raise ValueError("K must be at least 1")
        for k in range(1 if share_rml else K):
            params |= init_mamba(rml_block_config(base), rng, f"{prefix}rml.{k}.")
    if use_cam:
        params |= init_mamba(cam_block_config(base, mode, n_channels, width), rng, f"{prefix}cam.")
    return params


def _per_channel(fn: BlockFn) -> BlockFn:
    # scan along M with every channel as its own width-1 sequence
    def run(X: Tensor) -> Tensor:
        return ad.reshape(fn(ad.reshape(X, X.shape + (1,))), X.shape)
    return run


def mtsp_apply(X: Tensor, params: Params, base: MambaBlockConfig, mode: ChannelMode | str,
               K: int, prefix: str = "", use_rml: bool = True, use_cam: bool = True,
               share_rml: bool = False, skip_path: str = "input") -> Tensor:
    n_channels, width = X.shape[-2:]
    rcfg = rml_block_config(base)
    rml_blocks = []
    if use_rml:
        for k in range(K):
            pre = f"{prefix}rml.{0 if share_rml else k}."
            rml_blocks.append(_per_channel(lambda t, pre=pre: mamba_forward(t, params, rcfg, pre)))
    cam = None
    if use_cam:
        ccfg = cam_block_config(base, mode, n_channels, width)
        if params[f"{prefix}cam.in_proj"].shape[0] != ccfg.d_model:
            raise ConfigError(f"channel mode {ChannelMode(mode).value} needs token width "
                             f"{ccfg.d_model}, parameters have {params[f'{prefix}cam.in_proj'].shape[0]}")
        cam = lambda t: mamba_forward(t, params, ccfg, f"{prefix}cam.")  # noqa: E731
    return mtsp_forward(X, rml_blocks, cam, mode, skip_path)
