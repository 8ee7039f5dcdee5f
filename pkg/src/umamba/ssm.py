"""Diagonal state-space recurrence: discretization and selective scan.

Array layout used throughout (leading axes are batch axes):

* ``x``      ``(..., S, D)``      input sequence, D inner channels
* ``A``      ``(D, N)``           continuous-time diagonal state matrix, N states
* ``delta``  ``(..., S, D)``      step sizes
* ``B, C``   ``(..., S, N)``      input / output maps, one per step
* ``Abar``   ``(..., S, D, N)``   discrete transition
* ``Bbar``   ``(..., S, D, N)``   discrete input map

Static (non-selective) parameters may drop the time axis and rely on numpy
broadcasting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .autodiff import ShapeError, Tensor, _record, _unbroadcast, linear, softplus

PHI_SERIES_BELOW = 1e-8
PHI_PRIME_SERIES_BELOW = 1e-3
MAX_STATE = 16


@dataclass
class SSMParams:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.A) >= 0):
            raise ValueError("state matrix entries must be strictly negative")
        if np.any(np.asarray(self.delta) <= 0):
            raise ValueError("step sizes must be strictly positive")
        if np.shape(self.A)[-1] > MAX_STATE:
            raise ValueError(f"state size {np.shape(self.A)[-1]} exceeds {MAX_STATE}")


@dataclass
class DiscreteSSM:
    Abar: Tensor
    Bbar: Tensor


def _phi(z: np.ndarray) -> np.ndarray:
    """expm1(z) / z with the z -> 0 limit of 1."""
    small = np.abs(z) < PHI_SERIES_BELOW
    if not small.any():
        return np.expm1(z) / z
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0, np.expm1(safe) / safe)


def _phi_prime(z: np.ndarray, phi: np.ndarray, ez: np.ndarray) -> np.ndarray:
    """Derivative of expm1(z) / z, given phi(z) and exp(z)."""
    small = np.abs(z) < PHI_PRIME_SERIES_BELOW
    if not small.any():
        return (ez - phi) / z
    out = (ez - phi) / np.where(small, 1.0, z)
    zs = z[small]
    out[small] = 0.5 + zs * (1.0 / 3.0 + zs * (1.0 / 8.0 + zs / 30.0))
    return out


def discretize_arrays(A, B, delta, euler: bool = False):
    """Zero-order hold: Abar = exp(delta*A), Bbar = (delta*A)^-1 (Abar - I) delta*B."""
    A, B, delta = (np.asarray(v, dtype=np.float64) for v in (A, B, delta))
    scalar = A.ndim == B.ndim == delta.ndim == 0
    A, B, delta = np.atleast_2d(A), np.atleast_1d(B), np.atleast_1d(delta)
    if np.any(delta <= 0):
        raise ValueError("step sizes must be strictly positive")
    dA = delta[..., None] * A
    Abar = np.exp(dA)
    dB = delta[..., None] * B[..., None, :]
    Bbar = dB if euler else _phi(dA) * dB
    if scalar:
        return float(Abar.squeeze()), float(Bbar.squeeze())
    return Abar, Bbar


def discretize(A: Tensor, B: Tensor, delta: Tensor, euler: bool = False) -> DiscreteSSM:
    """Differentiable discretization; returns ``Abar`` and ``Bbar`` tensors."""
    if np.any(delta.data <= 0):
        raise ValueError("step sizes must be strictly positive")
    dA = delta.data[..., None] * A.data
    Abar_v = np.exp(dA)
    phi = np.ones_like(dA) if euler else _phi(dA)
    Bexp = B.data[..., None, :]
    dexp = delta.data[..., None]
    Bbar_v = phi * dexp * Bexp

    Abar = _record("discretize_A", Abar_v, (A, delta),
                   lambda g: (_unbroadcast(g * Abar_v * delta.data[..., None], A.shape),
                              _unbroadcast((g * Abar_v * A.data).sum(-1), delta.shape)))

    def rule_b(g):
        gB = _unbroadcast((g * phi * dexp).sum(-2), B.shape)
        g_delta = g * phi * Bexp
        if euler:
            return gB, _unbroadcast(g_delta.sum(-1), delta.shape), None
        g_dA = g * _phi_prime(dA, phi, Abar_v) * dexp * Bexp
        gA = _unbroadcast(g_dA * dexp, A.shape)
        g_delta = g_delta + g_dA * A.data
        return gB, _unbroadcast(g_delta.sum(-1), delta.shape), gA

    Bbar = _record("discretize_B", Bbar_v, (B, delta, A), rule_b)
    return DiscreteSSM(Abar, Bbar)


def selective_params(x: Tensor, w_delta_down: Tensor, w_delta_up: Tensor, b_delta: Tensor,
                     w_B: Tensor, w_C: Tensor):
    """Input-dependent (delta, B, C) for every step of ``x``.

    The delta pre-activation goes through a rank-r factorization
    ``x @ w_delta_down @ w_delta_up + b_delta``.
    """
    delta = softplus(linear(linear(x, w_delta_down), w_delta_up, b_delta))
    return delta, linear(x, w_B), linear(x, w_C)


# ---------------------------------------------------------------- scans


def _full(v: np.ndarray, shape) -> np.ndarray:
    return np.broadcast_to(v, shape)


def _scan_shapes(Abar, Bbar, C, x):
    lead = np.broadcast_shapes(Abar.shape, Bbar.shape, x.shape[:-1] + (x.shape[-1], 1))
    if len(lead) < 3:
        raise ShapeError(f"scan needs (..., S, D, N) operands, got {lead}")
    S, D, N = lead[-3:]
    if x.shape[-2:] != (S, D):
        raise ShapeError(f"scan input {x.shape} does not match state layout {lead}")
    np.broadcast_shapes(C.shape, lead[:-3] + (S, N))
    return lead


def scan_states_sequential(Abar: np.ndarray, bx: np.ndarray) -> np.ndarray:
    """h_t = Abar_t * h_{t-1} + bx_t with h_0 = 0, time on axis -3."""
    a = np.moveaxis(Abar, -3, 0)
    b = np.moveaxis(bx, -3, 0)
    H = np.empty(b.shape)
    h = np.zeros(b.shape[1:])
    for t in range(b.shape[0]):
        h = a[t] * h + b[t]
        H[t] = h
    return np.moveaxis(H, 0, -3)


def scan_states_blocked(Abar: np.ndarray, bx: np.ndarray, block: int) -> np.ndarray:
    """Same recurrence evaluated block by block.

    Inside a block of length b the states are ``local_t + P_t * h_carry`` where
    ``P_t`` is the running product of ``Abar`` and ``local_t`` is the zero-start
    state, built from an explicit b x b transfer matrix. Only the last state of
    each block is carried, so total work is O(S * b).
    """
    if block <= 0:
        raise ValueError(f"block must be positive, got {block}")
    a = np.moveaxis(Abar, -3, 0)
    b = np.moveaxis(bx, -3, 0)
    S = b.shape[0]
    rest = b.shape[1:]
    H = np.empty(b.shape)
    h = np.zeros(rest)
    for s0 in range(0, S, block):
        s1 = min(s0 + block, S)
        n = s1 - s0
        ab = a[s0:s1]
        expand = (n, n) + (1,) * len(rest)
        # transfer[t, r] = prod_{q=r+1..t} ab[q] for r <= t, zero above the diagonal
        strict = np.tril(np.ones((n, n), dtype=bool), k=-1).reshape(expand)
        transfer = np.cumprod(np.where(strict, ab[:, None], 1.0), axis=0)
        transfer = np.where(np.tril(np.ones((n, n), dtype=bool)).reshape(expand), transfer, 0.0)
        local = (transfer * b[s0:s1][None]).sum(axis=1) if n > 1 else b[s0:s1].copy()
        prefix = np.cumprod(ab, axis=0)
        H[s0:s1] = local + prefix * h
        h = H[s1 - 1]
    return np.moveaxis(H, 0, -3)


def _scan_op(op: str, Abar: Tensor, Bbar: Tensor, C: Tensor, x: Tensor, states) -> Tensor:
    lead = _scan_shapes(Abar.data, Bbar.data, C.data, x.data)
    A_f = _full(Abar.data, lead)
    B_f = _full(Bbar.data, lead)
    x_e = x.data[..., None]
    H = states(A_f, B_f * x_e)
    C_f = _full(C.data, lead[:-2] + (lead[-1],))
    y = np.einsum("...sdn,...sn->...sd", H, C_f)

    def rule(gy):
        gH_direct = gy[..., None] * C_f[..., None, :]
        # reverse recurrence: gh_t = direct_t + Abar_{t+1} * gh_{t+1}
        a = np.moveaxis(A_f, -3, 0)
        d = np.moveaxis(gH_direct, -3, 0)
        gH = np.empty(d.shape)
        acc = np.zeros(d.shape[1:])
        for t in range(d.shape[0] - 1, -1, -1):
            acc = d[t] + (a[t + 1] * acc if t + 1 < d.shape[0] else 0.0)
            gH[t] = acc
        gH = np.moveaxis(gH, 0, -3)
        H_prev = np.concatenate([np.zeros_like(H[..., :1, :, :]), H[..., :-1, :, :]], axis=-3)
        gA = _unbroadcast(gH * H_prev, Abar.shape)
        gB = _unbroadcast(gH * x_e, Bbar.shape)
        gC = _unbroadcast(np.einsum("...sd,...sdn->...sn", gy, H), C.shape)
        gx = _unbroadcast((gH * B_f).sum(-1), x.shape)
        return gA, gB, gC, gx

    return _record(op, y, (Abar, Bbar, C, x), rule)


def ssm_scan(disc: DiscreteSSM, C: Tensor, x: Tensor) -> Tensor:
    """y_t = C_t . h_t with h_t = Abar_t * h_{t-1} + Bbar_t * x_t, h_0 = 0."""
    return _scan_op("ssm_scan", disc.Abar, disc.Bbar, C, x, scan_states_sequential)


def ssm_scan_blocked(disc: DiscreteSSM, C: Tensor, x: Tensor, block: int) -> Tensor:
    if block <= 0:
        raise ValueError(f"block must be positive, got {block}")
    return _scan_op("ssm_scan_blocked", disc.Abar, disc.Bbar, C, x,
                    lambda a, b: scan_states_blocked(a, b, block))


# ---------------------------------------------------------------- fused kernel
#
# Discretization and scan in one pass, without materializing Abar/Bbar. Used on
# the training path; the composed discretize + ssm_scan route above is the
# reference it is tested against.


@njit(cache=True)
def _phi_scalar(z, ez):
    # (ez - 1) / z cancels badly near 0; switch to the Taylor series there
    if abs(z) < PHI_SERIES_BELOW:
        return 1.0
    if abs(z) < 1e-2:
        return 1.0 + z * (0.5 + z * (1.0 / 6.0 + z * (1.0 / 24.0 + z * (1.0 / 120.0 + z / 720.0))))
    return (ez - 1.0) / z


@njit(cache=True)
def _phi_prime_scalar(z, phi, ez):
    if abs(z) < PHI_PRIME_SERIES_BELOW:
        return 0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z / 30.0))
    return (ez - phi) / z


@njit(cache=True)
def _fused_forward(u, delta, A, B, C, EZ, euler):
    R, S, D = u.shape
    N = A.shape[1]
    y = np.zeros((R, S, D))
    H = np.empty((R, S, D, N))
    h = np.empty((D, N))
    for r in range(R):
        h[:] = 0.0
        for t in range(S):
            for d in range(D):
                dt = delta[r, t, d]
                xt = dt * u[r, t, d]
                acc = 0.0
                for n in range(N):
                    ez = EZ[r, t, d, n]
                    phi = 1.0 if euler else _phi_scalar(dt * A[d, n], ez)
                    hn = ez * h[d, n] + phi * B[r, t, n] * xt
                    h[d, n] = hn
                    H[r, t, d, n] = hn
                    acc += C[r, t, n] * hn
                y[r, t, d] = acc
    return y, H


@njit(cache=True)
def _fused_backward(gy, u, delta, A, B, C, H, EZ, euler):
    R, S, D = u.shape
    N = A.shape[1]
    gu = np.zeros((R, S, D))
    gdelta = np.zeros((R, S, D))
    gA = np.zeros((D, N))
    gB = np.zeros((R, S, N))
    gC = np.zeros((R, S, N))
    carry = np.empty((D, N))
    for r in range(R):
        carry[:] = 0.0
        for t in range(S - 1, -1, -1):
            for d in range(D):
                g = gy[r, t, d]
                dt = delta[r, t, d]
                xt = u[r, t, d]
                gu_acc = 0.0
                gd_acc = 0.0
                for n in range(N):
                    a_dn = A[d, n]
                    gC[r, t, n] += g * H[r, t, d, n]
                    acc = g * C[r, t, n] + carry[d, n]
                    ez = EZ[r, t, d, n]
                    z = dt * a_dn
                    phi = 1.0 if euler else _phi_scalar(z, ez)
                    bn = B[r, t, n]
                    h_prev = H[r, t - 1, d, n] if t > 0 else 0.0
                    g_bbar = acc * xt
                    gu_acc += acc * phi * dt * bn
                    dphi = 0.0 if euler else _phi_prime_scalar(z, phi, ez)
                    gz = acc * h_prev * ez + g_bbar * dphi * dt * bn
                    gd_acc += gz * a_dn + g_bbar * phi * bn
                    gA[d, n] += gz * dt
                    gB[r, t, n] += g_bbar * phi * dt
                    carry[d, n] = ez * acc
                gu[r, t, d] = gu_acc
                gdelta[r, t, d] = gd_acc
    return gu, gdelta, gA, gB, gC


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor,
                   euler: bool = False) -> Tensor:
    """Fused discretize + scan: y_t = C_t . h_t, h_t = exp(delta_t A) h_{t-1} + Bbar_t u_t.

    ``u`` and ``delta`` are ``(..., S, D)``; ``B`` and ``C`` are ``(..., S, N)``
    or broadcastable to it.
    """
    lead, (S, D) = u.shape[:-2], u.shape[-2:]
    N = A.shape[-1]
    R = int(np.prod(lead)) if lead else 1
    if A.shape != (D, N):
        raise ShapeError(f"state matrix {A.shape} does not match inner width {D}")
    if np.any(delta.data <= 0):
        raise ValueError("step sizes must be strictly positive")

    def flat(v, last):
        return np.ascontiguousarray(np.broadcast_to(v, lead + (S, last))).reshape(R, S, last)

    uf, df = flat(u.data, D), flat(delta.data, D)
    Bf, Cf = flat(B.data, N), flat(C.data, N)
    Af = np.ascontiguousarray(A.data)
    EZ = np.exp(df[..., None] * Af)
    y, H = _fused_forward(uf, df, Af, Bf, Cf, EZ, euler)

    def rule(gy):
        gyf = np.ascontiguousarray(gy).reshape(R, S, D)
        gu, gd, gA, gB, gC = _fused_backward(gyf, uf, df, Af, Bf, Cf, H, EZ, euler)
        full = lead + (S,)
        return (_unbroadcast(gu.reshape(full + (D,)), u.shape),
                _unbroadcast(gd.reshape(full + (D,)), delta.shape),
                gA,
                _unbroadcast(gB.reshape(full + (N,)), B.shape),
                _unbroadcast(gC.reshape(full + (N,)), C.shape))

    return _record("selective_scan", y.reshape(lead + (S, D)), (u, delta, A, B, C), rule)
