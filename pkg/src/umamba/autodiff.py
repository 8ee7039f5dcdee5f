"""Small reverse-mode autodiff engine over numpy arrays.

Every differentiable operation returns a :class:`Tensor` carrying a ``Node``
that knows its inputs and a local gradient rule. ``backward`` collects the
nodes reachable from a scalar loss into a :class:`Tape`, ordered by creation
sequence, and replays it in reverse. Fan-in contributions are summed in tape
order, so gradients are bit-reproducible.

Broadcasting follows numpy's trailing-axis rules; gradients are reduced back
to the operand shape.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError

DTYPE = np.float64

_sequence = itertools.count()


class NonFiniteError(FloatingPointError):
    """A tensor would have held NaN or Inf."""


class ShapeError(ValueError):
    pass


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    seq: int = field(default_factory=lambda: next(_sequence))


class Tensor:
    """Dense float array, optionally participating in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, *, _node=None):
        arr = np.asarray(data, dtype=DTYPE)
        if not np.isfinite(arr).all():
            bad = np.argwhere(~np.isfinite(arr))[0]
            label = name or (_node.op if _node else "tensor")
            raise NonFiniteError(f"non-finite value in {label} at index {tuple(int(i) for i in bad)}")
        self.data = arr
        self.requires_grad = requires_grad or _node is not None
        self.grad: np.ndarray | None = None
        self.node: Node | None = _node
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Skip tape recording inside the block (evaluation, finite differences)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], rule) -> Tensor:
    if _grad_enabled and any(t.requires_grad for t in inputs):
        return Tensor(out, _node=Node(op, tuple(inputs), rule))
    return Tensor(out)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- tape


class Tape:
    """Recorded operations reachable from one output, in creation order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: dict[int, Node] = {}
        stack = [out]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or id(node) in seen:
                continue
            seen[id(node)] = node
            stack.extend(node.inputs)
        return cls(sorted(seen.values(), key=lambda n: n.seq))

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, out: Tensor, seed_grad: np.ndarray, visit=None) -> None:
        # gradients of non-leaf tensors live here; leaves accumulate into .grad
        pending: dict[int, np.ndarray] = {id(out.node): seed_grad}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if visit is not None:
                visit(node)
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp.node)
                    pending[key] = gi if key not in pending else pending[key] + gi


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every leaf that ``loss`` depends on."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ValueError("loss was not produced by a recorded operation")
    tape = Tape.from_output(loss)
    tape.replay(loss, np.ones_like(loss.data))
    return tape


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def expm1(x: Tensor) -> Tensor:
    out = np.expm1(x.data)
    return _record("expm1", out, (x,), lambda g: (g * (out + 1.0),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign to keep exp() from overflowing
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s
    return _record("silu", out, (x,), lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),))


SOFTPLUS_LINEAR_ABOVE = 30.0


def softplus_array(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=DTYPE)
    return np.where(z > SOFTPLUS_LINEAR_ABOVE, z, np.log1p(np.exp(np.minimum(z, SOFTPLUS_LINEAR_ABOVE))))


def softplus(x: Tensor) -> Tensor:
    out = softplus_array(x.data)
    return _record("softplus", out, (x,), lambda g: (g * _sigmoid(x.data),))


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _record("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. ``a`` may carry leading batch axes; ``b`` is 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def rule(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _record("matmul", a.data @ b.data, (a, b), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum where every index of an operand survives in the
    output or in the other operand."""
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        if any(c not in out_sub and c not in other for c in own):
            raise ValueError(f"unsupported einsum {subscripts}")
    out = np.einsum(subscripts, a.data, b.data)

    def grad_for(g, own, other, other_data, shape):
        # an operand without "..." still receives the summed batch dims
        target = own if "..." in own or "..." not in out_sub else "..." + own
        return _unbroadcast(np.einsum(f"{out_sub},{other}->{target}", g, other_data), shape)

    def rule(g):
        return (grad_for(g, sa, sb, b.data, a.shape), grad_for(g, sb, sa, a.data, b.shape))

    return _record("einsum", out, (a, b), rule)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x: Tensor, index) -> Tensor:
    def rule(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _record("getitem", x.data[index], (x,), rule)


def split_last(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    bounds = np.cumsum([0, *sizes])
    if bounds[-1] != x.shape[-1]:
        raise ShapeError(f"cannot split last axis {x.shape[-1]} into {list(sizes)}")
    return [getitem(x, (Ellipsis, slice(lo, hi))) for lo, hi in zip(bounds[:-1], bounds[1:])]


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def rule(g):
        return [np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])]

    return _record("concat", out, xs, rule)


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    return _record("sum", np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum_axis", out, (x,), rule)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return _record("mean", np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n),))


def mse_loss(pred: Tensor, target) -> Tensor:
    diff = sub(pred, target)
    return mean_all(mul(diff, diff))


# ---------------------------------------------------------------- convolution


def causal_conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Depthwise causal convolution along the last axis.

    ``x`` is ``(..., d, S)``, ``kernel`` is ``(d, w)``. Output at step t reads
    inputs t-w+1..t only, with zeros before the start.
    """
    d, w = kernel.shape
    if w < 1 or x.shape[-2] != d:
        raise ShapeError(f"causal_conv1d shapes: x {x.shape}, kernel {kernel.shape}")
    S = x.shape[-1]
    pad = np.zeros(x.shape[:-1] + (w - 1,))
    xp = np.concatenate([pad, x.data], axis=-1)
    out = np.zeros(x.shape)
    for j in range(w):
        out += kernel.data[:, j:j + 1] * xp[..., j:j + S]
    inputs = [x, kernel]
    if bias is not None:
        out += bias.data[:, None]
        inputs.append(bias)

    def rule(g):
        gxp = np.zeros(xp.shape)
        gk = np.empty((d, w))
        lead = tuple(range(g.ndim - 2))
        for j in range(w):
            gxp[..., j:j + S] += kernel.data[:, j:j + 1] * g
            gk[:, j] = (g * xp[..., j:j + S]).sum(axis=lead + (g.ndim - 1,))
        grads = [gxp[..., w - 1:], gk]
        if bias is not None:
            grads.append(g.sum(axis=lead + (g.ndim - 1,)))
        return grads

    return _record("causal_conv1d", out, inputs, rule)


# ---------------------------------------------------------------- checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               indices: Sequence[tuple[int, ...]] | None = None) -> float:
    """Max relative gap between analytic and central-difference gradients.

    ``f`` must return a scalar tensor; ``x`` is perturbed in place and restored.
    ``indices`` restricts the check to a subset of entries.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    if out.node is None:
        analytic = np.zeros(x.shape)
    else:
        backward(out)
        analytic = x.grad if x.grad is not None else np.zeros(x.shape)
    if indices is None:
        indices = list(np.ndindex(*x.shape))
    worst = 0.0
    for idx in indices:
        orig = x.data[idx]
        with no_grad():
            x.data[idx] = orig + eps
            plus = f(x).item()
            x.data[idx] = orig - eps
            minus = f(x).item()
        x.data[idx] = orig
        numeric = (plus - minus) / (2 * eps)
        a = analytic[idx]
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    x.grad = None
    return worst


def grad_check_params(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-5,
                      entries: dict[str, Sequence[tuple[int, ...]]] | None = None,
                      detail: list | None = None) -> float:
    """:func:`grad_check` over many leaves with a single backward pass.

    ``entries`` maps a parameter name to the indices to probe (all entries of
    every parameter when omitted). ``detail`` collects
    ``(name, index, analytic, numeric, error)`` rows when given.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params.values():
        p.grad = None
    out = loss_fn()
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)
    analytic = {k: (p.grad if p.grad is not None else np.zeros(p.shape)).copy()
                for k, p in params.items()}
    worst = 0.0
    with no_grad():
        for name, p in params.items():
            idxs = entries.get(name, ()) if entries is not None else list(np.ndindex(*p.shape))
            for idx in idxs:
                orig = p.data[idx]
                p.data[idx] = orig + eps
                plus = loss_fn().item()
                p.data[idx] = orig - eps
                minus = loss_fn().item()
                p.data[idx] = orig
                numeric = (plus - minus) / (2 * eps)
                a = analytic[name][idx]
                err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                worst = max(worst, err)
                if detail is not None:
                    detail.append((name, idx, a, numeric, err))
    for p in params.values():
        p.grad = None
    return worst
