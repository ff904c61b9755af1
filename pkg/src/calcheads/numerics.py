"""Dense tensors with tape-based reverse-mode differentiation.

Arrays are plain numpy buffers. Every differentiable op checks whether a
:class:`Tape` is active and whether any input requires a gradient; only then
is a backward closure recorded. Backward replays the tape in exact reverse
recording order, so no topological sort is needed.

Usage::

    with Tape() as tape:
        loss = cross_entropy(model_logits, targets)
    backward(loss, tape)
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """NaN/inf encountered where a finite value is required."""


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


class _Entry:
    __slots__ = ("out", "inputs", "fn")

    def __init__(self, out: Tensor, inputs: tuple, fn: Callable):
        self.out = out
        self.inputs = inputs
        self.fn = fn


class Tape:
    """Ordered record of differentiable operations.

    A tape belongs to one forward pass; do not share it between threads.
    """

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def clear(self) -> None:
        self.entries.clear()

    def backward(self, loss: Tensor) -> list[int]:
        """Populate ``.grad`` on every tensor reachable from ``loss``.

        Returns the indices of replayed entries (in replay order) so callers
        can audit the reverse-order contract.
        """
        if loss.data.size != 1 or loss.ndim != 0:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        visited: list[int] = []
        for pos in range(len(self.entries) - 1, -1, -1):
            entry = self.entries[pos]
            g = grads.pop(id(entry.out), None)
            if g is None:
                continue
            holders.pop(id(entry.out), None)
            entry.out.grad = g if entry.out.grad is None else entry.out.grad + g
            visited.append(pos)
            in_grads = entry.fn(g)
            for inp, ig in zip(entry.inputs, in_grads):
                if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                    holders[key] = inp
        # whatever is left are leaves
        for key, g in grads.items():
            t = holders[key]
            t.grad = g if t.grad is None else t.grad + g
        return visited


def backward(loss: Tensor, tape: Tape | None = None) -> list[int]:
    tape = tape if tape is not None else current_tape()
    if tape is None:
        raise ValueError("backward needs the tape that recorded the loss")
    return tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, inputs: tuple, fn: Callable) -> Tensor:
    tape = current_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.entries.append(_Entry(out, inputs, fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), fn)


def where(mask: np.ndarray, values, x) -> Tensor:
    """Elementwise select: ``values`` where ``mask`` is true, else ``x``.

    Only ``x`` receives gradient through unmasked entries; ``values`` are
    treated as constants when given as arrays.
    """
    x = as_tensor(x)
    vals = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=x.dtype)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, vals, x.data)
    keep = ~mask
    sx = x.shape

    def fn(g):
        return (_unbroadcast(g * keep, sx),)

    return _record(out, (x,), fn)


# linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics on leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # fold leading axes into one GEMM; avoids a [B, d, k] weight gradient
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])

        def fn2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _record((a2 @ bd).reshape(*lead, bd.shape[-1]), (a, b), fn2)

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record(ad @ bd, (a, b), fn)


# shape ----------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def index(x, key) -> Tensor:
    """Basic or advanced indexing; gradient scatters back with ``np.add.at``."""
    x = as_tensor(x)
    src_shape, dtype = x.shape, x.dtype

    def fn(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, key, g)
        return (full,)

    return _record(x.data[key], (x,), fn)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding id out of range [0, {weight.shape[0]})")
    return index(weight, ids)


# reductions -----------------------------------------------------------------

def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    src = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), fn)


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# nonlinearities -------------------------------------------------------------

def softmax_lastdim(x) -> Tensor:
    """Max-subtracted softmax over the last axis. ``-inf`` entries get zero mass."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(p, (x,), fn)


def causal_mask(scores) -> Tensor:
    """Set entries above the diagonal of the last two axes to ``-inf``."""
    scores = as_tensor(scores)
    n, m = scores.shape[-2:]
    allowed = np.tril(np.ones((n, m), dtype=bool))
    return where(~allowed, -np.inf, scores)


def layernorm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm: gain {gain.shape} / bias {bias.shape} vs last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def fn(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=red) if gain.requires_grad else None
        gbias = g.sum(axis=red) if bias.requires_grad else None
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), fn)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """Tanh-approximated gaussian error linear unit."""
    x = as_tensor(x)
    xd = x.data
    t = np.tanh(_GELU_C * (xd + 0.044715 * xd * xd * xd))
    half = 0.5 * (1.0 + t)

    def fn(g):
        # in-place to keep temporaries down; this op is bandwidth bound
        d = xd * xd
        d *= 3 * 0.044715 * _GELU_C
        d += _GELU_C
        s = t * t
        np.subtract(1.0, s, out=s)
        s *= xd
        s *= d
        s *= 0.5
        s += half
        s *= g
        return (s,)

    return _record(xd * half, (x,), fn)


def silu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    s = 1.0 / (1.0 + np.exp(-xd))
    return _record(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


ACTIVATIONS = {"gelu": gelu, "silu": silu}


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=-1, keepdims=True))
    out = x.data - lse
    p = np.exp(out)
    return _record(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits, target) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over all leading positions.

    ``logits`` is ``[..., V]``; ``target`` an int or int array of the leading
    shape. A single ``[V]`` row with an int target gives the plain loss.
    """
    logits = as_tensor(logits)
    v = logits.shape[-1]
    tgt = np.asarray(target)
    if tgt.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {tgt.shape} vs logits {logits.shape}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    if np.isnan(logits.data).any():
        raise NumericError("cross_entropy logits contain NaN")
    flat = logits.data.reshape(-1, v)
    t = tgt.reshape(-1)
    m = flat.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(flat - m).sum(axis=-1, keepdims=True)))[:, 0]
    rows = np.arange(flat.shape[0])
    n = flat.shape[0]
    loss = float((lse - flat[rows, t]).sum() / n)

    def fn(g):
        p = np.exp(flat - lse[:, None])
        p[rows, t] -= 1.0
        return ((g / n) * p.reshape(logits.shape),)

    return _record(np.asarray(loss, dtype=logits.dtype), (logits,), fn)


def finite_difference_grad(f: Callable[[], float], param: np.ndarray, step: float = 1e-5,
                           indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. entries of ``param`` (mutated in place)."""
    out = np.zeros_like(param)
    idx_iter = indices if indices is not None else list(np.ndindex(param.shape))
    for idx in idx_iter:
        orig = param[idx]
        param[idx] = orig + step
        fp = f()
        param[idx] = orig - step
        fm = f()
        param[idx] = orig
        out[idx] = (fp - fm) / (2 * step)
    return out
