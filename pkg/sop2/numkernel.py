"""Dense float64 tensors with reverse-mode differentiation.

Values are immutable once built; the only in-place update is ``Tensor.assign_``,
which the optimizer uses. Operations record themselves on the active ``Tape``
when at least one input requires a gradient.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ConfigurationError, ContractError, DimensionError, EmptySetError, NumericalError

FloatArray = NDArray[np.float64]
BoolArray = NDArray[np.bool_]
IntArray = NDArray[np.int64]

# Additive attention bias for masked keys.
MASK_BIAS = -1e30

_state = threading.local()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data: FloatArray = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[FloatArray] = None
        self.name = name

    @classmethod
    def _wrap(cls, data: FloatArray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> FloatArray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def assign_(self, values: ArrayLike) -> None:
        """Replace the tensor's values in place (optimizer updates only)."""
        new = np.array(values, dtype=np.float64)
        if new.shape != self.data.shape:
            raise DimensionError(f"assign_: {new.shape} into {self.shape}")
        self.data = new

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: "TensorLike") -> "Tensor":
        return add(self, other)

    def __radd__(self, other: "TensorLike") -> "Tensor":
        return add(other, self)

    def __sub__(self, other: "TensorLike") -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: "TensorLike") -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: "TensorLike") -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: "TensorLike") -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __truediv__(self, other: float) -> "Tensor":
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


TensorLike = Union[Tensor, float, int, np.ndarray]
Backward = Callable[[FloatArray], Sequence[Optional[FloatArray]]]


@dataclass
class TapeEntry:
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Backward


class Tape:
    """Ordered record of primitive applications.

    A tape belongs to one thread; run parallel forward passes on separate tapes.
    """

    def __init__(self) -> None:
        self.entries: List[TapeEntry] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, op: str, output: Tensor, inputs: Tuple[Tensor, ...], backward: Backward) -> None:
        self.entries.append(TapeEntry(op, output, inputs, backward))
        self._outputs.add(id(output))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires a gradient")

        grads: dict[int, FloatArray] = {id(loss): np.ones(loss.shape)}
        leaves: dict[int, Tensor] = {}
        if id(loss) not in self._outputs:
            leaves[id(loss)] = loss

        for entry in reversed(self.entries):
            for tensor in entry.inputs:
                if tensor.requires_grad and id(tensor) not in self._outputs:
                    leaves.setdefault(id(tensor), tensor)
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            for tensor, g_in in zip(entry.inputs, entry.backward(g)):
                if g_in is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                grads[key] = grads[key] + g_in if key in grads else g_in

        for key, leaf in leaves.items():
            g = grads.get(key)
            leaf.grad = np.zeros(leaf.shape) if g is None else np.array(g, dtype=np.float64)


def _stack() -> List[Optional[Tape]]:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def current_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_tape() -> Iterator[None]:
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``grad`` on every leaf of ``tape`` that requires a gradient."""
    tape = tape if tape is not None else current_tape()
    if tape is None:
        raise ContractError("backward called without a tape")
    tape.backward(loss)


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(op: str, data: FloatArray, inputs: Tuple[Tensor, ...], grad_fn: Backward) -> Tensor:
    tape = current_tape()
    requires = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires)
    if requires:
        assert tape is not None
        tape.record(op, out, inputs, grad_fn)
    return out


def _unbroadcast(grad: FloatArray, shape: Tuple[int, ...]) -> FloatArray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, factor: float) -> Tensor:
    return _result("scale", x.data * factor, (x,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return _result("relu", np.where(positive, x.data, 0.0), (x,), lambda g: (g * positive,))


def _sigmoid(z: FloatArray) -> FloatArray:
    # Split by sign so exp never overflows.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def log_sigmoid(x: Tensor) -> Tensor:
    out = -np.logaddexp(0.0, -x.data)
    return _result("log_sigmoid", out, (x,), lambda g: (g * _sigmoid(-x.data),))


def power(x: Tensor, exponent: int) -> Tensor:
    return _result(
        "power",
        x.data**exponent,
        (x,),
        lambda g: (g * exponent * x.data ** (exponent - 1),),
    )


def absolute(x: Tensor) -> Tensor:
    return _result("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


# ----------------------------------------------------------------------------
# reductions and shape manipulation
# ----------------------------------------------------------------------------


def tensor_sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    def grad_fn(g: FloatArray) -> Tuple[FloatArray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), grad_fn)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return scale(tensor_sum(x, axis=axis), 1.0 / max(count, 1))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _result("reshape", x.data.reshape(tuple(shape)), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _result(
        "broadcast_to",
        np.broadcast_to(x.data, shape).copy(),
        (x,),
        lambda g: (_unbroadcast(g, x.shape),),
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _result(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def concat_tokens(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` on top of ``b`` along the token axis (second to last)."""
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"concat_tokens: {a.shape} and {b.shape}")
    return concat((a, b), axis=a.ndim - 2)


def slice_axis(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    key = tuple(index)

    def grad_fn(g: FloatArray) -> Tuple[FloatArray]:
        full = np.zeros(x.shape)
        full[key] = g
        return (full,)

    return _result("slice", x.data[key].copy(), (x,), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")

    def grad_fn(g: FloatArray) -> Tuple[FloatArray, FloatArray]:
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result("matmul", np.matmul(a.data, b.data), (a, b), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    out = matmul(x, swap_last(weight))
    return out if bias is None else add(out, bias)


# ----------------------------------------------------------------------------
# normalisation and attention primitives
# ----------------------------------------------------------------------------


def softmax(x: Tensor) -> Tensor:
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def grad_fn(g: FloatArray) -> Tuple[FloatArray]:
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _result("softmax", y, (x,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def grad_fn(g: FloatArray) -> Tuple[FloatArray, FloatArray, FloatArray]:
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - np.mean(gxhat, axis=-1, keepdims=True)
            - xhat * np.mean(gxhat * xhat, axis=-1, keepdims=True)
        )
        lead = tuple(range(x.ndim - 1))
        return gx, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)

    return _result("layer_norm", xhat * gamma.data + beta.data, (x, gamma, beta), grad_fn)


def masked_max(x: Tensor, mask: ArrayLike) -> Tensor:
    """Channelwise max over the row axis (second to last) of rows where ``mask`` holds.

    Gradients go to the first maximal row of each channel.
    """
    keep = np.asarray(mask, dtype=bool)
    if keep.shape != x.shape[:-1]:
        raise DimensionError(f"masked_max: values {x.shape}, mask {keep.shape}")
    if not np.all(np.any(keep, axis=-1)):
        raise EmptySetError("masked max over a set with no valid rows")
    filled = np.where(keep[..., None], x.data, -np.inf)
    arg = np.argmax(filled, axis=-2)[..., None, :]
    out = np.take_along_axis(filled, arg, axis=-2)[..., 0, :]

    def grad_fn(g: FloatArray) -> Tuple[FloatArray]:
        full = np.zeros(x.shape)
        np.put_along_axis(full, arg, g[..., None, :], axis=-2)
        return (full,)

    return _result("masked_max", out, (x,), grad_fn)


def max_pool_rows(x: Tensor, mask: ArrayLike) -> Tensor:
    return masked_max(x, mask)


def cosine_similarity(u: Tensor, v: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine over the last axis; leading axes broadcast."""
    if u.shape[-1] != v.shape[-1]:
        raise DimensionError(f"cosine_similarity: {u.shape} and {v.shape}")
    nu = np.sqrt(np.sum(u.data * u.data, axis=-1))
    nv = np.sqrt(np.sum(v.data * v.data, axis=-1))
    su, sv = np.maximum(nu, eps), np.maximum(nv, eps)
    dot = np.sum(u.data * v.data, axis=-1)
    s = dot / (su * sv)

    def grad_fn(g: FloatArray) -> Tuple[FloatArray, FloatArray]:
        ku = np.where(nu > eps, s / (su * np.where(nu > eps, nu, 1.0)), 0.0)
        kv = np.where(nv > eps, s / (sv * np.where(nv > eps, nv, 1.0)), 0.0)
        gu = g[..., None] * (v.data / (su * sv)[..., None] - ku[..., None] * u.data)
        gv = g[..., None] * (u.data / (su * sv)[..., None] - kv[..., None] * v.data)
        return _unbroadcast(gu, u.shape), _unbroadcast(gv, v.shape)

    return _result("cosine", s, (u, v), grad_fn)


# ----------------------------------------------------------------------------
# indexing
# ----------------------------------------------------------------------------


def gather_rows(x: Tensor, index: ArrayLike) -> Tensor:
    """Rows of a (rows, C) table picked by ``index``; index -1 yields a zero row."""
    idx = np.asarray(index, dtype=np.int64)
    valid = idx >= 0
    out = np.zeros(idx.shape + x.shape[1:])
    if x.shape[0] > 0:
        out[valid] = x.data[idx[valid]]

    def grad_fn(g: FloatArray) -> Tuple[FloatArray]:
        full = np.zeros(x.shape)
        np.add.at(full, idx[valid], g[valid])
        return (full,)

    return _result("gather_rows", out, (x,), grad_fn)


def take(x: Tensor, index: ArrayLike) -> Tensor:
    """Index the first axis of ``x`` with an integer array of any shape."""
    idx = np.asarray(index, dtype=np.int64)

    def grad_fn(g: FloatArray) -> Tuple[FloatArray]:
        full = np.zeros(x.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _result("take", x.data[idx], (x,), grad_fn)


def take_along_last(x: Tensor, index: ArrayLike) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)

    def grad_fn(g: FloatArray) -> Tuple[FloatArray]:
        full = np.zeros(x.shape)
        lead = np.indices(idx.shape)[:-1]
        np.add.at(full, (*lead, idx), g)
        return (full,)

    return _result("take_along_last", np.take_along_axis(x.data, idx, axis=-1), (x,), grad_fn)


def scatter_rows(x: Tensor, index: ArrayLike, mask: ArrayLike, num_rows: int) -> Tensor:
    """Write rows of ``x`` (shape index.shape + (C,)) into a zero (num_rows, C) table."""
    idx = np.asarray(index, dtype=np.int64)
    keep = np.asarray(mask, dtype=bool)
    if x.shape[:-1] != idx.shape or keep.shape != idx.shape:
        raise DimensionError(f"scatter_rows: values {x.shape}, index {idx.shape}, mask {keep.shape}")
    out = np.zeros((num_rows, x.shape[-1]))
    out[idx[keep]] = x.data[keep]

    def grad_fn(g: FloatArray) -> Tuple[FloatArray]:
        full = np.zeros(x.shape)
        full[keep] = g[idx[keep]]
        return (full,)

    return _result("scatter_rows", out, (x,), grad_fn)


# ----------------------------------------------------------------------------
# multi-head self-attention
# ----------------------------------------------------------------------------


class Projection(Protocol):
    def __call__(self, x: Tensor) -> Tensor: ...


@dataclass(frozen=True)
class AttentionWeights:
    q: Projection
    k: Projection
    v: Projection
    out: Projection

    @classmethod
    def from_tensors(cls, *pairs: Tuple[Tensor, Optional[Tensor]]) -> "AttentionWeights":
        """Build from four (weight, bias) pairs in q, k, v, out order."""
        if len(pairs) != 4:
            raise ContractError("attention needs q, k, v and out projections")
        q, k, v, o = (_affine(w, b) for w, b in pairs)
        return cls(q, k, v, o)


def _affine(weight: Tensor, bias: Optional[Tensor]) -> Projection:
    return lambda x: linear(x, weight, bias)


def mhsa(tokens: Tensor, mask: ArrayLike, weights: AttentionWeights, heads: int) -> Tensor:
    """Masked multi-head self-attention over (n, C) or batched (N, n, C) tokens.

    Masked tokens never act as keys or values and their output rows are zero.
    """
    channels = tokens.shape[-1]
    if heads < 1 or channels % heads:
        raise ConfigurationError(f"{heads} heads do not divide {channels} channels")
    keep = np.asarray(mask, dtype=bool)
    if keep.shape != tokens.shape[:-1]:
        raise DimensionError(f"mhsa: tokens {tokens.shape}, mask {keep.shape}")

    single = tokens.ndim == 2
    x = reshape(tokens, (1,) + tokens.shape) if single else tokens
    keep3 = keep[None] if single else keep
    batch, n, _ = x.shape
    depth = channels // heads
    keep_rows = Tensor(keep3[..., None].astype(np.float64))
    # masked rows enter the projections as zeros
    x = mul(x, keep_rows)

    def split_heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (batch, n, heads, depth)), (0, 2, 1, 3))

    q = split_heads(weights.q(x))
    k = split_heads(weights.k(x))
    v = split_heads(weights.v(x))
    scores = scale(matmul(q, swap_last(k)), 1.0 / math.sqrt(depth))
    bias = np.where(keep3, 0.0, MASK_BIAS)[:, None, None, :]
    attn = softmax(add(scores, Tensor(bias)))
    context = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (batch, n, channels))
    out = mul(weights.out(context), keep_rows)
    return reshape(out, tokens.shape) if single else out


# ----------------------------------------------------------------------------
# gradient oracle
# ----------------------------------------------------------------------------


def _scalar(value: Union[Tensor, float]) -> float:
    return value.item() if isinstance(value, Tensor) else float(value)


def finite_diff_grad(f: Callable[[Tensor], Union[Tensor, float]], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central differences of scalar ``f`` with respect to every entry of ``x``."""
    if h <= 0:
        raise ContractError("finite difference step must be positive")
    base = x.data
    grad = np.zeros(base.shape)
    try:
        with no_tape():
            for i in np.ndindex(base.shape):
                shifted = base.copy()
                shifted[i] = base[i] + h
                x.data = shifted
                f_plus = _scalar(f(x))
                shifted = base.copy()
                shifted[i] = base[i] - h
                x.data = shifted
                f_minus = _scalar(f(x))
                grad[i] = (f_plus - f_minus) / (2.0 * h)
    finally:
        x.data = base
    return Tensor(grad)


def relative_error(analytic: ArrayLike, numeric: ArrayLike, floor: float = 1e-3) -> float:
    """Largest entry-wise gap, each relative to that entry's own magnitude.

    Entries smaller than ``floor`` in both tensors are measured against ``floor``.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise DimensionError(f"relative_error: {a.shape} and {n.shape}")
    if a.size == 0:
        return 0.0
    if floor <= 0:
        raise ContractError("relative_error floor must be positive")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def assert_finite(x: Tensor, name: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NumericalError(name)
