"""Reverse-mode differentiation over numpy arrays.

Every operation produces a new :class:`Tensor`. When a :class:`Tape` is
active and at least one input requires a gradient, the operation appends a
:class:`TapeNode` holding the activations its backward rule needs. Nodes are
appended in execution order, so the tape is topologically sorted by
construction and :meth:`Tape.backward` is a single reverse sweep.
"""

from __future__ import annotations

import itertools
import logging
from collections.abc import Callable, Sequence
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import get_settings
from .errors import ConfigurationError, ContractError, DimensionError, DivergenceError, NonFiniteError

logger = logging.getLogger("hpalf")

_precision: list[np.dtype] = [np.dtype(get_settings().precision)]
_active_tape: ContextVar["Tape | None"] = ContextVar("hpalf_active_tape", default=None)
_tensor_ids = itertools.count()

GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def default_dtype() -> np.dtype:
    """Return the floating dtype new tensors are created with."""
    return _precision[-1]


def set_precision(name: str) -> None:
    """Select 32-bit (training) or 64-bit (verification) arithmetic."""
    if name not in ("float32", "float64"):
        raise ConfigurationError(f"unsupported precision {name!r}")
    _precision[-1] = np.dtype(name)


@contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch arithmetic precision."""
    if name not in ("float32", "float64"):
        raise ConfigurationError(f"unsupported precision {name!r}")
    _precision.append(np.dtype(name))
    try:
        yield
    finally:
        _precision.pop()


def _check_finite(values: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor:
    """An n-dimensional array with an optional gradient accumulator."""

    __array_priority__ = 100

    def __init__(
        self,
        data: Any,
        *,
        requires_grad: bool = False,
        name: str | None = None,
        dtype: np.dtype | str | None = None,
    ) -> None:
        values = np.array(data, dtype=dtype or default_dtype())
        _check_finite(values, name or "tensor construction")
        self.data: np.ndarray = values
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.id = next(_tensor_ids)
        self.tape: Tape | None = None

    @classmethod
    def _wrap(cls, values: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = values
        out.requires_grad = False
        out.grad = None
        out.name = None
        out.id = next(_tensor_ids)
        out.tape = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.tape is None

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> dict[int, np.ndarray]:
        return backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __getitem__(self, index: Any) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class TapeNode:
    """One recorded operation."""

    op: str
    inputs: tuple[Tensor, ...]
    output_id: int
    grad_fn: GradFn
    saved: dict[str, Any] = field(default_factory=dict)

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(t.id for t in self.inputs)


class Tape:
    """Append-only record of differentiable operations."""

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []
        self.visits: list[int] = []
        self._token: Any = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc_info: Any) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(root)/d(node) back to every leaf that requires a gradient."""
        if root.size != 1:
            raise ContractError(f"backward root must be a scalar, got shape {root.shape}")
        if root.tape is not self:
            raise ContractError("backward root was not produced on this tape")
        grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.data)}
        leaves: dict[int, Tensor] = {}
        self.visits = []
        for index in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[index]
            upstream = grads.pop(node.output_id, None)
            if upstream is None:
                continue
            self.visits.append(index)
            for tensor, grad in zip(node.inputs, node.grad_fn(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                grad = _unbroadcast(np.asarray(grad), tensor.shape)
                if tensor.is_leaf:
                    leaves[tensor.id] = tensor
                if tensor.id in grads:
                    grads[tensor.id] = grads[tensor.id] + grad
                else:
                    grads[tensor.id] = grad
        result: dict[int, np.ndarray] = {}
        for tensor_id, tensor in leaves.items():
            grad = grads[tensor_id].astype(tensor.data.dtype, copy=False)
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
            result[tensor_id] = grad
        return result


def active_tape() -> Tape | None:
    return _active_tape.get()


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Run reverse accumulation from a scalar root recorded on a tape."""
    if root.tape is None:
        raise ContractError("backward root is not recorded on any tape")
    return root.tape.backward(root)


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def custom_op(op: str, inputs: Sequence[Tensor], out: np.ndarray, grad_fn: GradFn, **saved: Any) -> Tensor:
    """Wrap an already computed forward value and its backward rule as a tape operation."""
    _check_finite(out, op)
    result = Tensor._wrap(np.asarray(out))
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.tape = tape
        tape.record(TapeNode(op=op, inputs=tuple(inputs), output_id=result.id, grad_fn=grad_fn, saved=saved))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# elementwise arithmetic ---------------------------------------------------


def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def div(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise NonFiniteError("division by zero")
    return custom_op("div", (a, b), a.data / b.data, lambda g: (g / b.data, -g * a.data / b.data**2))


def power(x: Tensor, exponent: float) -> Tensor:
    return custom_op(
        "pow", (x,), x.data**exponent, lambda g: (g * exponent * x.data ** (exponent - 1),), exponent=exponent
    )


def square(x: Tensor) -> Tensor:
    return custom_op("square", (x,), x.data * x.data, lambda g: (2.0 * g * x.data,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return custom_op("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DivergenceError("log of a non-positive value")
    return custom_op("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def clip(x: Tensor, low: float, high: float) -> Tensor:
    """Clamp values; the gradient passes only where the input was inside the range."""
    inside = (x.data >= low) & (x.data <= high)
    return custom_op("clip", (x,), np.clip(x.data, low, high), lambda g: (g * inside,))


# reductions and shape plumbing -------------------------------------------


def tsum(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return custom_op("sum", (x,), np.asarray(out), grad_fn, axis=axis)


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return custom_op("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return custom_op("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inverse),))


def _is_basic_index(index: Any) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(x: Tensor, index: Any) -> Tensor:
    basic = _is_basic_index(index)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return custom_op("getitem", (x,), np.array(x.data[index]), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, bounds, axis=axis)

    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return custom_op("concat", tensors, out, grad_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def grad_fn(g: np.ndarray) -> list[np.ndarray]:
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return custom_op("stack", tensors, out, grad_fn)


# layers ------------------------------------------------------------------


def _windows(padded: np.ndarray, kernel: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    view = sliding_window_view(padded, (kernel, kernel), axis=(2, 3))
    return view[:, :, : stride * out_h : stride, : stride * out_w : stride]


def _check_conv_args(x: Tensor, weight: Tensor, stride: int, padding: int) -> int:
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv expects NCHW input and 4-d weight, got {x.shape} and {weight.shape}")
    if weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"kernel must be square, got {weight.shape[2:]}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"invalid stride {stride} or padding {padding}")
    return weight.shape[2]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate NCHW input with an (O, I, k, k) filter bank."""
    k = _check_conv_args(x, weight, stride, padding)
    n, c, h, w = x.shape
    if weight.shape[1] != c:
        raise DimensionError(f"input has {c} channels but weight expects {weight.shape[1]}")
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"convolution of {h}x{w} with k={k}, stride={stride} leaves no output")
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _windows(padded, k, stride, out_h, out_w)
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    inputs: list[Tensor] = [x, weight]
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"bias shape {bias.shape} does not match {weight.shape[0]} filters")
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)

    def grad_fn(g: np.ndarray) -> list[np.ndarray | None]:
        grad_w = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        grad_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                grad_padded[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += np.tensordot(
                    g, weight.data[:, :, i, j], axes=([1], [0])
                ).transpose(0, 3, 1, 2)
        grad_x = grad_padded[:, :, padding : padding + h, padding : padding + w]
        grads: list[np.ndarray | None] = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return custom_op("conv2d", inputs, np.ascontiguousarray(out), grad_fn, stride=stride, padding=padding)


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Adjoint of :func:`conv2d` for the same (O, I, k, k) weight: maps O channels to I."""
    k = _check_conv_args(x, weight, stride, padding)
    n, c, h, w = x.shape
    if weight.shape[0] != c:
        raise DimensionError(f"input has {c} channels but transposed weight expects {weight.shape[0]}")
    if output_padding < 0 or (output_padding and output_padding >= stride):
        raise ConfigurationError(f"output_padding {output_padding} must be smaller than stride {stride}")
    out_h = (h - 1) * stride - 2 * padding + k + output_padding
    out_w = (w - 1) * stride - 2 * padding + k + output_padding
    if out_h < 1 or out_w < 1:
        raise ConfigurationError("transposed convolution leaves no output")
    full_h, full_w = out_h + 2 * padding, out_w + 2 * padding
    buffer = np.zeros((n, weight.shape[1], full_h, full_w), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            buffer[:, :, i : i + stride * h : stride, j : j + stride * w : stride] += np.tensordot(
                x.data, weight.data[:, :, i, j], axes=([1], [0])
            ).transpose(0, 3, 1, 2)
    out = buffer[:, :, padding : padding + out_h, padding : padding + out_w]
    inputs: list[Tensor] = [x, weight]
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"bias shape {bias.shape} does not match {weight.shape[1]} outputs")
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)

    def grad_fn(g: np.ndarray) -> list[np.ndarray | None]:
        grad_buffer = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols = _windows(grad_buffer, k, stride, h, w)
        grad_x = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        grad_w = np.tensordot(x.data, cols, axes=([0, 2, 3], [0, 2, 3]))
        grads: list[np.ndarray | None] = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return custom_op("conv_transpose2d", inputs, np.ascontiguousarray(out), grad_fn, stride=stride, padding=padding)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``W @ x + b`` for a vector or a batch of row vectors."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"weight {weight.shape} cannot act on input {x.shape}")
    out = x.data @ weight.data.T
    inputs: list[Tensor] = [x, weight]
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"bias shape {bias.shape} does not match {weight.shape[0]} outputs")
        out = out + bias.data
        inputs.append(bias)

    def grad_fn(g: np.ndarray) -> list[np.ndarray | None]:
        if x.ndim == 1:
            grads: list[np.ndarray | None] = [g @ weight.data, np.outer(g, x.data)]
        else:
            grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g if g.ndim == 1 else g.sum(axis=0))
        return grads

    return custom_op("dense", inputs, out, grad_fn)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation; train mode also updates the running statistics in place."""
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm parameters {gamma.shape}/{beta.shape} do not match input {x.shape}")
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.size // x.shape[1]
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * x_hat + beta.data.reshape(shape)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grad_gamma = (g * x_hat).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        d_hat = g * gamma.data.reshape(shape)
        if training:
            m = x.size // x.shape[1]
            grad_x = (
                inv_std.reshape(shape)
                / m
                * (m * d_hat - d_hat.sum(axis=axes, keepdims=True) - x_hat * (d_hat * x_hat).sum(axis=axes, keepdims=True))
            )
        else:
            grad_x = d_hat * inv_std.reshape(shape)
        return grad_x, grad_gamma, grad_beta

    return custom_op("batchnorm2d", (x, gamma, beta), out.astype(x.data.dtype, copy=False), grad_fn, training=training)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ConfigurationError(f"leaky ReLU slope must lie in (0, 1), got {slope}")
    factor = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return custom_op("leaky_relu", (x,), x.data * factor, lambda g: (g * factor,), slope=slope)


def relu(x: Tensor) -> Tensor:
    positive = (x.data > 0).astype(x.data.dtype)
    return custom_op("relu", (x,), x.data * positive, lambda g: (g * positive,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return custom_op("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return custom_op("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return custom_op("softmax", (x,), out, grad_fn, axis=axis)


def activation(x: Tensor, kind: str, *, slope: float = 0.2, axis: int = -1) -> Tensor:
    """Dispatch by name: ``leaky_relu``, ``relu``, ``sigmoid``, ``tanh`` or ``softmax``."""
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "softmax":
        return softmax(x, axis)
    raise ConfigurationError(f"unknown activation {kind!r}")


def pool_global_sum(x: Tensor) -> Tensor:
    """Sum over the spatial axes of an NCHW tensor."""
    if x.ndim != 4:
        raise DimensionError(f"global sum pooling expects NCHW, got {x.shape}")
    return tsum(x, axis=(2, 3))
