"""Minimal reverse-mode differentiable tensors for the encoder, heads and losses.

Each op computes its output with numpy and, when any input requires a
gradient, records a closure that maps the output gradient to input
gradients. Every recorded node carries a monotonically increasing sequence
number, so ``backward`` can replay the exact reverse of the forward order.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from errors import NonFiniteError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()
_sequence = itertools.count()

GELU_C = float(np.sqrt(2.0 / np.pi))


def default_dtype() -> np.dtype:
    """Floating dtype used for tensors created in the current thread."""
    return getattr(_state, "dtype", np.dtype(np.float32))


def grad_enabled() -> bool:
    """Whether ops in the current thread record backward closures."""
    return getattr(_state, "grad_enabled", True)


@contextmanager
def precision(dtype: Any) -> Iterator[None]:
    """Temporarily switch the default dtype (f64 is the gradient-check mode).

    Args:
        dtype: ``np.float32`` or ``np.float64``.
    """
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype}")
    previous = default_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = previous


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording, e.g. for evaluation passes."""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """N-d float array with an optional gradient buffer.

    Attributes:
        data: Row-major numpy array (f32 unless created under ``precision``).
        requires_grad: Whether gradients flow into this tensor.
        grad: Accumulated gradient, same shape as ``data``; ``None`` until
            the first ``backward`` that reaches this tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_seq")

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None):
        self.data = np.array(data, dtype=dtype or default_dtype(), copy=True)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"
        self._seq = -1

    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        parents: tuple["Tensor", ...],
        op: str,
        backward: BackwardFn,
    ) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
            out._seq = next(_sequence)
        else:
            out._parents = ()
            out._backward = None
            out._seq = -1
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def op(self) -> str:
        return self._op

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key: Any) -> "Tensor":
        return index(self, key)


class Parameter(Tensor):
    """Trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data: Any, dtype: Any = None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap constants as non-differentiable tensors; tensors pass through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


@dataclass
class ComputeGraph:
    """Recorded ops reachable from an output, in forward recording order.

    Attributes:
        nodes: Non-leaf tensors sorted by ascending sequence number.
        leaves: Leaf tensors requiring gradients, in discovery order.
    """

    nodes: list[Tensor] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, output: Tensor) -> "ComputeGraph":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        leaves: list[Tensor] = []
        stack = [output]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            if node._backward is None:
                leaves.append(node)
            else:
                nodes.append(node)
                stack.extend(node._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes=nodes, leaves=leaves)

    def reverse_order(self) -> list[Tensor]:
        return list(reversed(self.nodes))


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> ComputeGraph:
    """Propagate gradients from ``loss`` to every reachable leaf.

    Leaf gradients accumulate across calls; reset them with
    ``zero_grad`` between optimisation steps.

    Args:
        loss: Output tensor, normally a scalar.
        grad: Seed gradient; defaults to ones (required for non-scalars).

    Returns:
        The traversed graph.
    """
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward on non-scalar of shape {loss.shape} needs a seed gradient")
        grad = np.ones_like(loss.data)
    graph = ComputeGraph.from_output(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}

    def deliver(target: Tensor, g: np.ndarray) -> None:
        if target._backward is None:
            g = g.astype(target.data.dtype, copy=False)
            target.grad = g.copy() if target.grad is None else target.grad + g
            return
        key = id(target)
        pending[key] = g if key not in pending else pending[key] + g

    if loss._backward is None:
        deliver(loss, pending.pop(id(loss)))
        return graph

    for node in graph.reverse_order():
        g_out = pending.pop(id(node), None)
        if g_out is None:
            continue
        for parent, g_in in zip(node._parents, node._backward(g_out)):
            if g_in is not None and parent.requires_grad:
                deliver(parent, g_in)
    return graph


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Broadcasting sum; the gradient reaches both inputs unchanged."""
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), "add", _backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), "sub", _backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), "mul", _backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    Raises:
        ShapeError: If the inner dimensions differ or an input is 1-D.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ≥2-D inputs, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def _backward(g: np.ndarray):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return Tensor._from_op(np.matmul(a.data, b.data), (a, b), "matmul", _backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear expects last dim {weight.shape[0]}, got {x.shape}")
    out = np.matmul(x.data, weight.data)
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g: np.ndarray):
        flat_g = g.reshape(-1, g.shape[-1])
        gx = np.matmul(g, weight.data.T) if x.requires_grad else None
        gw = x.data.reshape(-1, x.shape[-1]).T @ flat_g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, flat_g.sum(axis=0)

    return Tensor._from_op(out, parents, "linear", _backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    inner = GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(inner)
    out = 0.5 * x.data * (1.0 + t)

    def _backward(g: np.ndarray):
        d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner),)

    return Tensor._from_op(out.astype(x.data.dtype, copy=False), (x,), "gelu", _backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _backward(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), "softmax", _backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def _backward(g: np.ndarray):
        lead = tuple(range(g.ndim - 1))
        gxhat = g * gain.data
        gx = inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op(out, (x, gain, bias), "layernorm", _backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)

    def _backward(g: np.ndarray):
        return (g.reshape(x.shape),)

    return Tensor._from_op(x.data.reshape(tuple(shape)), (x,), "reshape", _backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def _backward(g: np.ndarray):
        return (np.transpose(g, inverse),)

    return Tensor._from_op(np.transpose(x.data, axes), (x,), "transpose", _backward)


def index(x: Tensor, key: Any) -> Tensor:
    """Numpy-style indexing; repeated indices accumulate gradient."""
    x = as_tensor(x)

    def _backward(g: np.ndarray):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return Tensor._from_op(np.array(x.data[key]), (x,), "index", _backward)


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select tokens per sample: ``x`` (B, L, D), ``idx`` (B, K) → (B, K, D)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather index {idx.shape} incompatible with {x.shape}")
    rows = np.arange(x.shape[0])[:, None]

    def _backward(g: np.ndarray):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return Tensor._from_op(x.data[rows, idx], (x,), "gather", _backward)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def _backward(g: np.ndarray):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(
        np.concatenate([p.data for p in parts], axis=axis), parts, "concat", _backward
    )


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)

    def _backward(g: np.ndarray):
        return (_unbroadcast(g, x.shape),)

    return Tensor._from_op(np.array(np.broadcast_to(x.data, shape)), (x,), "broadcast", _backward)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]

    def _backward(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / count,)

    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims), dtype=x.data.dtype)
    return Tensor._from_op(out, (x,), "mean", _backward)


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar."""
    x = as_tensor(x)

    def _backward(g: np.ndarray):
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), "sum", _backward)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets: ArrayLike) -> Tensor:
    """Mean over the batch of ``-Σ target · log softmax(logits)``.

    Args:
        logits: (B, C) scores.
        targets: (B, C) soft labels whose rows sum to 1.

    Raises:
        ShapeError: On shape mismatch or rows that are not distributions.
    """
    t = as_tensor(targets).data.astype(logits.data.dtype, copy=False)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise ShapeError(f"cross_entropy expects matching (B, C); got {logits.shape} and {t.shape}")
    if not np.allclose(t.sum(axis=1), 1.0, atol=1e-4):
        raise ShapeError("cross_entropy targets must sum to 1 per row")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    batch = logits.shape[0]
    loss = np.asarray(-(t * log_p).sum() / batch, dtype=logits.data.dtype)

    def _backward(g: np.ndarray):
        return (g * (np.exp(log_p) - t) / batch,)

    return Tensor._from_op(loss, (logits,), "cross_entropy", _backward)


def mse_masked(pred: Tensor, target: ArrayLike, mask: np.ndarray) -> Tensor:
    """Mean squared error restricted to positions where ``mask`` is true.

    ``mask`` may cover a prefix of ``pred``'s axes (e.g. a per-token mask for
    (B, L, D) predictions); it is broadcast over the remaining axes.

    Raises:
        ShapeError: If shapes disagree.
        ValueError: If the mask selects nothing.
    """
    tgt = as_tensor(target).data.astype(pred.data.dtype, copy=False)
    if tgt.shape != pred.shape:
        raise ShapeError(f"mse_masked shape mismatch: {pred.shape} vs {tgt.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape[: mask.ndim]:
        raise ShapeError(f"mask shape {mask.shape} does not prefix {pred.shape}")
    full = np.broadcast_to(mask.reshape(mask.shape + (1,) * (pred.ndim - mask.ndim)), pred.shape)
    count = int(full.sum())
    if count == 0:
        raise ValueError("mse_masked needs at least one masked position")
    diff = np.where(full, pred.data - tgt, 0.0).astype(pred.data.dtype, copy=False)
    loss = np.asarray((diff**2).sum() / count, dtype=pred.data.dtype)

    def _backward(g: np.ndarray):
        return (g * 2.0 * diff / count,)

    return Tensor._from_op(loss, (pred,), "mse_masked", _backward)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns:
        The norm before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-6)
        for g in grads:
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Autodiff vs central-difference comparison.

    ``relative_errors`` holds, per parameter, the max absolute difference
    divided by the larger of the two gradients' max magnitudes.
    """

    step: float
    tolerance: float
    relative_errors: list[float]

    @property
    def max_relative_error(self) -> float:
        return max(self.relative_errors, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    tolerance: float = 1e-3,
    step: Optional[float] = None,
) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f()`` against central differences.

    Args:
        f: Zero-argument function rebuilding the scalar from ``params``.
        params: Leaf tensors with ``requires_grad``.
        tolerance: Pass threshold on the max relative error.
        step: Difference step; 1e-3 for f32 data, 1e-5 for f64.
    """
    zero_grad(params)
    backward(f())
    analytic = [
        np.zeros_like(p.data, dtype=np.float64) if p.grad is None else p.grad.astype(np.float64)
        for p in params
    ]
    if step is None:
        step = 1e-5 if all(p.data.dtype == np.float64 for p in params) else 1e-3

    errors = []
    with no_grad():
        for p, a in zip(params, analytic):
            numeric = np.zeros_like(a)
            flat = p.data.reshape(-1)
            if not np.shares_memory(flat, p.data):
                raise ValueError("finite_diff_check needs contiguous parameter buffers")
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + step
                plus = float(f().data)
                flat[i] = original - step
                minus = float(f().data)
                flat[i] = original
                numeric.reshape(-1)[i] = (plus - minus) / (2.0 * step)
            scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
            errors.append(float(np.abs(a - numeric).max(initial=0.0) / scale))
    zero_grad(params)
    return GradCheckReport(step=step, tolerance=tolerance, relative_errors=errors)
