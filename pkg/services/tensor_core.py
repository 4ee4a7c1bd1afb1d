# Tensor Core — dense float64 arrays with a reverse-mode gradient tape
#
# Every model equation is written against the ops in this module.
# Ops record (parents, vjp) nodes on the active GradientTape; backward()
# replays the tape in reverse append order, which is a valid topological
# order because parents are always appended before their children.
#
# Broadcasting is limited to scalar-with-tensor. Row biases and column
# broadcasts are materialized with matmul against ones (see affine()).

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from services.errors import ContractError, DimensionError, NumericError

Vjp = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_ACTIVE_TAPE: contextvars.ContextVar[Optional["GradientTape"]] = contextvars.ContextVar(
    "active_tape", default=None
)


class Tensor:
    """A float64 array, optionally tracked as a node of a GradientTape."""

    __slots__ = ("data", "tape_id", "_tape")
    __array_ufunc__ = None  # ndarray <op> Tensor falls through to our reflected ops

    def __init__(self, data, tape_id: Optional[int] = None, tape: Optional["GradientTape"] = None):
        self.data    = np.asarray(data, dtype=np.float64)
        self.tape_id = tape_id
        self._tape   = tape

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, other):      return add(self, other)
    def __radd__(self, other):     return add(other, self)
    def __sub__(self, other):      return sub(self, other)
    def __rsub__(self, other):     return sub(other, self)
    def __mul__(self, other):      return mul(self, other)
    def __rmul__(self, other):     return mul(other, self)
    def __truediv__(self, other):  return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other):   return matmul(self, other)
    def __rmatmul__(self, other):  return matmul(other, self)
    def __neg__(self):             return neg(self)

    def __repr__(self) -> str:
        tracked = f", tape_id={self.tape_id}" if self.tape_id is not None else ""
        return f"Tensor(shape={self.shape}{tracked})"


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence[float]]


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ── Gradient tape ────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class _Node:
    parents: Tuple[Optional[int], ...]
    vjp:     Optional[Vjp]            # None marks a leaf (watched tensor)


class GradientTape:
    """
    Append-only record of differentiable ops.

    Use as a context manager; ops executed inside the block record onto it.
    A tape is single-owner: run one tape per thread (the active tape lives
    in a ContextVar, so distinct threads never share it).
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self._token = None

    def __enter__(self) -> "GradientTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def watch(self, tensor: TensorLike) -> Tensor:
        """Return a leaf view of `tensor` that will receive a gradient."""
        self.nodes.append(_Node(parents=(), vjp=None))
        return Tensor(as_tensor(tensor).data, tape_id=len(self.nodes) - 1, tape=self)

    def record(self, data: np.ndarray, inputs: Sequence[Tensor], vjp: Vjp) -> Tensor:
        parents = tuple(t.tape_id if t._tape is self else None for t in inputs)
        if all(p is None for p in parents):
            return Tensor(data)
        self.nodes.append(_Node(parents=parents, vjp=vjp))
        return Tensor(data, tape_id=len(self.nodes) - 1, tape=self)

    def backward(self, loss: Tensor) -> Dict[int, Tensor]:
        """Gradients of a scalar loss w.r.t. every leaf it depends on."""
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape_id is None or loss._tape is not self:
            return {}

        grads: Dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}
        for idx in range(loss.tape_id, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            if node.vjp is None:
                leaves[idx] = Tensor(g)
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if parent is None or pg is None:
                    continue
                grads[parent] = grads[parent] + pg if parent in grads else pg
        return leaves

    def gradient(self, loss: Tensor, sources: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
        """Named gradients; sources the loss does not reach get zeros."""
        by_id = self.backward(loss)
        return {
            name: (by_id[t.tape_id].data if t.tape_id in by_id else np.zeros_like(t.data))
            for name, t in sources.items()
        }


def backward(loss: Tensor) -> Dict[int, Tensor]:
    """Gradient map {tape_id: gradient} for the tape `loss` was recorded on."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        return {}
    return loss._tape.backward(loss)


def _record(data: np.ndarray, inputs: Sequence[Tensor], vjp: Vjp) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return Tensor(data)
    return tape.record(data, inputs, vjp)


# ── Reductions (sequential, left to right) ───────────────────────────────────

def _sequential_sum(values: np.ndarray) -> float:
    flat = values.ravel()
    if flat.size == 0:
        return 0.0
    return float(np.cumsum(flat)[-1])


def sum_all(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _record(
        np.asarray(_sequential_sum(x.data)), (x,),
        lambda g: (np.full(shape, float(g)),)
    )


def mean_all(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    if x.size == 0:
        raise ContractError("mean of an empty tensor")
    return mul(sum_all(x), 1.0 / x.size)


# ── Elementwise ops ──────────────────────────────────────────────────────────

def _pair(a: TensorLike, b: TensorLike) -> Tuple[Tensor, Tensor, np.ndarray, np.ndarray]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return a, b, a.data, b.data
    if a.size == 1:
        return a, b, a.data.reshape(()), b.data
    if b.size == 1:
        return a, b, a.data, b.data.reshape(())
    raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(_sequential_sum(grad)).reshape(shape)


def _binary(a, b, fwd, grad_a, grad_b) -> Tensor:
    a, b, x, y = _pair(a, b)
    out = fwd(x, y)

    def vjp(g):
        return _reduce_to(grad_a(g, x, y), a.shape), _reduce_to(grad_b(g, x, y), b.shape)

    return _record(out, (a, b), vjp)


def add(a: TensorLike, b: TensorLike) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    return _binary(
        a, b, np.multiply,
        lambda g, x, y: g * y,
        lambda g, x, y: g * x,
    )


def div(a: TensorLike, b: TensorLike) -> Tensor:
    return _binary(
        a, b, np.divide,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def _unary(x: TensorLike, fwd, local_grad) -> Tensor:
    x = as_tensor(x)
    out = fwd(x.data)
    return _record(out, (x,), lambda g: (g * local_grad(x.data, out),))


def neg(x: TensorLike) -> Tensor:
    return _unary(x, np.negative, lambda v, out: -1.0)


def tanh(x: TensorLike) -> Tensor:
    return _unary(x, np.tanh, lambda v, out: 1.0 - out * out)


def sigmoid(x: TensorLike) -> Tensor:
    return _unary(x, expit, lambda v, out: out * (1.0 - out))


def relu(x: TensorLike) -> Tensor:
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda v, out: (v > 0.0).astype(np.float64))


def exp(x: TensorLike) -> Tensor:
    return _unary(x, np.exp, lambda v, out: out)


def absolute(x: TensorLike) -> Tensor:
    return _unary(x, np.abs, lambda v, out: np.sign(v))


def square(x: TensorLike) -> Tensor:
    return _unary(x, np.square, lambda v, out: 2.0 * v)


def concat_last_axis(*xs: TensorLike) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    lead = {x.shape[:-1] for x in xs}
    if len(lead) != 1 or any(x.data.ndim == 0 for x in xs):
        raise DimensionError(f"cannot concatenate shapes {[x.shape for x in xs]}")
    widths = [x.shape[-1] for x in xs]
    cuts = np.cumsum(widths)[:-1]
    out = np.concatenate([x.data for x in xs], axis=-1)
    return _record(out, xs, lambda g: tuple(np.split(g, cuts, axis=-1)))


_ELEMENTWISE: Dict[str, Callable[..., Tensor]] = {
    "add":              add,
    "sub":              sub,
    "mul":              mul,
    "div":              div,
    "tanh":             tanh,
    "sigmoid":          sigmoid,
    "relu":             relu,
    "exp":              exp,
    "abs":              absolute,
    "square":           square,
    "concat_last_axis": concat_last_axis,
}


def elementwise(op: str, *operands: TensorLike) -> Tensor:
    """Dispatch an elementwise op by name (add, sub, mul, tanh, sigmoid, relu, …)."""
    if op not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise op '{op}'")
    return _ELEMENTWISE[op](*operands)


# ── Structural ops ───────────────────────────────────────────────────────────

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    x, y = a.data, b.data
    return _record(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


def transpose(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {x.shape}")
    return _record(x.data.T.copy(), (x,), lambda g: (g.T,))


def reshape(x: TensorLike, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    original = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {original} to {shape}") from exc
    return _record(out, (x,), lambda g: (g.reshape(original),))


def slice_last_axis(x: TensorLike, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if not 0 <= start < stop <= x.shape[-1]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for shape {x.shape}")

    def vjp(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return _record(x.data[..., start:stop].copy(), (x,), vjp)


def contract_last(x: TensorLike, q: TensorLike) -> Tensor:
    """Batched matrix-vector product: (N×d×c, N×c) -> N×d."""
    x, q = as_tensor(x), as_tensor(q)
    if x.data.ndim != 3 or q.data.ndim != 2 or x.shape[0] != q.shape[0] or x.shape[2] != q.shape[1]:
        raise DimensionError(f"contract_last shape mismatch: {x.shape} and {q.shape}")
    xd, qd = x.data, q.data
    out = np.einsum("vdc,vc->vd", xd, qd)
    return _record(
        out, (x, q),
        lambda g: (g[:, :, None] * qd[:, None, :], np.einsum("vdc,vd->vc", xd, g)),
    )


def softmax_rows(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    return _record(
        out, (x,),
        lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),),
    )


# ── Composites ───────────────────────────────────────────────────────────────

def ones(shape: Tuple[int, ...]) -> Tensor:
    return Tensor(np.ones(shape))


def zeros(shape: Tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape))


def affine(x: TensorLike, weight: TensorLike, bias: TensorLike) -> Tensor:
    """x·W + 1·b, with b a 1×m row materialized across the rows of x."""
    x = as_tensor(x)
    return matmul(x, weight) + matmul(ones((x.shape[0], 1)), bias)


def broadcast_columns(column: TensorLike, width: int) -> Tensor:
    """N×1 -> N×width by repeating the column."""
    return matmul(column, ones((1, width)))


def row_sums(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    return matmul(x, ones((x.shape[1], 1)))
