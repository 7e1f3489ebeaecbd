"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every op builds a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.  A
backward pass sorts the graph reachable from a scalar loss topologically and
replays the closures in reverse, accumulating into a :class:`Tape`.

Complex images are carried as real arrays with a trailing axis of length 2
(real, imaginary); see :func:`to_channels` / :func:`to_complex`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _as_array(data) -> np.ndarray:
    # a view, so freezing it never touches the caller's array
    return np.asarray(data, dtype=np.float64).view()


class Tensor:
    """Immutable float64 array node of the computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.data.flags.writeable = False
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @classmethod
    def from_op(cls, data, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        """Register a new node. Parents that carry no gradient are dropped from the graph."""
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.op = op
            out._parents = tuple(parents)
            out._backward = backward
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

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def backward(self) -> "Tape":
        """Populate ``.grad`` on every leaf that requires grad."""
        tape = backward(self)
        for node in tape.nodes:
            if node.op == "leaf" and node.requires_grad:
                node.grad = tape.grads.get(id(node))
        return tape

    # arithmetic sugar
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
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Tape:
    """Topologically ordered nodes reachable from a loss, with gradient accumulators."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self.grads: dict[int, np.ndarray] = {}

    def accumulate(self, node: Tensor, grad: np.ndarray) -> None:
        key = id(node)
        if key in self.grads:
            self.grads[key] = self.grads[key] + grad
        else:
            self.grads[key] = grad

    def grad_of(self, node: Tensor) -> np.ndarray:
        return self.grads.get(id(node), np.zeros_like(node.data))


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> Tape:
    """Run reverse-mode accumulation from a scalar ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape(_toposort(loss))
    tape.accumulate(loss, np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        if node._backward is None:
            continue
        upstream = tape.grads.get(id(node))
        if upstream is None:
            continue
        for parent, g in zip(node._parents, node._backward(upstream)):
            if g is not None and parent.requires_grad:
                tape.accumulate(parent, g)
    return tape


def grad(loss: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to ``inputs`` (zeros where unreachable)."""
    tape = backward(loss)
    return [tape.grad_of(t) for t in inputs]


# ---------------------------------------------------------------------------
# elementwise arithmetic

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor.from_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return Tensor.from_op(out, (a, b), back, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor.from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# reductions and shape ops

def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor.from_op(out, (a,), back, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    out = a.data.mean(axis=axis)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return Tensor.from_op(out, (a,), back, "mean")


def sumsq(a) -> Tensor:
    """Squared Euclidean norm of all entries."""
    a = as_tensor(a)
    flat = a.data.reshape(-1)
    return Tensor.from_op(np.dot(flat, flat), (a,), lambda g: (2.0 * g * a.data,), "sumsq")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inverse = None if axes is None else np.argsort(axes)
    return Tensor.from_op(
        np.ascontiguousarray(np.transpose(a.data, axes)), (a,),
        lambda g: (np.transpose(g, inverse),), "transpose",
    )


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return Tensor.from_op(a.data[index], (a,), back, "getitem")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def back(g):
        return [np.take(g, i, axis=axis) for i in range(len(ts))]

    return Tensor.from_op(out, ts, back, "stack")


# ---------------------------------------------------------------------------
# convolution

def _check_conv_shapes(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> None:
    if w.ndim != 4:
        raise ValueError(f"kernel must be 4-D [C_out, C_in, k, k], got shape {w.shape}")
    c_out, c_in, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel spatial axes must be equal and odd, got {kh}x{kw}")
    if x.ndim != 4:
        raise ValueError(f"input must be [C_in, H, W] or [B, C_in, H, W], got shape {x.shape}")
    if x.shape[1] != c_in:
        raise ValueError(f"input channel axis has {x.shape[1]} entries, kernel expects C_in={c_in}")
    if b.shape != (c_out,):
        raise ValueError(f"bias axis must have C_out={c_out} entries, got shape {b.shape}")


def conv2d(x, kernel, bias) -> Tensor:
    """Same-padded, stride-1 cross-correlation plus per-channel bias.

    ``x`` is ``[C_in, H, W]`` or batched ``[B, C_in, H, W]``; the output keeps
    the same batching.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    w, b = kernel.data, bias.data
    _check_conv_shapes(xd, w, b)
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # B, C_in, H, W, k, k
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # B, H, W, C_out
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b[None, :, None, None]

    def back(g):
        g4 = g[None] if unbatched else g
        gw = np.tensordot(g4, cols, axes=([0, 2, 3], [0, 2, 3]))
        gb = g4.sum(axis=(0, 2, 3))
        gp = np.pad(g4, ((0, 0), (0, 0), (p, p), (p, p)))
        gcols = sliding_window_view(gp, (k, k), axis=(2, 3))
        gx = np.tensordot(gcols, w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))
        gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        return (gx[0] if unbatched else gx, gw, gb)

    return Tensor.from_op(out[0] if unbatched else out, (x, kernel, bias), back, "conv2d")


# ---------------------------------------------------------------------------
# linear operators with explicit adjoints

class LinearOp:
    """A linear map given by a forward handle and (for differentiation) its adjoint.

    Both handles act on plain arrays.  The adjoint is taken with respect to
    the real inner product of the array representation.
    """

    def __init__(self, forward: Callable[[np.ndarray], np.ndarray],
                 adjoint: Callable[[np.ndarray], np.ndarray] | None, name: str = "linear"):
        self.forward = forward
        self.adjoint = adjoint
        self.name = name

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "LinearOp":
        mat = _as_array(matrix)
        return cls(lambda v: mat @ v, lambda v: mat.T @ v, name="matrix")


def linear_apply(op: LinearOp, x) -> Tensor:
    x = as_tensor(x)
    if x.requires_grad and op.adjoint is None:
        raise ValueError(f"linear op {op.name!r} has no adjoint; cannot record it for differentiation")
    return Tensor.from_op(op.forward(x.data), (x,), lambda g: (op.adjoint(g),), op.name)


# ---------------------------------------------------------------------------
# complex <-> real-channel helpers

def to_channels(z: np.ndarray) -> np.ndarray:
    """Complex array ``(...)`` to real ``(..., 2)``."""
    z = np.asarray(z, dtype=np.complex128)
    return np.stack([z.real, z.imag], axis=-1)


def to_complex(x) -> np.ndarray:
    """Real ``(..., 2)`` array (or Tensor) to complex ``(...)``."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.shape[-1] != 2:
        raise ValueError(f"trailing axis must hold (real, imag), got shape {arr.shape}")
    return arr[..., 0] + 1j * arr[..., 1]


def complex_linear(forward: Callable[[np.ndarray], np.ndarray],
                   adjoint: Callable[[np.ndarray], np.ndarray] | None,
                   name: str = "complex_linear") -> LinearOp:
    """Wrap a complex-linear map so it acts on the 2-channel real representation."""
    return LinearOp(
        lambda v: to_channels(forward(to_complex(v))),
        None if adjoint is None else (lambda v: to_channels(adjoint(to_complex(v)))),
        name=name,
    )
