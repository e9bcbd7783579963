"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays in float32 (default) or float64 (used for all
gradient verification). While gradient tracking is enabled, every operation
records its inputs and a vector-Jacobian closure; ``backward`` walks the
graph in reverse topological order and accumulates gradients into the leaf
tensors that were created with ``requires_grad=True``.

Shape conventions follow numpy: binary elementwise ops broadcast, matmul
treats leading axes as a stack of matrices. All ops are pure and
deterministic; the only randomness (dropout, initialization) is drawn from
generators passed in explicitly.
"""

from __future__ import annotations

import math
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


class no_grad:
    """Context manager that suspends graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        return arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    """A numpy array plus an optional gradient and graph linkage.

    Leaves are created directly (parameters, inputs); interior nodes are
    produced by the ops below. ``grad`` is populated on leaves with
    ``requires_grad=True`` after a ``backward`` call, and accumulates
    across calls until ``zero_grad``/manual reset.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjps: tuple = ()

    @classmethod
    def _from_op(cls, data: np.ndarray, parents, vjps) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjps = tuple(vjps)
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjps = ()
        return out

    # -- properties ---------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def is_leaf(self) -> bool:
        return not self._parents

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        data = self.data[key]

        def vjp(g, key=key, shape=self.shape, dtype=self.data.dtype):
            out = np.zeros(shape, dtype=dtype)
            out[key] += g
            return out

        return Tensor._from_op(np.ascontiguousarray(data), (self,), (vjp,))

    # -- reductions / shape ops as methods -----------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis: int, keepdims: bool = False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, axes)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _wrap_operand(x, ref) -> Tensor:
    """Wrap a non-tensor operand; scalars adopt the reference dtype."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.ndim == 0 or arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(ref.data.dtype if isinstance(ref, Tensor) else DEFAULT_DTYPE)
    return Tensor(arr)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise binary ops --------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap_operand(a, b), _wrap_operand(b, a)
    out = a.data + b.data
    return Tensor._from_op(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.shape),
            lambda g: _unbroadcast(g, b.shape),
        ),
    )


def sub(a, b) -> Tensor:
    a, b = _wrap_operand(a, b), _wrap_operand(b, a)
    out = a.data - b.data
    return Tensor._from_op(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.shape),
            lambda g: _unbroadcast(-g, b.shape),
        ),
    )


def mul(a, b) -> Tensor:
    a, b = _wrap_operand(a, b), _wrap_operand(b, a)
    out = a.data * b.data
    return Tensor._from_op(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.shape),
            lambda g: _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = _wrap_operand(a, b), _wrap_operand(b, a)
    out = a.data / b.data
    return Tensor._from_op(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = _wrap(a)
    return Tensor._from_op(-a.data, (a,), (lambda g: -g,))


# -- matmul -------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product ``a @ b`` with numpy stacking semantics.

    2-D operands give the ordinary matrix product; leading axes are treated
    as a broadcast stack of matrices. Backward produces gradients for both
    operands.

    Raises:
        DimensionError: if the inner extents disagree.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrix operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp_a(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        return _unbroadcast(ga, a.shape)

    def vjp_b(g):
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(gb, b.shape)

    return Tensor._from_op(out, (a, b), (vjp_a, vjp_b))


# -- elementwise unary ops -----------------------------------------------------


def relu(a) -> Tensor:
    # Subgradient 1/2 at exactly 0: zero-initialized biases put self-pair
    # positional encodings exactly on the kink, and the midpoint choice is
    # the one consistent with central finite differences there.
    a = _wrap(a)
    out = np.maximum(a.data, 0)

    def vjp(g):
        mask = (a.data > 0).astype(g.dtype)
        mask += 0.5 * (a.data == 0)
        return g * mask

    return Tensor._from_op(out, (a,), (vjp,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), (lambda g: g / (2.0 * out),))


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis, computed with row-max subtraction.

    Each row of the result is nonnegative and sums to 1; finite inputs can
    never overflow because the row maximum is subtracted before
    exponentiation.
    """
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (g - dot) * out

    return Tensor._from_op(out, (a,), (vjp,))


def dropout(a, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    a = _wrap(a)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    out = a.data * keep
    return Tensor._from_op(out, (a,), (lambda g: g * keep,))


# -- reductions ---------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return Tensor._from_op(
        np.asarray(out),
        (a,),
        (lambda g: _expand_reduced(g, a.shape, axis, keepdims).astype(a.data.dtype, copy=False),),
    )


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def vjp(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count).astype(a.data.dtype, copy=False)

    return Tensor._from_op(np.asarray(out), (a,), (vjp,))


def tmax(a, axis: int, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.max(axis=axis, keepdims=keepdims)

    def vjp(g):
        full = out if keepdims else np.expand_dims(out, axis)
        mask = (a.data == full).astype(a.data.dtype)
        mask /= mask.sum(axis=axis, keepdims=True)
        ge = g if keepdims else np.expand_dims(g, axis)
        return mask * ge

    return Tensor._from_op(np.asarray(out), (a,), (vjp,))


# -- shape ops ------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)
    return Tensor._from_op(out, (a,), (lambda g: g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(out, (a,), (lambda g: np.transpose(g, inv),))


def moveaxis(a, src: int, dst: int) -> Tensor:
    axes = list(range(_wrap(a).ndim))
    axes.insert(dst % len(axes), axes.pop(src % len(axes)))
    return transpose(a, axes)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return Tensor._from_op(out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def gather(a, idx) -> Tensor:
    """Index rows of ``a`` along axis 0 with an integer array.

    Output shape is ``idx.shape + a.shape[1:]``. Backward scatter-adds into
    the source, so repeated indices accumulate.
    """
    a = _wrap(a)
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(
            f"gather index out of range for leading extent {a.shape[0]}"
        )
    out = a.data[idx]

    def vjp(g):
        z = np.zeros(a.shape, dtype=a.data.dtype)
        np.add.at(z, idx.reshape(-1), g.reshape((-1,) + a.shape[1:]))
        return z

    return Tensor._from_op(out, (a,), (vjp,))


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE))


# -- backward -------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate gradients of every leaf tensor that influenced ``loss``.

    Args:
        loss: scalar (size-1) tensor produced by library operations.

    Raises:
        ValueError: if ``loss`` is not a scalar.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # Reverse topological order via iterative post-order DFS.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf():
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            if not parent.requires_grad:
                continue
            pg = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- layers ---------------------------------------------------------------------


class LinearLayer:
    """Affine map ``x @ weight + bias`` with weight [d_in, d_out]."""

    def __init__(self, weight: Tensor, bias: Tensor):
        if weight.ndim != 2 or bias.ndim != 1 or bias.shape[0] != weight.shape[1]:
            raise DimensionError(
                f"inconsistent linear layer shapes: weight {weight.shape}, bias {bias.shape}"
            )
        self.weight = weight
        self.bias = bias

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        x = _wrap(x)
        if x.shape[-1] != self.d_in:
            raise DimensionError(
                f"linear layer expects width {self.d_in}, got input shape {x.shape}"
            )
        return matmul(x, self.weight) + self.bias


class FeedForward:
    """Two linear layers with a rectifier between, applied position-wise.

    Rows of the input are processed independently; optional dropout acts on
    the hidden activation and is applied only when ``training`` is set.
    """

    def __init__(self, lin1: LinearLayer, lin2: LinearLayer, dropout_p: float = 0.0):
        if lin1.d_out != lin2.d_in:
            raise DimensionError(
                f"feed-forward widths disagree: {lin1.d_out} vs {lin2.d_in}"
            )
        if lin1.d_out < 1:
            raise DimensionError("feed-forward inner width must be >= 1")
        if not 0.0 <= dropout_p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {dropout_p}")
        self.lin1 = lin1
        self.lin2 = lin2
        self.dropout_p = dropout_p

    @property
    def d_in(self) -> int:
        return self.lin1.d_in

    @property
    def d_out(self) -> int:
        return self.lin2.d_out

    def __call__(self, x: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        h = relu(self.lin1(x))
        if training and self.dropout_p > 0.0:
            if rng is None:
                raise ValueError("training-mode dropout needs an rng")
            h = dropout(h, self.dropout_p, rng)
        return self.lin2(h)


class ParamStore:
    """Named, seeded collection of trainable tensors.

    Parameters are created in a fixed order from a single seeded generator,
    so the same seed always reproduces bit-identical values. Weight matrices
    use uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)); biases start
    at zero.
    """

    def __init__(self, seed: int, dtype=np.float64):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self._rng = np.random.default_rng(self.seed)
        self._params: dict[str, Tensor] = {}
        self._meta: dict[str, tuple] = {}

    def create(self, name: str, shape: tuple, init: str = "uniform_fan") -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        shape = tuple(int(s) for s in shape)
        if init == "uniform_fan":
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            fan_out = shape[1] if len(shape) > 1 else shape[0]
            a = math.sqrt(6.0 / (fan_in + fan_out))
            data = self._rng.uniform(-a, a, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "identity":
            if len(shape) != 2 or shape[0] != shape[1]:
                raise ValueError(f"identity init needs a square shape, got {shape}")
            data = np.eye(shape[0])
        else:
            raise ValueError(f"unknown init rule: {init}")
        t = Tensor(data.astype(self.dtype), requires_grad=True)
        self._params[name] = t
        self._meta[name] = (shape, init, self.seed)
        return t

    def linear(self, name: str, d_in: int, d_out: int, init: str = "uniform_fan") -> LinearLayer:
        w = self.create(f"{name}/weight", (d_in, d_out), init=init)
        b = self.create(f"{name}/bias", (d_out,), init="zeros")
        return LinearLayer(w, b)

    def ffn(self, name: str, d_in: int, d_hidden: int, d_out: int, dropout_p: float = 0.0) -> FeedForward:
        return FeedForward(
            self.linear(f"{name}/lin1", d_in, d_hidden),
            self.linear(f"{name}/lin2", d_hidden, d_out),
            dropout_p=dropout_p,
        )

    def __len__(self) -> int:
        return len(self._params)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def total_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def snapshot(self) -> dict:
        return {name: t.data.copy() for name, t in self._params.items()}

    def restore(self, state: dict) -> None:
        for name, data in state.items():
            self._params[name].data = data.copy()
