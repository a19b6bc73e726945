"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a NumPy buffer (float32 or float64). Every primitive
below records its inputs and a backward rule on the output tensor; calling
:func:`backward` on a scalar loss replays those records in reverse
topological order and deposits gradients on the leaves.

Broadcasting is intentionally narrow: operands must have identical shapes,
or one operand may be expanded along a contiguous run of size-1 axes at its
front or back (e.g. a ``(d,)`` bias added to ``(B, N, d)`` or an ``(N, 1)``
column scaling ``(N, d)``).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

_FLOATS = (np.float32, np.float64)
_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """N-dimensional float array with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in _FLOATS else np.float64
        arr = np.array(data, dtype=dtype)
        if arr.dtype not in _FLOATS:
            raise ContractError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        if any(s <= 0 for s in arr.shape):
            raise DimensionError(f"all dimension sizes must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _wrap(cls, arr, parents=(), backward=None, op="leaf"):
        out = cls.__new__(cls)
        out.data = arr
        out.grad = None
        out.op = op
        track = backward is not None and is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ContractError("division is only defined by a scalar")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        return backward(self)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float64, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float64, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x, dtype=np.float64) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericalError(f"{op} produced non-finite values")
    return arr


def _result(arr, parents, backward, op) -> Tensor:
    return Tensor._wrap(_finite(arr, op), parents, backward, op)


# ----------------------------------------------------------------------------
# broadcasting helpers


def _broadcast_shape(sa: tuple, sb: tuple, op: str) -> tuple:
    if sa == sb:
        return sa
    n = max(len(sa), len(sb))
    pa = (1,) * (n - len(sa)) + tuple(sa)
    pb = (1,) * (n - len(sb)) + tuple(sb)
    out = tuple(max(x, y) for x, y in zip(pa, pb))

    def expandable(small):
        if any(s not in (1, o) for s, o in zip(small, out)):
            return False
        # expanded axes must form a prefix or a suffix of the non-unit output axes
        expanded = [s != o for s, o in zip(small, out) if o != 1]
        m, k = len(expanded), sum(expanded)
        return expanded == [True] * k + [False] * (m - k) or expanded == [False] * (m - k) + [True] * k

    if (pa == out and expandable(pb)) or (pb == out and expandable(pa)):
        return out
    raise DimensionError(f"{op}: incompatible shapes {tuple(sa)} and {tuple(sb)}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ----------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _result(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), back, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def back(g):
        return (g * c,)

    return _result(x.data * np.asarray(c, dtype=x.dtype), (x,), back, "scale")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + _GELU_A * xd**3)
    t = np.tanh(inner)

    def back(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _result(0.5 * xd * (1.0 + t), (x,), back, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def back(g):
        return (g * y * (1.0 - y),)

    return _result(y, (x,), back, "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), back, "relu")


# ----------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``(..., m, k)``; ``b`` is ``(k, n)`` or shares ``a``'s leading
    axes. A 2-D ``a`` may also multiply a batched ``b``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), back, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), back, "softmax")


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and p.shape != (d,):
            raise DimensionError(f"layer_norm: {name} shape {p.shape} does not match width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data if gain is not None else None
    y = xhat * gd if gd is not None else xhat
    if bias is not None:
        y = y + bias.data
    parents = [x] + [p for p in (gain, bias) if p is not None]

    def back(g):
        dxhat = g * gd if gd is not None else g
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        lead = tuple(range(g.ndim - 1))
        if gain is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _result(y, parents, back, "layer_norm")


@lru_cache(maxsize=64)
def pool_matrix(h: int, w: int, p: int) -> np.ndarray:
    """``(p*p, h*w)`` averaging matrix of adaptive p x p pooling."""
    P = np.zeros((p * p, h * w))
    for i in range(p):
        r0, r1 = (i * h) // p, ((i + 1) * h) // p
        for j in range(p):
            c0, c1 = (j * w) // p, ((j + 1) * w) // p
            cell = np.zeros((h, w))
            cell[r0:r1, c0:c1] = 1.0 / ((r1 - r0) * (c1 - c0))
            P[i * p + j] = cell.ravel()
    P.setflags(write=False)
    return P


def avg_pool_2d(x: Tensor, p: int) -> Tensor:
    """Adaptive average pooling of ``(..., h, w, d)`` to ``(..., p*p, d)``.

    Cell ``(i, j)`` averages rows ``[ih//p, (i+1)h//p)`` and columns
    ``[jw//p, (j+1)w//p)``; cells are flattened row-major.
    """
    if x.ndim < 3:
        raise DimensionError(f"avg_pool_2d expects (..., h, w, d), got {x.shape}")
    *lead, h, w, d = x.shape
    if h < p or w < p:
        raise DimensionError(f"avg_pool_2d: grid {h}x{w} is smaller than pool size {p}")
    P = pool_matrix(h, w, p).astype(x.dtype, copy=False)
    flat = x.data.reshape(*lead, h * w, d)
    shape = x.shape

    def back(g):
        return ((P.T @ g).reshape(shape),)

    return _result(P @ flat, (x,), back, "avg_pool_2d")


# ----------------------------------------------------------------------------
# shape and indexing primitives


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def back(g):
        return (g.reshape(src),)

    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return Tensor._wrap(out, (x,), back, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))

    def back(g):
        return (np.transpose(g, inv),)

    return Tensor._wrap(np.transpose(x.data, axes), (x,), back, "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis, keepdims), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax
        ):
            raise DimensionError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, back, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ax = axis if axis >= 0 else axis + tensors[0].ndim + 1
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors]
    return concat(expanded, axis=ax)


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` along one axis."""
    ax = axis % x.ndim
    if not 0 <= start < stop <= x.shape[ax]:
        raise DimensionError(f"narrow: range [{start}, {stop}) outside axis of size {x.shape[ax]}")
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, stop)
    sl = tuple(sl)
    shape = x.shape
    dtype = x.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        out[sl] = g
        return (out,)

    return Tensor._wrap(x.data[sl], (x,), back, "narrow")


def _row_index(x: Tensor, idx) -> tuple:
    idx = np.asarray(idx, dtype=np.intp)
    n = x.shape[-2] if x.ndim >= 2 else 0
    if x.ndim == 2:
        index = (idx,)
    elif x.ndim == 3 and idx.ndim == 2 and idx.shape[0] == x.shape[0]:
        index = (np.arange(x.shape[0])[:, None], idx)
    else:
        raise DimensionError(f"row index of shape {idx.shape} does not fit tensor {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError(f"row index out of range for {n} rows")
    return index


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows along axis -2.

    A 2-D ``x`` acts as a lookup table for an index array of any shape; a
    3-D ``x`` takes a ``(B, n)`` index, one row list per batch item.
    """
    index = _row_index(x, idx)
    shape, dtype = x.shape, x.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._wrap(x.data[index], (x,), back, "gather_rows")


def scatter_rows(x: Tensor, idx, n_rows: int) -> Tensor:
    """Place rows of ``x`` at ``idx`` in a zero tensor with ``n_rows`` rows."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != x.shape[:-1]:
        raise DimensionError(f"scatter_rows: index shape {idx.shape} does not match rows of {x.shape}")
    out_shape = x.shape[:-2] + (n_rows, x.shape[-1])
    out = np.zeros(out_shape, dtype=x.dtype)
    probe = Tensor._wrap(out)
    index = _row_index(probe, idx)
    np.add.at(out, index, x.data)

    def back(g):
        return (g[index],)

    return Tensor._wrap(out, (x,), back, "scatter_rows")


# ----------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``(B, C)`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(labels.shape[0])
    loss = -logp[rows, labels].mean()

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / labels.shape[0]),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), back, "cross_entropy")


# ----------------------------------------------------------------------------
# reverse pass


class GradTape:
    """Nodes reachable from a loss, in forward (topological) order."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = self._toposort(root)

    @staticmethod
    def _toposort(root: Tensor) -> list:
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def leaves(self) -> list:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]

    def replay(self) -> None:
        grads = {id(self.root): np.ones_like(self.root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def backward(loss: Tensor) -> GradTape:
    """Populate ``.grad`` on every leaf that ``loss`` depends on."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = GradTape(loss)
    tape.replay()
    return tape


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> Tensor:
    """Trainable tensor from N(0, std^2) truncated to +-2 std (resampled)."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return Tensor((out * std).astype(dtype), requires_grad=True)


def param_zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def param_ones(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
