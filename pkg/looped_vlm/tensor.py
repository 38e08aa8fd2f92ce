"""
Dense arrays with reverse-mode differentiation.

Every operation computes its value with numpy and, when gradients are being
recorded, attaches a closure that pushes the output gradient back to its
inputs. The graph is rebuilt on every forward pass (define-by-run), so loops
of data-dependent length need no special treatment.
"""

import contextlib
import math
import struct
import threading
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import NUMERIC
from .errors import NumericError, ShapeError

_grad_state = threading.local()
_DTYPES = {"float32": np.float32, "float64": np.float64}

Scalar = Union[int, float]


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run the enclosed operations without recording a graph (this thread only)."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def get_default_dtype() -> type:
    return getattr(_grad_state, "dtype", np.float32)


def set_default_dtype(name: str) -> None:
    """Set the dtype new leaves are created in, for the calling thread."""
    if name not in _DTYPES:
        raise ValueError(f"Unsupported precision {name!r}; expected one of {sorted(_DTYPES)}")
    _grad_state.dtype = _DTYPES[name]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the dtype used for new leaves ("float32" or "float64") in this thread."""
    previous = get_default_dtype()
    set_default_dtype(name)
    try:
        yield
    finally:
        _grad_state.dtype = previous


class Array:
    """
    A dense n-dimensional array that can take part in reverse-mode differentiation.

    Attributes:
        data: The numpy values (float32 by default, float64 in verification mode)
        requires_grad: Whether gradients flow into this array
        grad: Accumulated gradient of the same shape, or None
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _prev: Tuple["Array", ...] = (), _op: str = "leaf"):
        if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=get_default_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._prev = tuple(_prev)
        self._op = _op

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def op(self) -> str:
        return self._op

    @property
    def parents(self) -> Tuple["Array", ...]:
        return self._prev

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if grad.shape != self.data.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match array shape {self.data.shape}")
        self.grad = grad if self.grad is None else self.grad + grad

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Back-propagate from this array through the recorded graph.

        Args:
            grad: Seed gradient; defaults to 1 for single-element outputs

        Raises:
            NumericError: If this array is not part of a recorded graph
            ShapeError: If no seed is given for a multi-element output
        """
        if not self.requires_grad:
            raise NumericError("backward() called on an array that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a seed gradient for shape {self.shape}")
            grad = np.ones_like(self.data)
        order = Graph.from_output(self).nodes
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Array(shape={self.shape}, dtype={self.data.dtype}, op={self._op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, other)
        return add(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -other)
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Array":
        return transpose(self)

    def reshape(self, *shape) -> "Array":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> "Array":
        return sum_all(self)

    def mean(self) -> "Array":
        return mean(self)


class Parameter(Array):
    """A trainable leaf array, created in the current default precision."""

    def __init__(self, data):
        super().__init__(np.array(data, dtype=get_default_dtype(), copy=True), requires_grad=True, _op="param")


class Graph:
    """The recorded operations reachable from an output, in topological order."""

    def __init__(self, nodes: List[Array]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Array) -> "Graph":
        order: List[Array] = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._prev):
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    @property
    def detach_boundaries(self) -> List[Array]:
        """Computed values whose producers were cut (detach or no-grad outputs)."""
        return [n for n in self.nodes if not n._prev and n._op not in ("leaf", "param")]

    def count(self, op: str) -> int:
        return sum(1 for n in self.nodes if n._op == op)

    def contains(self, array: Array) -> bool:
        return any(n is array for n in self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def _result(data: np.ndarray, parents: Sequence[Array], op: str, backward: Callable[[np.ndarray], None]) -> Array:
    out = Array(data, _op=op)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward
    return out


def _as_array(x) -> Array:
    return x if isinstance(x, Array) else Array(x)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Array, b: Array, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a: Array, b: Array) -> Array:
    a, b = _as_array(a), _as_array(b)
    _check_broadcast(a, b, "add")

    def _backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), "add", _backward)


def sub(a: Array, b: Array) -> Array:
    a, b = _as_array(a), _as_array(b)
    _check_broadcast(a, b, "sub")

    def _backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), "sub", _backward)


def mul(a: Array, b: Array) -> Array:
    a, b = _as_array(a), _as_array(b)
    _check_broadcast(a, b, "mul")

    def _backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", _backward)


def scale(a: Array, c: Scalar) -> Array:
    c = float(c)

    def _backward(g):
        a._accumulate(g * c)

    return _result(a.data * c, (a,), "scale", _backward)


def add_scalar(a: Array, c: Scalar) -> Array:
    c = float(c)

    def _backward(g):
        a._accumulate(g)

    return _result(a.data + c, (a,), "add_scalar", _backward)


def matmul(a: Array, b: Array) -> Array:
    """
    Matrix product of a (m x k) and b (k x p).

    Raises:
        ShapeError: If either operand is not 2-D or the inner extents differ
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def _backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), "matmul", _backward)


def transpose(a: Array) -> Array:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D array, got {a.shape}")

    def _backward(g):
        a._accumulate(g.T)

    return _result(a.data.T, (a,), "transpose", _backward)


def reshape(a: Array, shape: Sequence[int]) -> Array:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}")

    def _backward(g):
        a._accumulate(g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), "reshape", _backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Array) -> Array:
    """GELU, tanh approximation."""
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))

    def _backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * dt))

    return _result(0.5 * x * (1.0 + t), (a,), "gelu", _backward)


def softmax_rows(a: Array) -> Array:
    """
    Row-wise softmax, computed with max-subtraction.

    Raises:
        NumericError: If the input contains NaN or infinite values
    """
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax_rows: input contains NaN or infinite values")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        a._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (a,), "softmax", _backward)


def rmsnorm(a: Array, gain: Array, eps: float = NUMERIC.rmsnorm_eps) -> Array:
    """Divide each row by sqrt(mean(x^2) + eps) and scale by gain."""
    if gain.ndim != 1 or a.shape[-1] != gain.shape[0]:
        raise ShapeError(f"rmsnorm: gain {gain.shape} does not match rows of {a.shape}")
    x = a.data
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    normed = x * inv

    def _backward(g):
        dn = g * gain.data
        a._accumulate(inv * (dn - normed * np.mean(dn * normed, axis=-1, keepdims=True)))
        gain._accumulate((g * normed).reshape(-1, gain.shape[0]).sum(axis=0))

    return _result(normed * gain.data, (a, gain), "rmsnorm", _backward)


def concat(arrays: Sequence[Array], axis: int = -1) -> Array:
    arrays = [_as_array(x) for x in arrays]
    ndim = arrays[0].ndim
    axis = axis % ndim
    for x in arrays[1:]:
        if x.ndim != ndim or any(x.shape[i] != arrays[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat: shapes {[y.shape for y in arrays]} disagree off axis {axis}")
    bounds = np.cumsum([0] + [x.shape[axis] for x in arrays])

    def _backward(g):
        for x, lo, hi in zip(arrays, bounds[:-1], bounds[1:]):
            index = [slice(None)] * ndim
            index[axis] = slice(int(lo), int(hi))
            x._accumulate(g[tuple(index)])

    return _result(np.concatenate([x.data for x in arrays], axis=axis), arrays, "concat", _backward)


def concat_channels(a: Array, b: Array) -> Array:
    """Column block [a | b]; leading extents must match."""
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_channels: leading extents differ: {a.shape} vs {b.shape}")
    return concat([a, b], axis=-1)


def detach(a: Array) -> Array:
    """Same values, no gradient to the producers of a."""
    return Array(a.data, requires_grad=False, _op="detach")


def gather_rows(a: Array, index, op: str = "gather_rows") -> Array:
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ShapeError(f"{op}: index must be 1-D, got shape {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeError(f"{op}: index out of range for {a.shape[0]} rows")

    def _backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        a._accumulate(grad)

    return _result(a.data[index], (a,), op, _backward)


def embedding(table: Array, ids) -> Array:
    """Lookup rows of table for integer ids (equivalent to one-hot @ table)."""
    return gather_rows(table, ids, op="embedding")


def slice_rows(a: Array, start: int, stop: int) -> Array:
    if not 0 <= start <= stop <= a.shape[0]:
        raise ShapeError(f"slice_rows: [{start}, {stop}) outside {a.shape[0]} rows")

    def _backward(g):
        grad = np.zeros_like(a.data)
        grad[start:stop] = g
        a._accumulate(grad)

    return _result(a.data[start:stop], (a,), "slice_rows", _backward)


def set_rows(a: Array, start: int, rows: Array) -> Array:
    """Copy of a with rows [start, start + len(rows)) replaced by rows."""
    stop = start + rows.shape[0]
    if rows.shape[1:] != a.shape[1:] or not 0 <= start <= stop <= a.shape[0]:
        raise ShapeError(f"set_rows: cannot place {rows.shape} at row {start} of {a.shape}")
    data = a.data.copy()
    data[start:stop] = rows.data

    def _backward(g):
        ga = g.copy()
        ga[start:stop] = 0
        a._accumulate(ga)
        rows._accumulate(g[start:stop])

    return _result(data, (a, rows), "set_rows", _backward)


def sum_all(a: Array) -> Array:
    def _backward(g):
        a._accumulate(np.ones_like(a.data) * g)

    return _result(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), "sum", _backward)


def mean(a: Array) -> Array:
    n = a.size

    def _backward(g):
        a._accumulate(np.ones_like(a.data) * (g / n))

    return _result(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), "mean", _backward)


def cross_entropy(logits: Array, targets) -> Array:
    """Mean cross-entropy of logits rows against integer targets."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    x = logits.data
    rows = np.arange(x.shape[0])
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    loss = np.mean(lse[:, 0] - x[rows, targets])

    def _backward(g):
        p = np.exp(x - lse)
        p[rows, targets] -= 1.0
        logits._accumulate(p * (g / x.shape[0]))

    return _result(np.asarray(loss, dtype=x.dtype), (logits,), "cross_entropy", _backward)


def attention(q: Array, k: Array, v: Array, heads: int, causal: bool = True, batch: int = 1) -> Array:
    """
    Multi-head scaled dot-product attention.

    q, k and v hold `batch` equal-length sequences stacked row-wise; a query
    only sees keys of its own sequence. Query row i of a sequence sits at
    position (n_k - n_q + i), so a single decode row attends to every cached
    key before it. With causal=False every query sees every key of its sequence.
    """
    rows_q, h = q.shape
    rows_k = k.shape[0]
    if (k.shape != (rows_k, h) or v.shape != (rows_k, h) or h % heads != 0
            or batch < 1 or rows_q % batch or rows_k % batch):
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}, heads {heads}, batch {batch}")
    nq, nk = rows_q // batch, rows_k // batch
    if causal and nq > nk:
        raise ShapeError(f"attention: {nq} causal queries against {nk} keys")
    dh = h // heads
    factor = 1.0 / math.sqrt(dh)

    def split(x: np.ndarray, n: int) -> np.ndarray:
        return x.reshape(batch, n, heads, dh).transpose(0, 2, 1, 3)

    def merge(x: np.ndarray, rows: int) -> np.ndarray:
        return x.transpose(0, 2, 1, 3).reshape(rows, h)

    Q, K, V = split(q.data, nq), split(k.data, nk), split(v.data, nk)
    scores = (Q @ np.swapaxes(K, -1, -2)) * factor
    if causal:
        allowed = np.arange(nk)[None, :] <= (np.arange(nq)[:, None] + (nk - nq))
        scores = np.where(allowed, scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    P = np.exp(scores)
    P = P / P.sum(axis=-1, keepdims=True)
    out = merge(P @ V, rows_q)

    def _backward(g):
        G = split(g, nq)
        dV = np.swapaxes(P, -1, -2) @ G
        dP = G @ np.swapaxes(V, -1, -2)
        dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True))
        dQ = (dS @ K) * factor
        dK = (np.swapaxes(dS, -1, -2) @ Q) * factor
        q._accumulate(merge(dQ, rows_q))
        k._accumulate(merge(dK, rows_k))
        v._accumulate(merge(dV, rows_k))

    return _result(out, (q, k, v), "attention", _backward)


def randn(shape: Sequence[int], std: float, rng: np.random.Generator) -> np.ndarray:
    """Normal fill in the default precision from a seeded generator."""
    return (rng.standard_normal(tuple(shape)) * std).astype(get_default_dtype())


def serialize_array(values: np.ndarray) -> bytes:
    """
    Encode an array as <u4 rank><u4 itemsize><u4 extent>*rank followed by
    the little-endian values.
    """
    values = np.ascontiguousarray(values)
    itemsize = values.dtype.itemsize
    if not np.issubdtype(values.dtype, np.floating) or itemsize not in (4, 8):
        raise ShapeError(f"serialize_array: unsupported dtype {values.dtype}")
    header = struct.pack("<II", values.ndim, itemsize) + struct.pack(f"<{values.ndim}I", *values.shape)
    return header + values.astype(f"<f{itemsize}").tobytes()


def deserialize_array(buffer: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Inverse of serialize_array; returns the array and the offset after it."""
    rank, itemsize = struct.unpack_from("<II", buffer, offset)
    offset += 8
    shape = struct.unpack_from(f"<{rank}I", buffer, offset)
    offset += 4 * rank
    count = int(np.prod(shape)) if rank else 1
    values = np.frombuffer(buffer, dtype=f"<f{itemsize}", count=count, offset=offset)
    offset += count * itemsize
    native = np.float32 if itemsize == 4 else np.float64
    return values.astype(native).reshape(shape), offset


def gradcheck(
    fn: Callable[[], Array],
    inputs: Sequence[Array],
    step: float = NUMERIC.gradcheck_step
) -> float:
    """
    Compare backward() against central finite differences.

    Args:
        fn: Zero-argument callable recomputing a scalar from the inputs
        inputs: Arrays (requires_grad=True) whose gradients are checked
        step: Finite-difference step

    Returns:
        The largest relative error ||analytic - numeric|| / (||analytic|| + ||numeric||)
        over the inputs
    """
    for x in inputs:
        x.zero_grad()
    fn().backward()
    analytic = [x.grad.copy() if x.grad is not None else np.zeros_like(x.data) for x in inputs]

    worst = 0.0
    with no_grad():
        for x, grad in zip(inputs, analytic):
            numeric = np.zeros_like(x.data)
            flat = x.data.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + step
                plus = fn().item()
                flat[i] = original - step
                minus = fn().item()
                flat[i] = original
                numeric.reshape(-1)[i] = (plus - minus) / (2.0 * step)
            denom = np.linalg.norm(grad) + np.linalg.norm(numeric)
            if denom > 0:
                worst = max(worst, float(np.linalg.norm(grad - numeric) / denom))
    return worst
