"""
ndgrad - dense numpy arrays with reverse-mode automatic differentiation.

A Tensor wraps a numpy array. When any input of a primitive requires
gradients, the output keeps references to its inputs plus a vector-Jacobian
product closure; ``backward`` orders those nodes topologically into a
ComputationRecord and replays the chain rule in reverse.

Also houses the seeded random streams, the NDG1 tensor codec and the NDGC
named-tensor container used by datasets and checkpoints.
"""

import hashlib
import json
import logging
import struct
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from modules.error_handler import (
    BackwardError,
    NonFiniteError,
    NumericError,
    SerializationError,
    ShapeError,
)

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]

_settings = {"dtype": np.float64, "log_eps": 1e-12}
_local = threading.local()


def set_default_dtype(dtype):
    """Select float64 (tests) or float32 (training) for new tensors"""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise NumericError("set_default_dtype", f"unsupported dtype {dtype}")
    _settings["dtype"] = dtype.type


def get_default_dtype():
    return _settings["dtype"]


def set_log_epsilon(eps: Optional[float]):
    """Clamp applied inside log(); None or 0 makes non-positive inputs an error"""
    _settings["log_eps"] = eps


def get_log_epsilon() -> Optional[float]:
    return _settings["log_eps"]


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def _anomaly_enabled() -> bool:
    return getattr(_local, "anomaly", False)


@contextmanager
def no_grad():
    """Evaluate without recording any computation"""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


@contextmanager
def detect_anomaly():
    """Make every primitive verify that its output is finite"""
    previous = _anomaly_enabled()
    _local.anomaly = True
    try:
        yield
    finally:
        _local.anomaly = previous


class Tensor:
    """Dense real array with an optional gradient"""

    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        self.data = np.array(data, dtype=dtype, copy=True) if not isinstance(data, np.ndarray) or data.dtype != dtype else data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._vjp: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None
        self._op = "leaf"
        self._consumed = False

    # Basic properties

    @property
    def shape(self) -> Tuple[int, ...]:
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

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="only single-element tensors convert to float")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}, op={self._op}{label})"

    # Operators

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, key): return slice_(self, key)

    def sum(self, axis=None, keepdims: bool = False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return mean(self, axis, keepdims)
    def max(self, axis=None, keepdims: bool = False): return max_(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else (axes or None))
    def exp(self): return exp(self)
    def log(self, eps: Optional[float] = None): return log(self, eps)
    def tanh(self): return tanh(self)
    def softmax(self, axis: int = -1): return softmax(self, axis)
    def log_softmax(self, axis: int = -1): return log_softmax(self, axis)

    def backward(self):
        backward(self)


def parameter(data: ArrayLike, name: Optional[str] = None, dtype=None) -> Tensor:
    """Leaf tensor that collects gradients"""
    return Tensor(np.array(data, dtype=dtype or get_default_dtype()), requires_grad=True, name=name)


def as_tensor(value: Union[Tensor, ArrayLike], like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype or get_default_dtype()))


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.zero_grad()


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], op: str, vjp) -> Tensor:
    if _anomaly_enabled() and not np.all(np.isfinite(data)):
        raise NonFiniteError(op, f"output shape {data.shape}")
    requires = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, dtype=data.dtype)
    out._op = op
    if requires:
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to an operand's shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(a, b, op: str) -> Tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise ShapeError(op, np.shape(a), np.shape(b), detail="at least one operand must be a Tensor")
    like = a if isinstance(a, Tensor) else b
    a, b = as_tensor(a, like), as_tensor(b, like)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None
    return a, b


# Elementwise primitives

def add(a, b) -> Tensor:
    a, b = _binary(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), "add", vjp)


def sub(a, b) -> Tensor:
    a, b = _binary(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), "sub", vjp)


def mul(a, b) -> Tensor:
    a, b = _binary(a, b, "mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), "mul", vjp)


def div(a, b) -> Tensor:
    a, b = _binary(a, b, "div")
    if np.any(b.data == 0):
        raise NumericError("div", "division by zero")

    def vjp(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / (b.data * b.data), b.shape)

    return _make(a.data / b.data, (a, b), "div", vjp)


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), "neg", lambda g: (-g,))


def power(x: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = np.power(x.data, exponent)

    def vjp(g):
        return (g * exponent * np.power(x.data, exponent - 1.0),)

    return _make(out, (x,), "power", vjp)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), "exp", lambda g: (g * out,))


def log(x: Tensor, eps: Optional[float] = None) -> Tensor:
    """Natural log; inputs below eps are clamped (no gradient through the clamp)"""
    eps = get_log_epsilon() if eps is None else eps
    if eps:
        clamped = np.maximum(x.data, eps)
        active = x.data >= eps
    else:
        if np.any(x.data <= 0):
            raise NumericError("log", "non-positive input and no epsilon clamp configured")
        clamped = x.data
        active = None

    def vjp(g):
        grad = g / clamped
        if active is not None:
            grad = np.where(active, grad, 0.0).astype(clamped.dtype)
        return (grad,)

    return _make(np.log(clamped), (x,), "log", vjp)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), "tanh", lambda g: (g * (1.0 - out * out),))


# Linear algebra

def matmul(a, b) -> Tensor:
    a, b = _binary_matmul(a, b)
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), "matmul", vjp)


def _binary_matmul(a, b) -> Tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b
    a, b = as_tensor(a, like), as_tensor(b, like)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dimensions do not broadcast") from None
    return a, b


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: int = 0) -> Tensor:
    """Direct stride-1 convolution, NHWC input, (kh, kw, in, out) weights"""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[3],):
        raise ShapeError("conv2d", weight.shape, bias.shape, detail="bias must have one entry per output channel")
    kh, kw, _, cout = weight.shape
    p = int(padding)
    batch, height, width, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    out_h, out_w = height + 2 * p - kh + 1, width + 2 * p - kw + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError("conv2d", x.shape, weight.shape, detail=f"padding {p} leaves no output")

    out = np.zeros((batch, out_h, out_w, cout), dtype=np.result_type(x.data, weight.data))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + out_h, j:j + out_w, :] @ weight.data[i, j]
    if bias is not None:
        out += bias.data

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(weight.data)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + out_h, j:j + out_w, :] += g @ weight.data[i, j].T
                gw[i, j] = np.tensordot(xp[:, i:i + out_h, j:j + out_w, :], g, axes=([0, 1, 2], [0, 1, 2]))
        gx = gxp[:, p:p + height, p:p + width, :]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, "conv2d", vjp)


# Reductions

def _normalize_axes(axis, ndim: int) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(a % ndim for a in axes))


def _expand_reduced(g: np.ndarray, axes, shape, keepdims: bool) -> np.ndarray:
    if axes is None:
        g = np.reshape(g, (1,) * len(shape)) if not keepdims else g
    elif not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def vjp(g):
        return (np.array(_expand_reduced(g, axes, x.shape, keepdims)),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), "sum", vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axes, keepdims), 1.0 / count)


def max_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    kept = np.max(x.data, axis=axes, keepdims=True)
    out = kept if keepdims else np.max(x.data, axis=axes, keepdims=False)

    def vjp(g):
        winners = (x.data == kept)
        share = winners / winners.sum(axis=axes, keepdims=True)
        return (share * _expand_reduced(g, axes, x.shape, keepdims),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), "max", vjp)


# Shape manipulation

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return _make(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), "transpose", lambda g: (np.transpose(g, inverse),))


def slice_(x: Tensor, key) -> Tensor:
    try:
        out = x.data[key]
    except IndexError:
        raise ShapeError("slice", x.shape, detail=f"index {key!r} out of range") from None

    def vjp(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, key, g)
        return (grad,)

    return _make(np.array(out), (x,), "slice", vjp)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concatenate", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), "concatenate", vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        position = axis % (t.ndim + 1)
        expanded.append(reshape(t, t.shape[:position] + (1,) + t.shape[position:]))
    return concatenate(expanded, axis=axis)


# Normalized exponential

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), "softmax", vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - logsum

    def vjp(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, (x,), "log_softmax", vjp)


# Integer indexing

def gather(x: Tensor, index: np.ndarray, axis: int = -1) -> Tensor:
    """Pick entries along an axis (take_along_axis); index has x's rank"""
    index = np.asarray(index, dtype=np.int64)
    axis = axis % x.ndim
    if index.ndim != x.ndim:
        raise ShapeError("gather", x.shape, index.shape, detail="index must have the same rank")
    if index.size and (index.min() < 0 or index.max() >= x.shape[axis]):
        raise ShapeError("gather", x.shape, index.shape, detail="index out of range")
    try:
        out = np.take_along_axis(x.data, index, axis=axis)
    except ValueError:
        raise ShapeError("gather", x.shape, index.shape) from None

    def vjp(g):
        grad = np.zeros_like(x.data)
        grid = list(np.ix_(*[np.arange(n) for n in index.shape]))
        grid[axis] = index
        np.add.at(grad, tuple(grid), g)
        return (grad,)

    return _make(out, (x,), "gather", vjp)


def take(x: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Select whole slices along an axis by a 1-D integer index"""
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    if indices.ndim != 1:
        raise ShapeError("take", x.shape, indices.shape, detail="indices must be 1-D")
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[axis]):
        raise ShapeError("take", x.shape, indices.shape, detail="index out of range")
    out = np.take(x.data, indices, axis=axis)

    def vjp(g):
        grad = np.zeros_like(x.data)
        np.add.at(np.moveaxis(grad, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (grad,)

    return _make(out, (x,), "take", vjp)


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup for integer arrays of any shape"""
    indices = np.asarray(indices, dtype=np.int64)
    rows = take(table, indices.reshape(-1), axis=0)
    return reshape(rows, indices.shape + table.shape[1:])


# Reverse pass

class ComputationRecord:
    """Topologically ordered primitives between the leaves and a loss"""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: List[Tensor] = self._toposort(root)

    @staticmethod
    def _toposort(root: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def ops(self) -> List[str]:
        return [node._op for node in self.nodes]

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor):
    """Populate .grad on every requires_grad ancestor of a scalar loss"""
    if loss.data.size != 1:
        raise BackwardError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise BackwardError("loss is not connected to any tensor that requires gradients")
    if loss._consumed:
        raise BackwardError("backward() already ran on this loss; recompute it before calling again")

    record = ComputationRecord(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    for node in reversed(record.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, parent_grad in zip(node._parents, node._vjp(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent_grad.shape != parent.shape:
                raise BackwardError(f"{node._op} returned gradient {parent_grad.shape} for input {parent.shape}")
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad

    loss._consumed = True
    logger.debug(f"backward replayed {len(record)} nodes")


def grad_check(f: Callable[[Tensor], Tensor], x: Union[Tensor, np.ndarray], step: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients"""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if not np.all(np.isfinite(base)):
        raise NonFiniteError("grad_check", "input contains non-finite values")

    leaf = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    with detect_anomaly():
        out = f(leaf)
        if out.data.size != 1:
            raise BackwardError(f"grad_check needs a scalar function, got shape {out.shape}")
        backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    def value(arr):
        with no_grad(), detect_anomaly():
            return float(f(Tensor(arr, dtype=np.float64)).data.reshape(()))

    numeric = np.zeros_like(base)
    for index in np.ndindex(base.shape):
        plus, minus = base.copy(), base.copy()
        plus[index] += step
        minus[index] -= step
        numeric[index] = (value(plus) - value(minus)) / (2.0 * step)

    error = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    return float(error.max()) if error.size else 0.0


# Seeded random streams

def _stream_word(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(part).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Counter-based (Philox) generator for the stream (seed, *stream)"""
    words = [_stream_word(seed)] + [_stream_word(part) for part in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


# NDG1 codec

MAGIC = b"NDG1"
CONTAINER_MAGIC = "NDGC1"


def tensor_to_bytes(array: Union[Tensor, np.ndarray]) -> bytes:
    """magic, u32 rank, u32 extents, then little-endian IEEE-754 payload"""
    arr = np.asarray(array.data if isinstance(array, Tensor) else array)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    if arr.dtype.itemsize not in (4, 8):
        arr = arr.astype(np.float64)
    if any(extent < 1 for extent in arr.shape):
        raise SerializationError(f"NDG1 requires positive extents, got {arr.shape}")
    little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(little).tobytes()


def tensor_from_bytes(buffer: bytes) -> np.ndarray:
    if len(buffer) < 8 or buffer[:4] != MAGIC:
        raise SerializationError("missing NDG1 magic bytes")
    rank = struct.unpack_from("<I", buffer, 4)[0]
    offset = 8 + 4 * rank
    if len(buffer) < offset:
        raise SerializationError(f"truncated NDG1 header for rank {rank}")
    shape = struct.unpack_from(f"<{rank}I", buffer, 8)
    count = int(np.prod(shape)) if rank else 1
    payload = len(buffer) - offset
    if payload == 8 * count:
        dtype = np.dtype("<f8")
    elif payload == 4 * count:
        dtype = np.dtype("<f4")
    else:
        raise SerializationError(f"NDG1 payload of {payload} bytes does not fit shape {shape}")
    arr = np.frombuffer(buffer, dtype=dtype, offset=offset, count=count).reshape(shape)
    return arr.astype(dtype.newbyteorder("="))


def save_tensor(path: Union[str, Path], array: Union[Tensor, np.ndarray]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(tensor_to_bytes(array))


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise SerializationError(f"tensor file not found: {path}")
    return tensor_from_bytes(path.read_bytes())


def save_named(path: Union[str, Path], tensors: Dict[str, Union[Tensor, np.ndarray]], meta: Optional[dict] = None):
    """Write named NDG1 blobs behind a text index (NDGC container)"""
    blobs = []
    for name in sorted(tensors):
        if not name or any(ch.isspace() for ch in name):
            raise SerializationError(f"tensor name {name!r} must be non-empty without whitespace")
        blobs.append((name, tensor_to_bytes(tensors[name])))

    lines = [CONTAINER_MAGIC, "meta " + json.dumps(meta or {}, sort_keys=True)]
    offset = 0
    for name, blob in blobs:
        lines.append(f"tensor {name} {offset} {len(blob)}")
        offset += len(blob)
    lines.append("end")
    index = ("\n".join(lines) + "\n").encode()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(index)
        for _, blob in blobs:
            f.write(blob)


def load_named(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise SerializationError(f"container not found: {path}")
    raw = path.read_bytes()
    end_marker = raw.find(b"\nend\n")
    if not raw.startswith(CONTAINER_MAGIC.encode()) or end_marker < 0:
        raise SerializationError(f"{path} is not an NDGC container")
    payload_start = end_marker + len(b"\nend\n")
    meta: dict = {}
    tensors: Dict[str, np.ndarray] = {}
    for line in raw[:end_marker].decode().splitlines()[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            meta = json.loads(rest)
        elif kind == "tensor":
            name, start, length = rest.split(" ")
            begin = payload_start + int(start)
            tensors[name] = tensor_from_bytes(raw[begin:begin + int(length)])
        else:
            raise SerializationError(f"unknown index line {line!r} in {path}")
    return tensors, meta
