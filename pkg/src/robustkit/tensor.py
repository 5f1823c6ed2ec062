"""Dense float64 tensors with tape-based reverse-mode differentiation.

Tensors are immutable: every operation returns a new tensor and the
underlying buffer is flagged read-only.  Gradients are obtained by running
operations inside a :class:`Tape` and calling :meth:`Tape.gradient`::

    with Tape() as tape:
        w = tape.watch(Tensor([[1.0, 2.0]]))
        loss = (w * w).sum()
    (gw,) = tape.gradient(loss, [w])
"""

from __future__ import annotations

import contextlib
import struct
import threading
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import NonFiniteError, ShapeError

__all__ = [
    "Tensor", "Tape", "layer_scope", "forward_backward", "finite_diff_check",
    "add", "sub", "mul", "div", "neg", "matmul", "tsum", "mean", "exp", "log",
    "sqrt", "power", "relu", "sigmoid", "tabs", "reshape", "transpose",
    "softmax", "log_softmax", "diag", "pairwise_distances", "cross_entropy",
    "tensor_to_bytes", "tensor_from_bytes", "write_tensor", "read_tensor",
]

_local = threading.local()


def _tapes() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def _current_layer():
    return getattr(_local, "layer", None)


@contextlib.contextmanager
def layer_scope(index):
    """Attribute shape and finiteness errors raised inside to layer ``index``."""
    previous = _current_layer()
    _local.layer = index
    try:
        yield
    finally:
        _local.layer = previous


def _where() -> str:
    layer = _current_layer()
    return "" if layer is None else f" at layer {layer}"


class Tensor:
    """Immutable dense float64 array, row-major."""

    __slots__ = ("_data",)
    __array_priority__ = 100

    def __init__(self, values, shape=None):
        data = np.array(values, dtype=np.float64, order="C")
        if shape is not None:
            data = data.reshape(tuple(shape))
        if any(extent <= 0 for extent in data.shape):
            raise ShapeError(f"tensor extents must be positive, got {data.shape}")
        if not np.isfinite(data).all():
            raise NonFiniteError("tensor values must be finite" + _where(), _current_layer())
        data.setflags(write=False)
        self._data = data

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        data = np.ascontiguousarray(data, dtype=np.float64)
        if data.flags.writeable:
            data.setflags(write=False)
        t._data = data
        return t

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the values (read-only)."""
        return self._data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else _not_scalar(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, values={np.array2string(self._data, threshold=8)})"

    def __len__(self):
        return self.shape[0]

    # operators
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __pow__(self, exponent): return power(self, exponent)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)


def _not_scalar(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("name", "out", "parents", "backward")

    def __init__(self, name, out, parents, backward):
        self.name = name
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Records differentiable operations executed while it is active.

    A tape belongs to the thread that entered it.  Only operations with at
    least one watched (or derived-from-watched) input are recorded.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._tracked: dict[int, Tensor] = {}

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().remove(self)
        return False

    def watch(self, t: Tensor) -> Tensor:
        self._tracked[id(t)] = t
        return t

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def _record(self, name, out, parents, backward):
        if any(id(p) in self._tracked for p in parents):
            self._tracked[id(out)] = out
            self.records.append(_Record(name, out, parents, backward))

    def gradient(self, target: Tensor, sources: Iterable[Tensor]) -> list[Tensor]:
        """Reverse-mode gradients of the scalar ``target`` w.r.t. ``sources``.

        Every recorded operation is visited once, in reverse execution order.
        Sources that do not influence the target get exact zeros.
        """
        if target.size != 1:
            raise ShapeError(f"gradient target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones(target.shape)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for parent, gp in zip(rec.parents, rec.backward(g)):
                if gp is None or id(parent) not in self._tracked:
                    continue
                key = id(parent)
                grads[key] = grads[key] + gp if key in grads else gp
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(Tensor._wrap(np.zeros(s.shape) if g is None else g.reshape(s.shape)))
        return out


def _emit(name: str, value: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"non-finite values produced by {name}{_where()}", _current_layer())
    out = Tensor._wrap(value)
    for tape in _tapes():
        tape._record(name, out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast(name, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast {a.shape} with {b.shape}{_where()}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast("add", a, b)
    return _emit("add", a._data + b._data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast("sub", a, b)
    return _emit("sub", a._data - b._data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast("mul", a, b)
    return _emit("mul", a._data * b._data, (a, b),
                 lambda g: (_unbroadcast(g * b._data, a.shape), _unbroadcast(g * a._data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast("div", a, b)
    return _emit("div", a._data / b._data, (a, b),
                 lambda g: (_unbroadcast(g / b._data, a.shape),
                            _unbroadcast(-g * a._data / (b._data * b._data), b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", -a._data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}{_where()}")
    return _emit("matmul", a._data @ b._data, (a, b),
                 lambda g: (g @ b._data.T, a._data.T @ g))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", np.asarray(a._data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    value = np.exp(a._data)
    return _emit("exp", value, (a,), lambda g: (g * value,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a._data)
    return _emit("log", value, (a,), lambda g: (g / a._data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore"):
        value = np.sqrt(a._data)
    return _emit("sqrt", value, (a,), lambda g: (g * 0.5 / value,))


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    p = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = a._data ** p
    return _emit("power", value, (a,), lambda g: (g * p * a._data ** (p - 1.0),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    # subgradient at 0 is 0
    mask = a._data > 0
    return _emit("relu", np.where(mask, a._data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    value = 0.5 * (1.0 + np.tanh(0.5 * a._data))
    return _emit("sigmoid", value, (a,), lambda g: (g * value * (1.0 - value),))


def tabs(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("abs", np.abs(a._data), (a,), lambda g: (g * np.sign(a._data),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        value = a._data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}{_where()}") from None
    return _emit("reshape", value, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("transpose", a._data.T, (a,), lambda g: (g.T,))


def softmax(a, axis=-1) -> Tensor:
    a = _as_tensor(a)
    z = np.exp(a._data - a._data.max(axis=axis, keepdims=True))
    s = z / z.sum(axis=axis, keepdims=True)
    return _emit("softmax", s, (a,),
                 lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis=-1) -> Tensor:
    a = _as_tensor(a)
    shifted = a._data - a._data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    value = shifted - lse
    s = np.exp(value)
    return _emit("log_softmax", value, (a,),
                 lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def diag(v) -> Tensor:
    """Square matrix with ``v`` on its diagonal."""
    v = _as_tensor(v)
    if v.ndim != 1:
        raise ShapeError(f"diag: expected a vector, got shape {v.shape}{_where()}")
    return _emit("diag", np.diag(v._data), (v,), lambda g: (np.diagonal(g).copy(),))


def _pairwise_sq(x: np.ndarray, block: int = 256) -> np.ndarray:
    n = x.shape[0]
    out = np.empty((n, n))
    for start in range(0, n, block):
        diff = x[start:start + block, None, :] - x[None, :, :]
        out[start:start + block] = (diff * diff).sum(axis=-1)
    return out


def pairwise_distances(x) -> Tensor:
    """Euclidean distance matrix between the rows of a 2-D tensor.

    Coincident rows (including the diagonal) get a zero subgradient.
    """
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"pairwise_distances: expected (n, d), got {x.shape}{_where()}")
    dist = np.sqrt(_pairwise_sq(x._data))

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(dist > 0, (g + g.T) / dist, 0.0)
        return (w.sum(axis=1)[:, None] * x._data - w @ x._data,)

    return _emit("pairwise_distances", dist, (x,), backward)


def cross_entropy(logits, onehot) -> Tensor:
    """Mean categorical cross-entropy of softmax(logits) against one-hot rows."""
    logits, onehot = _as_tensor(logits), _as_tensor(onehot)
    if logits.shape != onehot.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {onehot.shape}{_where()}")
    return -(onehot * log_softmax(logits)).sum(axis=1).mean()


def forward_backward(program: Callable, params: Mapping[str, object], inputs=None,
                     loss_reduction: Callable | None = None):
    """Run ``program(params, inputs)`` under a tape and differentiate.

    Returns the scalar loss and a dict of per-parameter gradient tensors.
    """
    with Tape() as tape:
        watched = {name: tape.watch(Tensor(value) if not isinstance(value, Tensor) else value)
                   for name, value in params.items()}
        x = None if inputs is None else _as_tensor(inputs)
        out = program(watched, x)
        loss = loss_reduction(out) if loss_reduction is not None else out
        if loss.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    grads = tape.gradient(loss, list(watched.values()))
    return loss.item(), dict(zip(watched, grads))


def finite_diff_check(program: Callable, point, step: float = 1e-6) -> float:
    """Largest relative disagreement between tape gradients and central differences.

    ``point`` is a tensor or a mapping of named tensors; ``program`` takes it in
    the same form and returns a scalar tensor.  The relative error of each
    coordinate is ``|analytic - fd| / max(|analytic|, 1e-12)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    named = isinstance(point, Mapping)
    values = {k: _as_tensor(v).numpy() for k, v in (point.items() if named else [("x", point)])}

    def call(arrays):
        tensors = {k: Tensor._wrap(a) for k, a in arrays.items()}
        return program(tensors if named else tensors["x"])

    with Tape() as tape:
        tensors = {k: tape.watch(Tensor._wrap(a)) for k, a in values.items()}
        out = program(tensors if named else tensors["x"])
    analytic = dict(zip(tensors, (g.numpy() for g in tape.gradient(out, list(tensors.values())))))

    worst = 0.0
    for name, base in values.items():
        for idx in np.ndindex(base.shape):
            probes = []
            for sign in (1.0, -1.0):
                shifted = base.copy()
                shifted[idx] += sign * step
                try:
                    probes.append(call({**values, name: shifted}).item())
                except NonFiniteError as exc:
                    raise NonFiniteError(f"finite-difference probe {name}{list(idx)} "
                                         f"is non-finite: {exc}") from exc
            numeric = (probes[0] - probes[1]) / (2.0 * step)
            a = analytic[name][idx]
            worst = max(worst, abs(a - numeric) / max(abs(a), 1e-12))
    return worst


# serialization: rank, extents, values -- all 8-byte little-endian

def tensor_to_bytes(t: Tensor) -> bytes:
    header = struct.pack(f"<q{t.ndim}q", t.ndim, *t.shape)
    return header + t.values.astype("<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0):
    """Decode one tensor record; returns ``(tensor, next_offset)``."""
    (rank,) = struct.unpack_from("<q", buf, offset)
    if rank < 0:
        raise ValueError(f"negative tensor rank {rank} at byte {offset}")
    offset += 8
    shape = struct.unpack_from(f"<{rank}q", buf, offset)
    offset += 8 * rank
    count = int(np.prod(shape)) if rank else 1
    if offset + 8 * count > len(buf):
        raise ValueError(f"truncated tensor record: need {8 * count} bytes at {offset}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64)
    return Tensor(data.reshape(shape)), offset + 8 * count


def write_tensor(fp, t: Tensor) -> None:
    fp.write(tensor_to_bytes(t))


def read_tensor(fp) -> Tensor:
    (rank,) = struct.unpack("<q", fp.read(8))
    shape = struct.unpack(f"<{rank}q", fp.read(8 * rank))
    count = int(np.prod(shape)) if rank else 1
    raw = fp.read(8 * count)
    if len(raw) != 8 * count:
        raise ValueError("truncated tensor record")
    return Tensor(np.frombuffer(raw, dtype="<f8").reshape(shape))
