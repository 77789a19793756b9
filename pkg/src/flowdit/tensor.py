"""Dense N-d float tensors with reverse-mode automatic differentiation.

numpy owns the storage and the array arithmetic; this module owns the graph.
Every differentiable primitive records a backward closure on the active
``Tape``, and ``Tape.backward`` replays the records in reverse creation order,
so each node is visited exactly once and gradients of shared subexpressions
accumulate by summation.

Conventions:
  * storage is row-major contiguous float32 (training) or float64 (gradient
    checking); the dtype is fixed at tensor creation,
  * tensors are immutable after construction except for the ``grad`` buffer,
  * ops executed with no tape active build no graph (inference mode),
  * a tape is single-threaded; distinct tapes may live on distinct threads.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, expit

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class Tensor:
    """A dense float tensor, optionally tracked for gradients.

    ``data`` is a numpy array (float32 or float64), ``grad`` an accumulator of
    identical shape (populated by ``Tape.backward``), ``requires_grad`` marks
    leaves whose gradients the caller wants.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar; all graph logic lives in the module-level primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _raw(data: np.ndarray) -> Tensor:
    """Internal fast constructor: wrap an op result without copying."""
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = False
    t.name = None
    return t


# ---------------------------------------------------------------------------
# tape

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Use as a context manager around the forward computation; ``backward``
    replays the recorded closures in reverse order. Not thread-safe; use one
    tape per thread.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable]] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Tensor, seed=None):
        """Accumulate gradients of ``loss`` into every requires_grad leaf.

        ``loss`` must be a scalar unless an explicit ``seed`` array of the
        same shape is given.
        """
        for node, _ in self._nodes:
            node.grad = None
        if seed is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
            loss.grad = np.ones_like(loss.data)
        else:
            loss.grad = np.asarray(seed, dtype=loss.data.dtype).reshape(loss.data.shape)
        for node, grad_fn in reversed(self._nodes):
            if node.grad is not None:
                grad_fn(node.grad)


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _track(out: Tensor, grad_fn: Callable, *parents: Tensor) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape._nodes.append((out, grad_fn))
    return out


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return _raw(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and arithmetic primitives


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = _raw(a.data + b.data)

    def grad_fn(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _track(out, grad_fn, a, b)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = _raw(a.data - b.data)

    def grad_fn(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _track(out, grad_fn, a, b)


def neg(a: Tensor) -> Tensor:
    out = _raw(-a.data)

    def grad_fn(g):
        _accum(a, -g)

    return _track(out, grad_fn, a)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = _raw(a.data * b.data)

    def grad_fn(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _track(out, grad_fn, a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}")
    out = _raw(a.data @ b.data)

    def grad_fn(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _track(out, grad_fn, a, b)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = erf(x / _SQRT2)
    out = _raw(0.5 * x * (1.0 + inner))

    def grad_fn(g):
        local = 0.5 * (1.0 + inner) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        _accum(a, g * local.astype(x.dtype, copy=False))

    return _track(out, grad_fn, a)


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    out = _raw(s)

    def grad_fn(g):
        _accum(a, g * (s * (1.0 - s)))

    return _track(out, grad_fn, a)


# ---------------------------------------------------------------------------
# shape primitives


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = _raw(a.data.reshape(shape))

    def grad_fn(g):
        _accum(a, g.reshape(a.data.shape))

    return _track(out, grad_fn, a)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = _raw(np.transpose(a.data, axes))
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        _accum(a, np.transpose(g, inverse))

    return _track(out, grad_fn, a)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = _raw(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _track(out, grad_fn, *tensors)


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    axis = axis % a.data.ndim
    if sum(sizes) != a.data.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not cover extent {a.data.shape[axis]}")
    outs = []
    lo = 0
    for size in sizes:
        hi = lo + size
        idx = [slice(None)] * a.data.ndim
        idx[axis] = slice(lo, hi)
        piece = _raw(a.data[tuple(idx)])

        def grad_fn(g, lo=lo, hi=hi):
            buf = np.zeros_like(a.data)
            bidx = [slice(None)] * a.data.ndim
            bidx[axis] = slice(lo, hi)
            buf[tuple(bidx)] = g
            _accum(a, buf)

        outs.append(_track(piece, grad_fn, a))
        lo = hi
    return outs


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _raw(a.data.sum(axis=axis, keepdims=keepdims))

    def grad_fn(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape))

    return _track(out, grad_fn, a)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _raw(a.data.mean(axis=axis, keepdims=keepdims))
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        count = a.data.shape[axis]

    def grad_fn(g):
        g = g / count
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape))

    return _track(out, grad_fn, a)


# ---------------------------------------------------------------------------
# normalization primitives


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _raw(y)

    def grad_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _track(out, grad_fn, a)


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    n = a.data.shape[axis]
    if n < 2:
        raise ShapeError(f"layer_norm axis extent must be >= 2, got {n}")
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv
    out = _raw(y)

    def grad_fn(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * y).mean(axis=axis, keepdims=True)
        _accum(a, inv * (g - gm - y * gy))

    return _track(out, grad_fn, a)


# ---------------------------------------------------------------------------
# indexed primitives


def gather(a: Tensor, axis: int, indices) -> Tensor:
    idx = np.asarray(indices)
    out = _raw(np.take(a.data, idx, axis=axis))
    axis = axis % a.data.ndim

    def grad_fn(g):
        buf = np.zeros_like(a.data)
        sel = (slice(None),) * axis + (idx,)
        np.add.at(buf, sel, g)
        _accum(a, buf)

    return _track(out, grad_fn, a)


def scatter(src: Tensor, axis: int, indices, extent: int) -> Tensor:
    """Place ``src`` slices at ``indices`` along ``axis`` in a zero tensor.

    Indices must be unique; the backward pass gathers the incoming gradient
    back at the same indices.
    """
    idx = np.asarray(indices)
    if len(np.unique(idx)) != idx.size:
        raise ValueError("scatter indices must be unique")
    axis = axis % src.data.ndim
    shape = list(src.data.shape)
    shape[axis] = extent
    data = np.zeros(shape, dtype=src.data.dtype)
    sel = (slice(None),) * axis + (idx,)
    data[sel] = src.data
    out = _raw(data)

    def grad_fn(g):
        _accum(src, g[sel])

    return _track(out, grad_fn, src)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: ids of any integer shape -> ids.shape + table.shape[1:]."""
    ids = np.asarray(ids)
    flat = ids.ravel()
    out = _raw(np.take(table.data, flat, axis=0).reshape(ids.shape + table.data.shape[1:]))

    def grad_fn(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, flat, g.reshape((flat.size,) + table.data.shape[1:]))
        _accum(table, buf)

    return _track(out, grad_fn, table)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Worst-case central-difference comparison across checked elements."""

    max_rel_err: float
    worst_input: int
    worst_index: int
    analytic: float
    numeric: float
    checked: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol

    def __str__(self):
        return (
            f"grad_check: max rel err {self.max_rel_err:.3e} over {self.checked} elements "
            f"(worst input {self.worst_input} flat index {self.worst_index}: "
            f"analytic {self.analytic:.6e} vs numeric {self.numeric:.6e})"
        )


def grad_check(f, inputs: Sequence[Tensor], eps: float = 1e-5, sample: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` to central differences.

    Inputs must be float64. ``sample`` caps the number of perturbed elements
    (spread over inputs proportionally to size); None checks every element.
    Relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-3);
    the floor keeps finite-difference noise on near-zero entries from
    dominating the report.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.requires_grad = True
        t.grad = None

    with Tape() as tape:
        loss = f(*inputs)
        tape.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    total = sum(t.data.size for t in inputs)
    plan: list[tuple[int, int]] = []
    if sample is None or sample >= total:
        for i, t in enumerate(inputs):
            plan.extend((i, j) for j in range(t.data.size))
    else:
        rng = rng or np.random.default_rng(0)
        for i, t in enumerate(inputs):
            k = max(1, round(sample * t.data.size / total))
            k = min(k, t.data.size)
            for j in rng.choice(t.data.size, size=k, replace=False):
                plan.append((i, int(j)))

    worst = GradCheckReport(0.0, -1, -1, 0.0, 0.0, len(plan))
    for i, j in plan:
        flat = inputs[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        f_plus = float(f(*inputs).data)
        flat[j] = orig - eps
        f_minus = float(f(*inputs).data)
        flat[j] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[i].reshape(-1)[j])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
        if rel > worst.max_rel_err:
            worst = GradCheckReport(rel, i, j, a, numeric, len(plan))
    return worst


# ---------------------------------------------------------------------------
# serialization: little-endian f32 payload, u64 (rank, extents) header


def write_array(fh, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    fh.write(struct.pack("<Q", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype("<f4", copy=False).tobytes())


def read_array(fh) -> np.ndarray:
    (rank,) = struct.unpack("<Q", fh.read(8))
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    buf = fh.read(4 * count)
    if len(buf) != 4 * count:
        raise IOError("truncated tensor record")
    return np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
