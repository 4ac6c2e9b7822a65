"""Minimal dense-tensor engine with define-by-run reverse-mode differentiation.

Only the operations the segmentation network needs are provided. Every op is a
plain function taking :class:`Tensor` inputs and returning a new :class:`Tensor`;
when a :class:`Tape` is active on the current thread and any input requires a
gradient, the op appends a record holding its backward rule.

    >>> W = Tensor([[1.0, 0.0], [0.0, 1.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = sum_all(linear(Tensor([[1.0, 2.0]]), W))
    >>> tape.backward(y)
    >>> W.grad.tolist()
    [[1.0, 1.0], [2.0, 2.0]]
"""

from __future__ import annotations

import hashlib
import os
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "KinkRecorder", "BatchNormState", "ShapeError", "EmptyNeighborhoodError",
    "CheckpointError", "linear", "add", "mul", "scale", "reshape", "relu", "leaky_relu",
    "softmax_lastdim", "batch_norm", "max_reduce_neighbors", "sum_reduce_neighbors",
    "sum_axis", "concat_lastdim", "gather_rows", "scatter_mean", "straight_through_threshold",
    "cross_entropy", "sum_squares", "sum_all", "save_checkpoint", "load_checkpoint",
    "set_debug", "CHECKPOINT_MAGIC",
]

_local = threading.local()
_DEBUG = os.environ.get("SALA_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class EmptyNeighborhoodError(ValueError):
    """Raised when a center has no valid neighbor to reduce over."""

    def __init__(self, center: int):
        super().__init__(f"center {center} has an empty neighborhood")
        self.center = center


class CheckpointError(ValueError):
    pass


def set_debug(enabled: bool) -> None:
    """Toggle the finite-value check run after every forward op."""
    global _DEBUG
    _DEBUG = bool(enabled)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


@dataclass
class _Record:
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered log of differentiable ops recorded on the current thread.

    A tape is single-threaded; parallel workers each open their own.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs: tuple, output: Tensor, backward) -> None:
        output._leaf = False
        self.records.append(_Record(inputs, output, backward, op))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Propagate ``grad`` (default: ones for a scalar) from ``loss`` to every leaf.

        Leaf gradients accumulate into ``Tensor.grad``; intermediate gradients are
        discarded once consumed.
        """
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward() on non-scalar of shape {loss.shape} needs an explicit grad")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        leaves: dict[int, Tensor] = {}
        if loss._leaf and loss.requires_grad:
            leaves[id(loss)] = loss
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t._leaf:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = g.astype(t.dtype, copy=False)
            if g.shape != t.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
            t.grad = g.copy() if t.grad is None else t.grad + g


def _active_tape() -> Tape | None:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


class KinkRecorder:
    """Collects the branch decisions (ReLU masks, argmax picks, thresholds) of
    piecewise ops so a finite-difference check can tell when a stencil crosses
    a non-differentiable point.
    """

    def __init__(self) -> None:
        self._hash = hashlib.sha1()

    def __enter__(self) -> "KinkRecorder":
        self._prev = getattr(_local, "kinks", None)
        _local.kinks = self
        return self

    def __exit__(self, *exc) -> None:
        _local.kinks = self._prev

    def add(self, arr: np.ndarray) -> None:
        self._hash.update(np.ascontiguousarray(arr).tobytes())

    def digest(self) -> str:
        return self._hash.hexdigest()


def _note_kink(arr: np.ndarray) -> None:
    rec = getattr(_local, "kinks", None)
    if rec is not None:
        rec.add(arr)


def _make(data: np.ndarray, op: str, inputs: tuple, backward) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    tape = _active_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(op, inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and affine ops
# ---------------------------------------------------------------------------


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x @ W + b`` over the last axis of ``x``."""
    if x.shape[-1] != W.shape[0] or W.ndim != 2:
        raise ShapeError(f"linear: cannot multiply x{x.shape} by W{W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match W{W.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ W.data
    if b is not None:
        y = y + b.data
    out_shape = x.shape[:-1] + (W.shape[1],)

    def backward(g):
        g2 = g.reshape(-1, W.shape[1])
        dx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        dW = x2.T @ g2 if W.requires_grad else None
        db = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return dx, dW, db

    return _make(y.reshape(out_shape), "linear", (x, W, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        y = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(y, "add", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        y = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(y, "mul", (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _make(x.data * c, "scale", (x,), lambda g: (g * c,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    y = x.data.reshape(shape)
    return _make(y, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def relu(x: Tensor) -> Tensor:
    m = x.data > 0
    _note_kink(m)
    return _make(np.where(m, x.data, 0).astype(x.dtype, copy=False), "relu", (x,),
                 lambda g: (g * m,))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    m = x.data > 0
    _note_kink(m)
    s = x.dtype.type(slope)
    factor = np.where(m, x.dtype.type(1), s)
    return _make(x.data * factor, "leaky_relu", (x,), lambda g: (g * factor,))


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by subtracting the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) * y,)

    return _make(y, "softmax", (x,), backward)


@dataclass
class BatchNormState:
    """Running statistics for one normalization layer.

    Running estimates are bias-corrected by the accumulated momentum weight so
    that short training runs do not evaluate with the zero/one initial values.
    """

    num_features: int
    momentum: float = 0.99
    eps: float = 1e-5
    mean_acc: np.ndarray = field(default=None)  # type: ignore[assignment]
    var_acc: np.ndarray = field(default=None)  # type: ignore[assignment]
    weight: float = 0.0

    def __post_init__(self):
        if self.mean_acc is None:
            self.mean_acc = np.zeros(self.num_features, dtype=np.float64)
        if self.var_acc is None:
            self.var_acc = np.zeros(self.num_features, dtype=np.float64)

    def reset(self) -> None:
        self.mean_acc = np.zeros(self.num_features, dtype=np.float64)
        self.var_acc = np.zeros(self.num_features, dtype=np.float64)
        self.weight = 0.0

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        m = self.momentum
        self.mean_acc = m * self.mean_acc + (1 - m) * mean
        self.var_acc = m * self.var_acc + (1 - m) * var
        self.weight = m * self.weight + (1 - m)

    @property
    def running_mean(self) -> np.ndarray:
        if self.weight == 0:
            return np.zeros(self.num_features)
        return self.mean_acc / self.weight

    @property
    def running_var(self) -> np.ndarray:
        if self.weight == 0:
            return np.ones(self.num_features)
        return self.var_acc / self.weight


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState | None = None,
               training: bool = True) -> Tensor:
    """Per-feature normalization over every leading axis of ``x``.

    In training mode batch statistics are used (and folded into ``state``);
    in eval mode the stored running statistics are used.
    """
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: params {gamma.shape}/{beta.shape} for input {x.shape}")
    eps = state.eps if state is not None else 1e-5
    x2 = x.data.reshape(-1, C)
    if training or state is None:
        mean = x2.mean(axis=0)
        var = x2.var(axis=0)
        if state is not None and training:
            state.update(mean.astype(np.float64), var.astype(np.float64))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x2 - mean) * inv
        y = (xhat * gamma.data + beta.data).reshape(x.shape)
        n = x2.shape[0]

        def backward(g):
            g2 = g.reshape(-1, C)
            dgamma = (g2 * xhat).sum(axis=0)
            dbeta = g2.sum(axis=0)
            dxhat = g2 * gamma.data
            dx = None
            if x.requires_grad:
                dx = inv * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).sum(axis=0) / n)
                dx = dx.reshape(x.shape)
            return dx, dgamma, dbeta

        return _make(y.astype(x.dtype, copy=False), "batch_norm", (x, gamma, beta), backward)

    mean = state.running_mean.astype(x.dtype)
    inv = (1.0 / np.sqrt(state.running_var + eps)).astype(x.dtype)
    xhat = (x2 - mean) * inv
    y = (xhat * gamma.data + beta.data).reshape(x.shape)

    def backward_eval(g):
        g2 = g.reshape(-1, C)
        return ((g2 * gamma.data * inv).reshape(x.shape), (g2 * xhat).sum(axis=0), g2.sum(axis=0))

    return _make(y, "batch_norm_eval", (x, gamma, beta), backward_eval)


# ---------------------------------------------------------------------------
# neighbor-axis reductions and indexing
# ---------------------------------------------------------------------------


def _check_neighbor_mask(x: Tensor, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if x.ndim < 2 or mask.shape != x.shape[:2]:
        raise ShapeError(f"neighbor mask {mask.shape} does not match features {x.shape}")
    empty = ~mask.any(axis=1)
    if empty.any():
        raise EmptyNeighborhoodError(int(np.flatnonzero(empty)[0]))
    return mask


def max_reduce_neighbors(x: Tensor, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Max over axis 1 of ``x`` (N, k, ...) restricted to valid slots.

    Returns the reduced tensor and the argmax slot per output entry. Ties go to
    the lowest slot; gradient is routed only to the argmax slot.
    """
    mask = _check_neighbor_mask(x, mask)
    m = mask.reshape(mask.shape + (1,) * (x.ndim - 2))
    masked = np.where(m, x.data, -np.inf)
    arg = masked.argmax(axis=1)
    _note_kink(arg)
    y = np.take_along_axis(x.data, arg[:, None], axis=1)[:, 0]

    def backward(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, arg[:, None], g[:, None], axis=1)
        return (dx,)

    return _make(y, "max_reduce", (x,), backward), arg


def sum_reduce_neighbors(x: Tensor, mask: np.ndarray) -> Tensor:
    """Sum over axis 1 of ``x`` (N, k, ...) counting valid slots only."""
    mask = _check_neighbor_mask(x, mask)
    m = mask.reshape(mask.shape + (1,) * (x.ndim - 2)).astype(x.dtype)
    y = (x.data * m).sum(axis=1)

    def backward(g):
        return (np.expand_dims(g, 1) * m,)

    return _make(y, "sum_reduce", (x,), backward)


def sum_axis(x: Tensor, axis: int) -> Tensor:
    y = x.data.sum(axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(y, "sum_axis", (x,), backward)


def concat_lastdim(tensors: Sequence[Tensor]) -> Tensor:
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat: leading shapes {lead} and {t.shape[:-1]} differ")
    y = np.concatenate([t.data for t in tensors], axis=-1)
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _make(y, "concat", tuple(tensors), backward)


def segment_sum(values: np.ndarray, idx: np.ndarray, n_out: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n_out`` buckets; deterministic order, faster than ``np.add.at``."""
    idx = np.asarray(idx).reshape(-1)
    out = np.zeros((n_out,) + values.shape[1:], dtype=values.dtype)
    if idx.size == 0:
        return out
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    out[sorted_idx[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows of ``x`` (M, C) picked by an integer array of any shape."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {x.shape[0]} rows")
    y = x.data[idx]

    def backward(g):
        return (segment_sum(g.reshape((-1,) + x.shape[1:]).astype(x.dtype, copy=False), idx, x.shape[0]),)

    return _make(y, "gather", (x,), backward)


def scatter_mean(x: Tensor, idx: np.ndarray, n_out: int) -> Tensor:
    """Average rows of ``x`` (M, C) into ``n_out`` buckets given by ``idx`` (M,).

    Empty buckets yield zero rows.
    """
    idx = np.asarray(idx).reshape(-1)
    if idx.shape[0] != x.shape[0]:
        raise ShapeError(f"scatter_mean: {idx.shape[0]} indices for {x.shape[0]} rows")
    counts = np.bincount(idx, minlength=n_out).astype(x.dtype)
    y = segment_sum(x.data, idx, n_out)
    denom = np.maximum(counts, 1).reshape((-1,) + (1,) * (x.ndim - 1))
    y /= denom

    def backward(g):
        return ((g / denom)[idx],)

    return _make(y, "scatter_mean", (x,), backward)


def straight_through_threshold(x: Tensor, threshold: float = 0.5) -> Tensor:
    """Binarize at ``threshold`` (>= maps to 1); backward passes the gradient unchanged."""
    y = (x.data >= threshold).astype(x.dtype)
    _note_kink(y)
    return _make(y, "threshold_st", (x,), lambda g: (g,))


# ---------------------------------------------------------------------------
# losses and reductions to scalars
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (N, K) against integer ``labels``."""
    labels = np.asarray(labels)
    n = logits.shape[0]
    if n == 0:
        raise ValueError("cross_entropy: empty batch")
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels {labels.shape} for logits {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (logsum - z[rows, labels]).mean()

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1
        return (p * (g / n),)

    return _make(np.asarray(loss, dtype=logits.dtype), "cross_entropy", (logits,), backward)


def sum_squares(x: Tensor) -> Tensor:
    return _make(np.asarray((x.data * x.data).sum(), dtype=x.dtype), "sum_squares", (x,),
                 lambda g: (2 * g * x.data,))


def sum_all(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), "sum_all", (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SALAW1"


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, np.ndarray | Tensor]) -> int:
    """Write named tensors as little-endian float32; returns bytes written.

    Layout: magic, u64 tensor count, then per tensor: u32 name length, UTF-8
    name, u32 rank, u64 extents, raw f32 data.
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<Q", len(tensors))]
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    pos = len(CHECKPOINT_MAGIC)
    out: dict[str, np.ndarray] = {}
    try:
        (count,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * n > len(blob):
                raise CheckpointError(f"{path}: truncated data for {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * n
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return out


def parameters_to_arrays(params: Iterable[tuple[str, Tensor]]) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in params}
