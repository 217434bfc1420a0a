"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: the only consumers are the diarization network and its
training loop. Values are numpy arrays in float64 throughout (gradient
checks need the precision and nothing here is speed-critical enough to
trade it away). Differentiable ops record a backward closure on an explicit
Tape; replaying the tape in reverse visits each op exactly once.

Broadcasting is restricted to two modes: equal shapes and scalar-vs-tensor.
Anything else raises ShapeError rather than silently following numpy rules.
"""
from __future__ import annotations

import struct
import threading
from typing import Callable, Sequence

import numpy as np

BCE_EPS = 1e-7


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class DomainError(AutodiffError):
    pass


class TapeError(AutodiffError):
    pass


_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager around a forward pass; ``backward`` then walks
    the record in reverse execution order. A tape is single-use: a second
    backward over the same tape raises TapeError.
    """

    __slots__ = ("_ops", "consumed")

    def __init__(self):
        self._ops: list = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self._ops)


class Tensor:
    """A dense float64 array plus grad bookkeeping.

    ``requires_grad`` marks leaves (parameters); tensors produced by taped
    ops carry a reference to the tape that created them.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def record(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Create an op output, registering ``backward`` on the active tape.

    ``backward(gout)`` must return one gradient array (or None) per entry of
    ``inputs``. Recording only happens when a tape is active and some input
    requires grad, so inference outside a tape pays no bookkeeping cost.
    This is also the extension point for fused ops with hand-written
    backward passes (see layers.lstm_seq).
    """
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape._ops.append((out, tuple(inputs), backward))
    return out


def backward(loss: Tensor) -> dict:
    """Reverse-replay the tape that produced ``loss``.

    Returns a map of requires_grad leaf Tensor -> gradient array, and sets
    ``leaf.grad``. The loss must be scalar (size 1) and the tape single-use.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise TapeError("backward requires a scalar loss tensor")
    tape = loss.tape
    if tape is None:
        raise TapeError("loss was not produced by taped operations")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward call")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, bw in reversed(tape._ops):
        gout = grads.pop(id(out), None)
        if gout is None:
            continue
        gins = bw(gout)
        for t, g in zip(inputs, gins):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                holders[key] = t

    leaf_grads: dict[Tensor, np.ndarray] = {}
    for key, g in grads.items():
        t = holders[key]
        if t.tape is None and t.requires_grad:
            g = np.asarray(g, dtype=np.float64).reshape(t.data.shape)
            t.grad = g
            leaf_grads[t] = g
    return leaf_grads


# ---------------------------------------------------------------------------
# elementwise ops (equal-shape or scalar-vs-tensor only)

def _check_pair(a: Tensor, b: Tensor):
    if a.data.shape == b.data.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"unsupported broadcast: {a.data.shape} vs {b.data.shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair(a, b)
    out = a.data + b.data

    def bw(gout):
        return _reduce_to(gout, a.data.shape), _reduce_to(gout, b.data.shape)

    return record(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair(a, b)
    out = a.data - b.data

    def bw(gout):
        return _reduce_to(gout, a.data.shape), _reduce_to(-gout, b.data.shape)

    return record(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair(a, b)
    out = a.data * b.data

    def bw(gout):
        return (_reduce_to(gout * b.data, a.data.shape),
                _reduce_to(gout * a.data, b.data.shape))

    return record(out, (a, b), bw)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(gout):
        return (gout * out * (1.0 - out),)

    return record(out, (x,), bw)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)

    def bw(gout):
        return (gout * (1.0 - out * out),)

    return record(out, (x,), bw)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0

    def bw(gout):
        return (gout * mask,)

    return record(out, (x,), bw)


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log of non-positive value; clamp before calling")
    out = np.log(x.data)

    def bw(gout):
        return (gout / x.data,)

    return record(out, (x,), bw)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)

    def bw(gout):
        return (gout * out,)

    return record(out, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def bw(gout):
        return gout @ b.data.T, a.data.T @ gout

    return record(out, (a, b), bw)


def affine(x, w, b) -> Tensor:
    """x @ w + b for 2-D x, fused into one taped op (the network's hottest
    non-recurrent path)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeError("affine expects x (n,i), w (i,o), b (o,)")
    if x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"affine shapes disagree: {x.data.shape} @ {w.data.shape} + {b.data.shape}")
    out = x.data @ w.data + b.data

    def bw(gout):
        return gout @ w.data.T, x.data.T @ gout, gout.sum(axis=0)

    return record(out, (x, w, b), bw)


def bmm(a, b) -> Tensor:
    """Batched matmul over a leading group axis: (G,m,k) @ (G,k,n)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError("bmm expects 3-D operands")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
        raise ShapeError(f"bmm shapes disagree: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def bw(gout):
        return gout @ b.data.swapaxes(1, 2), a.data.swapaxes(1, 2) @ gout

    return record(out, (a, b), bw)


def softmax_rows(x) -> Tensor:
    """Stable softmax along the last axis; every row sums to 1."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(gout):
        dot = (gout * out).sum(axis=-1, keepdims=True)
        return ((gout - dot) * out,)

    return record(out, (x,), bw)


# ---------------------------------------------------------------------------
# shape ops

def concat(parts: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(p) for p in parts]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bw(gout):
        pieces = np.split(gout, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(pieces)

    return record(out, tensors, bw)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    n = x.data.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis of size {n}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx].copy()

    def bw(gout):
        g = np.zeros_like(x.data)
        g[idx] = gout
        return (g,)

    return record(out, (x,), bw)


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def bw(gout):
        return (np.transpose(gout, inv),)

    return record(out, (x,), bw)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = np.reshape(x.data, shape)

    def bw(gout):
        return (np.reshape(gout, x.data.shape),)

    return record(out, (x,), bw)


def gather_columns(x, indices) -> Tensor:
    """Select columns of a 2-D tensor by index list (duplicates allowed)."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("gather_columns expects a 2-D tensor")
    idx = np.asarray(indices, dtype=np.intp)
    out = x.data[:, idx].copy()

    def bw(gout):
        g = np.zeros_like(x.data)
        np.add.at(g.T, idx, gout.T)
        return (g,)

    return record(out, (x,), bw)


def expand_axis(x, axis: int, n: int) -> Tensor:
    """Insert a new axis of length n by broadcasting; gradient sums it out.

    The result is a read-only broadcast view; consumers that need a real
    buffer (reshape, in-place math) copy on their own.
    """
    x = _as_tensor(x)
    expanded = np.expand_dims(x.data, axis)
    out = np.broadcast_to(expanded, expanded.shape[:axis] + (n,) + expanded.shape[axis + 1:])

    def bw(gout):
        return (gout.sum(axis=axis),)

    return record(out, (x,), bw)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.sum())

    def bw(gout):
        return (np.full_like(x.data, float(gout)),)

    return record(out, (x,), bw)


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.mean())
    n = x.size

    def bw(gout):
        return (np.full_like(x.data, float(gout) / n),)

    return record(out, (x,), bw)


# ---------------------------------------------------------------------------
# losses

def bce(pred, target) -> Tensor:
    """Mean binary cross entropy with 1e-7 clamping before the logs.

    The clamp makes the loss finite for saturated predictions; its value at
    a perfect prediction is therefore ~1e-7 rather than exactly zero.
    """
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"bce shapes disagree: {pred.data.shape} vs {target.data.shape}")
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    t = target.data
    out = np.asarray(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean())
    inside = (pred.data > BCE_EPS) & (pred.data < 1.0 - BCE_EPS)
    n = p.size

    def bw(gout):
        g = np.where(inside, (p - t) / (p * (1.0 - p)), 0.0)
        return (g * (float(gout) / n), None)

    return record(out, (pred, target), bw)


def bce_values(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Plain-array per-element BCE mean over axis 0; no tape involvement."""
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    return -(target * np.log(p) + (1.0 - target) * np.log1p(-p)).mean(axis=0)


# ---------------------------------------------------------------------------
# gradient verification

def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative disagreement between taped and central-difference grads.

    ``f`` must map a tensor to a scalar tensor. The relative error per
    coordinate is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = Tensor(np.array(_as_tensor(point).data, copy=True), requires_grad=True)
    with Tape():
        y = f(x)
    if y.size != 1:
        raise TapeError("grad_check requires a scalar-valued map")
    grads = backward(y)
    analytic = grads.get(x)
    if analytic is None:
        analytic = np.zeros_like(x.data)
    flat = x.data.ravel()
    aflat = analytic.ravel()
    worst = 0.0
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        fp = float(f(Tensor(x.data)).data)
        flat[i] = keep - step
        fm = float(f(Tensor(x.data)).data)
        flat[i] = keep
        numeric = (fp - fm) / (2.0 * step)
        err = abs(aflat[i] - numeric) / max(1e-8, abs(aflat[i]) + abs(numeric))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# named-tensor binary container (checkpoints, feature files)

CONTAINER_MAGIC = b"PETW"
CONTAINER_VERSION = 1


def pack_tensors(named: dict) -> bytes:
    """Serialize a dict of name -> float64 array as a flat binary container.

    Layout: magic, version u32, then per entry: name length u32, utf-8
    name, rank u32, dims u32 each, little-endian f64 payload. Round trips
    bit-exactly.
    """
    parts = [CONTAINER_MAGIC, struct.pack("<I", CONTAINER_VERSION)]
    for name, value in named.items():
        arr = np.asarray(value, dtype=np.float64)
        blob = name.encode("utf-8")
        parts.append(struct.pack("<I", len(blob)))
        parts.append(blob)
        parts.append(struct.pack("<I", arr.ndim))
        if arr.ndim:
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8", copy=False).tobytes())
    return b"".join(parts)


def unpack_tensors(blob: bytes, origin: str = "container") -> dict:
    if blob[:4] != CONTAINER_MAGIC:
        raise ValueError(f"{origin}: bad container magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CONTAINER_VERSION:
        raise ValueError(f"{origin}: unsupported container version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", blob, pos) if rank else ()
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
        pos += 8 * count
        out[name] = arr.astype(np.float64).reshape(shape)
    return out


def save_tensors(path, named: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(pack_tensors(named))


def load_tensors(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    return unpack_tensors(blob, origin=str(path))
