"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` whose ``entry``
records the operation kind, its inputs and a closure computing input gradients
from the output gradient. Entries are numbered from a process-wide counter, so
sorting the entries reachable from a loss by ``node_id`` gives a topological
order; :func:`backward` walks that order in reverse, visiting each entry once.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_ids = itertools.count(1)
_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised for invalid backward requests (non-scalar or detached losses)."""


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@dataclass
class TapeEntry:
    kind: str
    inputs: tuple
    node_id: int
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of executed operations.

    Used as a context manager it captures every entry created inside the
    block, which is handy for inspecting a forward pass.
    """

    entries: list = field(default_factory=list)

    def __enter__(self):
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    @classmethod
    def reachable(cls, root: "Tensor") -> "Tape":
        """The sub-tape of entries that ``root`` depends on, in execution order."""
        seen: dict[int, TapeEntry] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            e = t.entry
            if e is None or e.node_id in seen:
                continue
            seen[e.node_id] = e
            stack.extend(e.inputs)
        return cls([seen[k] for k in sorted(seen)])


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.entry: TapeEntry | None = None

    @property
    def node_id(self) -> int | None:
        return None if self.entry is None else self.entry.node_id

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul_elementwise(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def backward(self):
        backward(self)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.full((), x, dtype=dtype))


def _record(kind: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled() and any(t.requires_grad or t.entry is not None for t in inputs):
        out.entry = TapeEntry(kind, tuple(inputs), next(_ids), backward_fn)
        for tape in getattr(_state, "tapes", ()):
            tape.entries.append(out.entry)
    return out


def tensor_from(shape, values, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    """Build a leaf tensor from a flat row-major value list."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"shape extents must be positive, got {shape}")
    flat = np.asarray(values, dtype=dtype).reshape(-1)
    expected = int(np.prod(shape)) if shape else 1
    if flat.size != expected:
        raise ShapeError(f"length {flat.size} ≠ expected {expected}")
    if not np.all(np.isfinite(flat)):
        raise ValueError("tensor values must be finite")
    return Tensor(flat.reshape(shape).copy(), requires_grad=requires_grad)


def randn_seeded(shape, seed: int, std: float, dtype=np.float32) -> Tensor:
    """Normal(0, std) values from numpy's PCG64 generator seeded with ``seed``."""
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    rng = np.random.Generator(np.random.PCG64(seed))
    return Tensor((rng.standard_normal(tuple(shape)) * std).astype(dtype))


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a.dtype)
    if b.data.ndim and a.data.ndim:
        _check_same_shape(a, b, "add")
    a_shape, b_shape = a.shape, b.shape

    def bw(g):
        ga = g if a_shape == g.shape else np.sum(g).reshape(a_shape)
        gb = g if b_shape == g.shape else np.sum(g).reshape(b_shape)
        return ga, gb

    return _record("add", a.data + b.data, (a, b), bw)


def sub(a: Tensor, b) -> Tensor:
    return add(a, scale(b, -1.0) if isinstance(b, Tensor) else -b)


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record("scale", a.data * a.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),))


def sum_all(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.dtype
    return _record("sum", np.sum(a.data).astype(dt), (a,), lambda g: (np.broadcast_to(g, shape).astype(dt),))


def mean_all(a: Tensor) -> Tensor:
    shape, dt, n = a.shape, a.dtype, a.size
    return _record(
        "mean", np.mean(a.data).astype(dt), (a,), lambda g: (np.broadcast_to(g / n, shape).astype(dt),)
    )


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def _sigmoid_array(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    # keep strictly inside (0, 1) once the dtype saturates
    fi = np.finfo(z.dtype)
    return np.clip(out, fi.tiny, np.nextafter(z.dtype.type(1), z.dtype.type(0)))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_array(x.data)
    return _record("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate N×C1×H×W and N×C2×H×W along channels (a first)."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects 4-d N×C×H×W tensors")
    for axis, name in ((0, "batch"), (2, "height"), (3, "width")):
        if a.shape[axis] != b.shape[axis]:
            raise ShapeError(f"concat_channels: {name} mismatch {a.shape[axis]} vs {b.shape[axis]}")
    c1 = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _record("concat", out, (a, b), lambda g: (g[:, :c1], g[:, c1:]))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _record("slice", x.data[:, start:stop].copy(), (x,), bw)


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.entry is None and not loss.requires_grad:
        raise GraphError("loss is detached from the tape (no recorded operations)")
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
    if loss.entry is None:
        loss.grad = seed.copy() if loss.grad is None else loss.grad + seed
        return
    tape = Tape.reachable(loss)
    pending: dict[int, np.ndarray] = {loss.entry.node_id: seed}
    for e in reversed(tape.entries):
        g = pending.pop(e.node_id, None)
        if g is None:
            continue
        for inp, gi in zip(e.inputs, e.backward_fn(g)):
            if gi is None:
                continue
            if inp.entry is not None:
                key = inp.entry.node_id
                pending[key] = gi if key not in pending else pending[key] + gi
            elif inp.requires_grad:
                gi = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


def gradient_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = fn(leaf)
    if out.data.size != 1:
        raise GraphError(f"gradient_check needs a scalar function, got shape {out.shape}")
    if out.entry is not None or out.requires_grad:
        backward(out)
    analytic = np.zeros_like(base) if leaf.grad is None else leaf.grad.reshape(base.shape)
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(Tensor(base.copy())).data)
            flat[i] = orig - eps
            fm = float(fn(Tensor(base.copy())).data)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
