"""Dense NCHW float32 tensors with tape-based reverse-mode differentiation.

Values are observed as contiguous float32 in (batch, channel, height,
width) order.  Internally every op computes in float64 and keeps that
result alongside the float32 rounding: downstream ops consume the float64
version, so a forward pass is float64 end-to-end while ``Tensor.data``
stays the float32 value of record (checkpoints, IO and all assertions use
it).  Gradients are accumulated in float64 throughout.  This is what lets
central-difference gradient checks meet a 1e-3 relative tolerance even on
deep composite graphs.

The tape is a module-global, define-by-run record of executed ops.  It is
rebuilt on every forward pass: call :func:`reset_tape` at the start of a
step, run the forward, call :func:`backward` on the scalar loss.  Recording
is suppressed inside a ``with no_grad():`` block.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .rng import RandomStream

Shape = tuple[int, int, int, int]


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class TapeError(RuntimeError):
    """Tape misuse: backward on an empty or already-consumed tape."""


class Tensor:
    """A rank-4 float32 array with an optional float64 gradient slot.

    Leaf tensors wrap user data; op outputs additionally carry the float64
    compute value they were rounded from.  Mutating ``data`` in place is
    only sound for leaf tensors (parameters, inputs), which is exactly how
    the optimizer and the finite-difference probes use it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_data64")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank-4 NCHW, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._data64: Optional[np.ndarray] = None

    @property
    def shape(self) -> Shape:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        if self._data64 is not None:
            return float(self._data64.reshape(-1)[0])
        return float(self.data.reshape(-1)[0])

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as64(t: Tensor) -> np.ndarray:
    """The float64 view an op should compute from."""
    if t._data64 is not None:
        return t._data64
    return t.data.astype(np.float64)


def from64(arr64: np.ndarray) -> Tensor:
    """Wrap an op's float64 result, keeping it for downstream consumers."""
    out = Tensor(arr64.astype(np.float32))
    out._data64 = arr64
    return out


class _Record:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: tuple, backward_fn: Callable):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered op record; replaying it backwards populates gradients."""

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def clear(self) -> None:
        self.records.clear()
        self.consumed = False


_tape = Tape()
_grad_enabled = True


def tape() -> Tape:
    return _tape


def reset_tape() -> None:
    _tape.clear()


@contextlib.contextmanager
def no_grad():
    """Suppress tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def record(output: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Attach a backward rule for `output` if any input tracks gradients.

    `backward_fn(g)` receives the float64 upstream gradient and returns one
    float64 array (or None) per input, in order.
    """
    if _grad_enabled and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        _tape.records.append(_Record(output, tuple(inputs), backward_fn))
    return output


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    Gradients accumulate (+=) into existing .grad buffers, so two backward
    passes over different losses sum their contributions.  Each tape may be
    consumed once; reset_tape() re-arms it.
    """
    if loss.data.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward needs a (1,1,1,1) scalar, got {loss.shape}")
    if not _tape.records:
        raise TapeError("backward on an empty tape")
    if _tape.consumed:
        raise TapeError("tape already consumed; call reset_tape() before the next backward")
    _tape.consumed = True

    # Local gradient store for the walk; leaf grads are merged into .grad at
    # the end so repeated backwards accumulate.
    flowing: dict[int, np.ndarray] = {id(loss): np.ones((1, 1, 1, 1), dtype=np.float64)}
    touched: dict[int, Tensor] = {}
    for rec in _tape.records:
        for t in rec.inputs:
            if t.requires_grad:
                touched[id(t)] = t

    for rec in reversed(_tape.records):
        g_out = flowing.pop(id(rec.output), None)
        if g_out is None:
            continue
        grads = rec.backward_fn(g_out)
        for t, g in zip(rec.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.data.shape:
                raise ShapeError(
                    f"backward rule produced grad of shape {g.shape} for tensor {t.shape}"
                )
            acc = flowing.get(id(t))
            flowing[id(t)] = g if acc is None else acc + g

    for tid, t in touched.items():
        g = flowing.get(tid)
        if g is None:
            g = np.zeros(t.data.shape, dtype=np.float64)
        t.grad = g if t.grad is None else t.grad + g


def clear_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Creation ops


def _checked_shape(shape) -> Shape:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or any(s < 0 for s in shape):
        raise ShapeError(f"bad NCHW shape {shape}")
    n = int(np.prod(shape, dtype=np.int64))
    if n > 2**31:
        raise ShapeError(f"allocation of {n} elements exceeds the supported size")
    return shape


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_checked_shape(shape), dtype=np.float32), requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(_checked_shape(shape), value, dtype=np.float32), requires_grad)


def randn(shape, seed: int, stddev: float = 1.0, requires_grad: bool = False) -> Tensor:
    """Normal(0, stddev) tensor from the documented splitmix64/Box-Muller stream."""
    shape = _checked_shape(shape)
    vals = RandomStream(seed).normal(shape, stddev)
    return Tensor(vals.astype(np.float32), requires_grad)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Wrap array-like data (reshaped to rank 4 if 1-3 dims are given)."""
    arr = np.asarray(data, dtype=np.float32)
    while arr.ndim < 4:
        arr = arr[np.newaxis]
    return Tensor(arr, requires_grad)


# ---------------------------------------------------------------------------
# Elementwise arithmetic with (batch, single-channel) broadcasting


def _broadcast_check(a: Shape, b: Shape) -> Shape:
    # Broadcasting is deliberately narrow: batch and channel axes may be 1 in
    # one operand, spatial dims must match exactly.
    if a[2:] != b[2:]:
        raise ShapeError(f"spatial dims must match exactly: {a} vs {b}")
    out = []
    for da, db in zip(a[:2], b[:2]):
        if da == db:
            out.append(da)
        elif da == 1 or db == 1:
            out.append(max(da, db))
        else:
            raise ShapeError(f"incompatible shapes {a} and {b}")
    return (out[0], out[1], a[2], a[3])


def _unbroadcast(g: np.ndarray, shape: Shape) -> np.ndarray:
    for axis in (0, 1):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a.shape, b.shape)
    out = from64(as64(a) + as64(b))

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(out, (a, b), bwd)


def mul_elem(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a.shape, b.shape)
    a64 = as64(a)
    b64 = as64(b)
    out = from64(a64 * b64)

    def bwd(g):
        ga = _unbroadcast(g * b64, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a64, b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), bwd)


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    out = from64(as64(a) * k)

    def bwd(g):
        return (g * k,)

    return record(out, (a,), bwd)


def add_scalar(a: Tensor, k: float) -> Tensor:
    k = float(k)
    out = from64(as64(a) + k)

    def bwd(g):
        return (g,)

    return record(out, (a,), bwd)


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Elementwise product with a constant array (no gradient to the constant).

    Used for non-differentiable selection masks in the mining losses.
    """
    c64 = np.asarray(c, dtype=np.float64)
    if c64.shape != a.data.shape:
        raise ShapeError(f"mask shape {c64.shape} != tensor shape {a.shape}")
    out = from64(as64(a) * c64)

    def bwd(g):
        return (g * c64,)

    return record(out, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    """Reduce to a (1,1,1,1) scalar, accumulated in float64."""
    total = np.sum(as64(a), dtype=np.float64)
    out = from64(np.full((1, 1, 1, 1), total, dtype=np.float64))

    def bwd(g):
        return (np.full(a.data.shape, g.reshape(-1)[0], dtype=np.float64),)

    return record(out, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


# ---------------------------------------------------------------------------
# Gradient checking


def finite_diff_check(f, x: Tensor, epsilon: float = 1e-3) -> float:
    """Max relative error between f's tape gradient and central differences.

    `f` must be a deterministic scalar-valued function of `x`.  The relative
    error at each coordinate is |analytic - numeric| / max(|analytic|,
    |numeric|, 1e-8).  Numeric differences divide by the actually realized
    float32 step, not the nominal epsilon.
    """
    reset_tape()
    saved_grad = x.grad
    x.grad = None
    was_tracked = x.requires_grad
    x.requires_grad = True
    y = f(x)
    if y.data.shape != (1, 1, 1, 1):
        raise ShapeError(f"finite_diff_check needs a scalar-valued f, got {y.shape}")
    backward(y)
    analytic = x.grad.reshape(-1).copy()
    x.grad = saved_grad
    x.requires_grad = was_tracked
    reset_tape()

    flat = x.data.reshape(-1)
    numeric = np.empty_like(analytic)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            hi = np.float32(orig + epsilon)
            lo = np.float32(orig - epsilon)
            flat[i] = hi
            y_hi = f(x).item()
            flat[i] = lo
            y_lo = f(x).item()
            flat[i] = orig
            step = float(hi) - float(lo)
            numeric[i] = (y_hi - y_lo) / step
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
