"""Dense tensors with recorded reverse-mode differentiation.

Values are double-precision numpy arrays. Operations executed inside a
``Tape`` context record a backward closure; ``Tape.backward`` runs the
closures in reverse recording order and accumulates gradients into the
``grad`` buffers of every tensor on the path to the loss. Outside a tape
context the same operations run forward-only, which is what evaluation
and finite-difference probes use.

A tape and its tensors belong to one thread; distinct tapes on distinct
threads are independent.
"""

from __future__ import annotations

import math
import threading

import numpy as np

_local = threading.local()


def _active_tape():
    return getattr(_local, "tape", None)


class Tensor:
    """A dense float64 array, optionally tracked on the active tape."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    # Arithmetic sugar; scalars are promoted.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def item(self) -> float:
        return float(self.data.reshape(()))


class Tape:
    """Recorded computation, one forward pass; rebuilt per evaluation."""

    def __init__(self):
        self._ops = []

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = None
        return False

    def record(self, fn):
        self._ops.append(fn)

    def backward(self, loss: Tensor):
        """Reverse sweep from a scalar loss; grads accumulate across fan-out."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._ops):
            fn()


def _accum(t: Tensor, g, own: bool = False):
    """Accumulate an adjoint. own=True promises g is a fresh array (or a
    view nothing else will read), so the first accumulation can adopt it
    without copying."""
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = g if own else np.array(g)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum a broadcasted gradient back down to the original shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def record(out: Tensor, backward_fn):
    """Attach a backward closure for a fused op; no-op outside a tape."""
    tape = _active_tape()
    if tape is None:
        return

    def step():
        if out.grad is not None:
            backward_fn(out.grad)

    tape.record(step)


def record_multi(outs, backward_fn):
    """Like record() for ops with several outputs; missing grads are zeros."""
    tape = _active_tape()
    if tape is None:
        return

    def step():
        if all(o.grad is None for o in outs):
            return
        grads = [o.grad if o.grad is not None else np.zeros_like(o.data) for o in outs]
        backward_fn(*grads)

    tape.record(step)


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.data.shape} vs {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def backward(g):
        _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)), own=True)
        _accum(b, np.matmul(np.swapaxes(a.data, -1, -2), g), own=True)

    record(out, backward)
    return out


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward(g):
        _accum(a, g, own=True)  # g is dead after this op's backward
        _accum(b, g)

    record(out, backward)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def backward(g):
        _accum(a, g, own=True)  # g is dead after this op's backward
        _accum(b, -g, own=True)

    record(out, backward)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def backward(g):
        _accum(a, g * b.data, own=True)
        _accum(b, g * a.data, own=True)

    record(out, backward)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(y)
    record(out, lambda g: _accum(x, g * y * (1.0 - y), own=True))
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    record(out, lambda g: _accum(x, g * (1.0 - y * y), own=True))
    return out


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = x.data > 0.0
    out = Tensor(np.where(mask, x.data, 0.0))
    record(out, lambda g: _accum(x, g * mask, own=True))
    return out


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    record(out, lambda g: _accum(x, g / x.data, own=True))
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through inside [lo, hi], zero outside."""
    mask = (x.data >= lo) & (x.data <= hi)
    out = Tensor(np.clip(x.data, lo, hi))
    record(out, lambda g: _accum(x, g * mask))
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Probability-normalized exponentials, computed with max-subtraction."""
    if x.data.shape == () or x.data.shape[axis] == 0:
        raise ValueError("softmax needs a nonempty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, y * (g - dot), own=True)

    record(out, backward)
    return out


def concat(parts, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat of zero parts")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            _accum(p, piece)  # views of the dead out.grad; still copied on adopt

    record(out, backward)
    return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into place."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(x.data[idx])

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        _accum(x, full, own=True)

    record(out, backward)
    return out


def unstack(x: Tensor, axis: int = -2) -> list:
    """Split one axis into a tensor list; inverse of stack on that axis."""
    views = np.moveaxis(x.data, axis, 0)
    outs = [Tensor(views[t]) for t in range(views.shape[0])]

    def backward(*grads):
        _accum(x, np.moveaxis(np.stack(grads, axis=0), 0, axis), own=True)

    record_multi(outs, backward)
    return outs


def stack(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.stack([p.data for p in parts], axis=axis))

    def backward(g):
        for i, p in enumerate(parts):
            _accum(p, np.take(g, i, axis=axis), own=True)

    record(out, backward)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    record(out, lambda g: _accum(x, g.reshape(x.data.shape)))
    return out


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = Tensor(np.swapaxes(x.data, a, b))
    record(out, lambda g: _accum(x, np.swapaxes(g, a, b)))
    return out


def broadcast_to(x: Tensor, shape) -> Tensor:
    # the read-only view is safe: ops never write into input buffers
    out = Tensor(np.broadcast_to(x.data, shape))
    record(out, lambda g: _accum(x, g))  # _accum unbroadcasts
    return out


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape))

    record(out, backward)
    return out


def mean_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = x.data.shape[axis]
    return mul(sum_axis(x, axis, keepdims), 1.0 / n)


def max_axis(x: Tensor, axis: int) -> Tensor:
    """Maximum along an axis; adjoints route to the first argmax on ties."""
    if x.data.shape[axis] == 0:
        raise ValueError("max over an empty axis")
    out = Tensor(x.data.max(axis=axis))
    arg = x.data.argmax(axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
        _accum(x, full, own=True)

    record(out, backward)
    return out


def max_over_positions(rows: Tensor) -> Tensor:
    """Per-dimension max over the position axis of a [t, d] block."""
    if rows.data.shape[-2] == 0:
        raise ValueError("max pooling over zero positions")
    return max_axis(rows, axis=-2)


def embed(table: Tensor, ids) -> Tensor:
    """Row gather from an embedding table; backward scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids])

    def backward(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    record(out, backward)
    return out


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(f, params: dict, eps: float = 1e-5) -> float:
    """Compare tape gradients of f(params) against central finite differences.

    Returns the worst relative error over every element of every parameter,
    with denominator max(|analytic|, |numeric|, 1e-8). A NaN anywhere in f
    is reported as failure (inf).
    """
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = f(params)
        tape.backward(loss)
    if not math.isfinite(loss.item()):
        return math.inf
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(params).item()
            flat[i] = orig - eps
            lo = f(params).item()
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                return math.inf
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return worst
