"""Dense tensors with a reverse-mode tape.

Data lives in plain numpy arrays; the Tape records primitive applications
(define-by-run) and replays their VJP rules in reverse. Only leaves created
with requires_grad=True receive .grad; intermediate adjoints stay in a
scratch dict owned by the backward pass, so repeated backward calls simply
accumulate into leaf grads.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float64

_ACTIVE_TAPE = None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={list(self.data.shape)}, requires_grad={self.requires_grad})"


def zeros(shape, requires_grad=False, dtype=DEFAULT_DTYPE):
    _check_shape(shape)
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, requires_grad=False, dtype=DEFAULT_DTYPE):
    _check_shape(shape)
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def from_values(shape, values, requires_grad=False, dtype=DEFAULT_DTYPE):
    _check_shape(shape)
    arr = np.asarray(values, dtype=dtype).reshape(-1)
    n = int(np.prod(shape))
    if arr.size != n:
        raise ValueError(
            f"value count {arr.size} does not match shape {list(shape)} (expects {n})"
        )
    return Tensor(arr.reshape(shape), requires_grad=requires_grad)


def _check_shape(shape):
    for extent in shape:
        if int(extent) < 1:
            raise ValueError(f"shape extents must be >= 1, got {list(shape)}")


class Tape:
    """Ordered record of primitive applications.

    Entries are appended in execution order, which is a topological order by
    construction; backward visits each entry exactly once in reverse.
    """

    def __init__(self):
        self._entries = []  # (out, inputs, vjp)
        self._produced = set()  # id() of tensors produced by an entry

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already recording")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def record(self, out, inputs, vjp):
        self._entries.append((out, inputs, vjp))
        self._produced.add(id(out))

    def __len__(self):
        return len(self._entries)

    def backward(self, loss):
        """Accumulate dLoss/dLeaf into every requires_grad leaf reachable from loss."""
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {list(loss.shape)}")
        if id(loss) not in self._produced:
            raise ValueError("loss was not produced on this tape")
        adjoint = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self._entries):
            g = adjoint.pop(id(out), None)
            if g is None:
                continue
            for t, dt in zip(inputs, vjp(g)):
                if dt is None:
                    continue
                if t.requires_grad:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += dt
                if id(t) in self._produced:
                    acc = adjoint.get(id(t))
                    if acc is None:
                        adjoint[id(t)] = dt.copy() if dt.base is not None else dt
                    else:
                        acc += dt


def active_tape():
    return _ACTIVE_TAPE


def needs_grad(t):
    """True if a gradient for t is wanted: a grad-leaf, or produced on the tape.

    Primitives use this at record time to skip dead VJP branches; the result
    must be captured into the closure, not re-checked during backward.
    """
    return t.requires_grad or (_ACTIVE_TAPE is not None and id(t) in _ACTIVE_TAPE._produced)


def record(out, inputs, vjp):
    """Record an entry on the active tape, if recording and any input needs grad."""
    tape = _ACTIVE_TAPE
    if tape is None:
        return out
    if any(t.requires_grad or id(t) in tape._produced for t in inputs):
        tape.record(out, inputs, vjp)
    return out


def finite_diff_check(f, x, eps=1e-5):
    """Max relative error between analytic grad of f at x and central differences.

    f maps a Tensor to a scalar Tensor and must be deterministic. The analytic
    gradient is taken from a fresh tape; the central difference perturbs one
    coordinate at a time.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = Tensor(np.array(x.data, copy=True), requires_grad=True)
    with Tape() as tape:
        y = f(x)
    if not np.isfinite(y.data).all():
        raise FloatingPointError("f(x) is not finite")
    tape.backward(y)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x).data)
        flat[i] = orig - eps
        lo = float(f(x).data)
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)
    numeric = numeric.reshape(x.data.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
