"""Dense float64 tensors with a reverse-mode gradient tape.

Only the handful of operations the hashing pipeline needs are provided. Every
operation returns a new :class:`Tensor`; when a :class:`Tape` is active and at
least one input requires a gradient, the operation is recorded so that
:meth:`Tape.gradient` can replay it backwards.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = sum_all(matmul(w, Tensor([[3.0], [4.0]])))
    >>> tape.gradient(y, [w])[0].tolist()
    [[3.0, 4.0]]
"""

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ArgumentError, DimensionError

_ids = itertools.count()
_local = threading.local()


def _active_tapes():
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


class Tensor:
    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 4:
            raise DimensionError(f"tensors are limited to 4 dimensions, got shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeEntry:
    output: int
    inputs: tuple
    backward: Callable


class Tape:
    """Records operations executed inside ``with Tape():``.

    ``kink_margin`` is the smallest distance to a non-differentiable point
    (relu at 0, channel-max ties, sign flips) seen while recording. Finite
    difference checks use it to reject sample points.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self.kink_margin = np.inf

    def __enter__(self):
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes().remove(self)
        return False

    def note_kink(self, distance):
        if distance < self.kink_margin:
            self.kink_margin = float(distance)

    def gradient(self, target: Tensor, sources: Sequence[Tensor]):
        if target.data.size != 1:
            raise ArgumentError(f"gradient target must be scalar, got shape {target.shape}")
        grads = {target.id: np.ones_like(target.data)}
        for entry in reversed(self.entries):
            g = grads.get(entry.output)
            if g is None:
                continue
            for inp, gi in zip(entry.inputs, entry.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.id in grads:
                    grads[inp.id] = grads[inp.id] + gi
                else:
                    grads[inp.id] = gi
        out = []
        for s in sources:
            g = grads.get(s.id)
            if g is None and s.id == target.id:
                g = np.ones_like(s.data)
            out.append(np.zeros_like(s.data) if g is None else g)
        return out


def _record(out_data, inputs, backward, kink=None):
    out = Tensor(out_data)
    tapes = _active_tapes()
    for tape in tapes:
        if kink is not None:
            tape.note_kink(kink)
    if tapes and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        for tape in tapes:
            tape.entries.append(TapeEntry(out.id, tuple(inputs), backward))
    return out


def note_kink(distance):
    """Report a non-differentiable point at ``distance`` to every active tape."""
    for tape in _active_tapes():
        tape.note_kink(distance)


def _require_same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a 2-D ``a`` with a 2-D matrix or 1-D vector ``b``."""
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        if B.ndim == 1:
            return np.outer(g, B), A.T @ g
        return g @ B.T, A.T @ g

    return _record(A @ B, (a, b), backward)


def conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Pointwise convolution of a C_in x H x W map: out[:, h, w] = w @ x[:, h, w] + b."""
    if x.ndim != 3 or w.ndim != 2 or b.ndim != 1:
        raise DimensionError(
            f"conv1x1: expected x[C,H,W], w[Cout,Cin], b[Cout]; got {x.shape}, {w.shape}, {b.shape}"
        )
    cin, h, wd = x.shape
    if w.shape[1] != cin or b.shape[0] != w.shape[0]:
        raise DimensionError(
            f"conv1x1: channel mismatch between input {x.shape}, weight {w.shape}, bias {b.shape}"
        )
    X = x.data.reshape(cin, h * wd)
    W = w.data
    out = (W @ X + b.data[:, None]).reshape(W.shape[0], h, wd)

    def backward(g):
        G = g.reshape(W.shape[0], h * wd)
        return (W.T @ G).reshape(x.shape), G @ X.T, G.sum(axis=1)

    return _record(out, (x, w, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError(f"reshape: cannot reshape {x.shape} to {shape}")
    src = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {x.shape}")
    return _record(x.data.T, (x,), lambda g: (g.T,))


# --- normalisation ----------------------------------------------------------


def _check_axis(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), backward)


L1_EPS = 1e-30


def l1_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Divide each slice along ``axis`` by its sum; near-zero slices become uniform."""
    axis = _check_axis(x, axis)
    s = x.data.sum(axis=axis, keepdims=True)
    degenerate = s < L1_EPS
    n = x.shape[axis]
    safe = np.where(degenerate, 1.0, s)
    y = np.where(degenerate, 1.0 / n, x.data / safe)

    def backward(g):
        gx = (g - (g * y).sum(axis=axis, keepdims=True)) / safe
        return (np.where(degenerate, 0.0, gx),)

    return _record(y, (x,), backward)


# --- elementwise ----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "subtract")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    kink = float(np.abs(x.data).min()) if x.data.size else None
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), kink=kink)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


# --- reductions -------------------------------------------------------------


def mean_spatial(x: Tensor) -> Tensor:
    """Global average pooling: C x H x W -> C."""
    if x.ndim != 3 or x.shape[1] * x.shape[2] == 0:
        raise DimensionError(f"mean_spatial: expected non-empty C x H x W, got {x.shape}")
    c, h, w = x.shape
    n = h * w

    def backward(g):
        return (np.broadcast_to((g / n)[:, None, None], x.shape).copy(),)

    return _record(x.data.reshape(c, n).mean(axis=1), (x,), backward)


def max_channel(x: Tensor) -> Tensor:
    """Per-position maximum over channels: C x H x W -> H x W.

    The gradient goes to the first channel attaining the maximum.
    """
    if x.ndim != 3 or x.shape[0] == 0:
        raise DimensionError(f"max_channel: expected C x H x W with C >= 1, got {x.shape}")
    idx = x.data.argmax(axis=0)
    out = np.take_along_axis(x.data, idx[None], axis=0)[0]
    kink = None
    if x.shape[0] > 1:
        top2 = np.sort(x.data, axis=0)[-2:]
        # ties among clamped zeros are locally constant, not kinks
        live = top2[1] != 0.0
        if live.any():
            kink = float((top2[1] - top2[0])[live].min())

    def backward(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, idx[None], g[None], axis=0)
        return (gx,)

    return _record(out, (x,), backward, kink=kink)


def sum_all(x: Tensor) -> Tensor:
    if x.data.size == 0:
        raise DimensionError("sum_all: empty tensor")
    return _record(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def inner(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two equal-shape tensors, as a 0-d tensor."""
    _require_same_shape(a, b, "inner_product")
    A, B = a.data, b.data
    val = np.array(np.dot(A.reshape(-1), B.reshape(-1)))
    return _record(val, (a, b), lambda g: (g * B, g * A))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; the gradient is split back by the same offsets."""
    parts = list(parts)
    if not parts:
        raise ArgumentError("concat: empty list of parts")
    nd = parts[0].ndim
    axis = axis % nd if nd else 0
    for p in parts:
        if p.ndim != nd or p.shape[:axis] + p.shape[axis + 1:] != parts[0].shape[:axis] + parts[0].shape[axis + 1:]:
            raise DimensionError(
                f"concat: incompatible shapes {[q.shape for q in parts]} along axis {axis}"
            )
    offsets = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list:
    """Inverse of :func:`concat` (not differentiable; used for inspection)."""
    offsets = np.cumsum(sizes)[:-1]
    return [Tensor(p) for p in np.split(x.data, offsets, axis=axis)]


# --- gradient checking ------------------------------------------------------


def _total(out):
    if isinstance(out, Tensor):
        return out, [out]
    terms = list(out)
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total, terms


def grad_check(f, point: Sequence[Tensor], h: float = 1e-4):
    """Max relative error between tape gradients of ``f`` and central differences.

    ``f`` maps the tensors in ``point`` to a scalar tensor, or to a list of
    scalar terms whose sum is the objective. Terms are differenced separately
    before summing, so roundoff scales with each term rather than the largest.
    The relative error of each coordinate uses ``max(|analytic|, |numeric|, 1e-8)``
    as denominator.
    """
    leaves = [Tensor(p.data, requires_grad=True) for p in point]
    with Tape() as tape:
        out, _ = _total(f(*leaves))
    if out.data.size != 1:
        raise ArgumentError(f"grad_check: f must return a scalar, got shape {out.shape}")
    analytic = tape.gradient(out, leaves)

    def evaluate(i, arr):
        args = [Tensor(arr) if q == i else Tensor(point[q].data) for q in range(len(point))]
        _, terms = _total(f(*args))
        return np.array([float(t.data) for t in terms])

    worst = 0.0
    for i, p in enumerate(point):
        base = p.data.copy()
        flat = base.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = evaluate(i, base)
            flat[j] = orig - h
            fm = evaluate(i, base)
            flat[j] = orig
            num = float(np.sum(fp - fm)) / (2 * h)
            ana = float(analytic[i].reshape(-1)[j])
            denom = max(abs(ana), abs(num), 1e-8)
            worst = max(worst, abs(ana - num) / denom)
    return worst
