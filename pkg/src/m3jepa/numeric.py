"""Dense float64 arrays with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one operand requires a gradient. Outside a tape every operation is a
plain numpy computation and nothing is recorded, which is how evaluation
runs. :func:`backward` replays the recorded rules in reverse execution order.

    >>> w = NArray([[1.0, 2.0]], requires_grad=True)
    >>> with Tape():
    ...     loss = (w @ NArray([[3.0], [4.0]])).sum()
    ...     backward(loss)
    >>> w.grad
    array([[3., 4.]])
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import DegenerateVectorError, DimensionError, NumericError, PreconditionError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_ACTIVE_TAPES: list["Tape"] = []


class NArray:
    """A float64 array with an optional gradient buffer.

    ``grad`` stays ``None`` until a backward pass reaches the array; the
    trainer uses that to tell which parameters took part in a step.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"NArray(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest and the innermost one records.
    A tape supports a single :func:`backward` call.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape():
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def as_narray(x):
    return x if isinstance(x, NArray) else NArray(x)


def _record(data, parents, backward_rule):
    out = NArray.__new__(NArray)
    out.data = data
    out.grad = None
    out.name = None
    out._tape = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(_Node(out, parents, backward_rule))
    return out


def _accumulate(arr, g):
    if arr.grad is None:
        arr.grad = np.array(g, dtype=np.float64)
    else:
        arr.grad += g


def backward(loss: NArray) -> None:
    """Populate ``grad`` of every array reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise PreconditionError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise PreconditionError("loss was not produced on an active tape")
    if tape.consumed:
        raise PreconditionError("tape already replayed; run a fresh forward pass")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is not None and parent.requires_grad:
                _accumulate(parent, pg)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_finite(x, op):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input")


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_narray(a), as_narray(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_narray(a), as_narray(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_narray(a), as_narray(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def rule(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), rule)


def div(a, b):
    a, b = as_narray(a), as_narray(b)
    out = a.data / b.data

    def rule(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), rule)


def exp(a):
    a = as_narray(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_narray(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def gelu(a):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written through erf."""
    a = as_narray(a)
    _check_finite(a.data, "gelu")
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = x * cdf

    def rule(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _record(out, (a,), rule)


def dropout(a, p, rng):
    """Inverted dropout: survivors are scaled by ``1/(1-p)``."""
    a = as_narray(a)
    if p <= 0.0:
        return a
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions


def sum_(a, axis=None, keepdims=False):
    a = as_narray(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _record(out, (a,), rule)


def mean(a, axis=None, keepdims=False):
    a = as_narray(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def logsumexp(a, axis=-1):
    """Max-shifted log-sum-exp along ``axis`` (the axis is dropped)."""
    a = as_narray(a)
    _check_finite(a.data, "logsumexp")
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    return _record(out, (a,), lambda g: (np.expand_dims(g, axis) * (e / s),))


def softmax(a, axis=-1):
    a = as_narray(a)
    if a.data.size == 0:
        raise PreconditionError("softmax of an empty array")
    _check_finite(a.data, "softmax")
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), rule)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_narray(a), as_narray(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 1:
                ga = np.multiply.outer(g, b.data)
            else:
                ga = g @ b.data.T
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.multiply.outer(a.data, g)
            else:
                gb = a.data.T @ g
        return ga, gb

    return _record(out, (a, b), rule)


def reshape(a, shape):
    a = as_narray(a)
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def weighted_sum(weights, columns, parts):
    """``sum_j weights[:, columns[j], None] * parts[j]`` for 2-D ``parts``.

    Mixes per-row expert outputs with per-row gate weights without
    materialising a 3-D stack.
    """
    weights = as_narray(weights)
    parts = [as_narray(p) for p in parts]
    if len(columns) != len(parts) or not parts:
        raise PreconditionError("weighted_sum needs one column per part")
    w = weights.data
    out = np.zeros_like(parts[0].data)
    for c, p in zip(columns, parts):
        if p.shape != out.shape or p.shape[0] != w.shape[0]:
            raise DimensionError(f"weighted_sum: part {p.shape} vs weights {w.shape}")
        out += w[:, c:c + 1] * p.data

    def rule(g):
        gw = np.zeros_like(w) if weights.requires_grad else None
        grads = []
        for c, p in zip(columns, parts):
            if gw is not None:
                gw[:, c] += (g * p.data).sum(axis=1)
            grads.append(w[:, c:c + 1] * g if p.requires_grad else None)
        return (gw, *grads)

    return _record(out, (weights, *parts), rule)


def transpose(a):
    a = as_narray(a)
    return _record(a.data.T, (a,), lambda g: (g.T,))


def diagonal(a):
    a = as_narray(a)
    if a.ndim != 2:
        raise DimensionError(f"diagonal needs a matrix, got {a.shape}")
    out = np.diagonal(a.data).copy()

    def rule(g):
        full = np.zeros(a.shape)
        np.fill_diagonal(full, g)
        return (full,)

    return _record(out, (a,), rule)


def concat(parts, axis=-1):
    """Order-preserving concatenation; the gradient is sliced back into parts."""
    parts = [as_narray(p) for p in parts]
    if not parts:
        raise PreconditionError("concat of an empty list")
    if len(parts) == 1:
        return parts[0]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tuple(parts), rule)


def normalize(a, axis=-1):
    """Scale ``a`` to unit L2 norm along ``axis``."""
    a = as_narray(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(n == 0.0):
        raise DegenerateVectorError("cannot normalize a zero-norm vector")
    y = a.data / n

    def rule(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)

    return _record(y, (a,), rule)


def cosine_sim(a, b):
    """Cosine similarity of two 1-D arrays, as a scalar NArray."""
    a, b = as_narray(a), as_narray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"cosine_sim: shapes {a.shape} and {b.shape}")
    return sum_(mul(normalize(a), normalize(b)))


def cosine_matrix(a, b):
    """Pairwise cosine similarities between the rows of ``a`` and ``b``."""
    a, b = as_narray(a), as_narray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"cosine_matrix: shapes {a.shape} and {b.shape}")
    return matmul(normalize(a), transpose(normalize(b)))


def sq_l2(a, b, axis=None):
    """Squared Euclidean distance; ``axis=-1`` gives one value per row."""
    a, b = as_narray(a), as_narray(b)
    if a.shape != b.shape:
        raise DimensionError(f"sq_l2: shapes {a.shape} and {b.shape}")
    d = a.data - b.data
    out = np.asarray((d * d).sum(axis=axis))

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        gd = 2.0 * d * g
        return gd, -gd

    return _record(out, (a, b), rule)


# ---------------------------------------------------------------- oracle


def finite_diff_grad(f, p: NArray, eps=1e-5):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. ``p``.

    ``f`` takes no arguments and reads ``p.data`` itself; entries are
    perturbed in place and restored.
    """
    flat = p.data.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = _scalar(f())
        flat[i] = orig - eps
        lo = _scalar(f())
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * eps)
    return out.reshape(p.shape)


def _scalar(v):
    if isinstance(v, NArray):
        return float(v.data)
    return float(v)


def rel_error(analytic, numeric, floor=1e-8):
    """Norm-wise relative error, guarded against two vanishing gradients."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)
