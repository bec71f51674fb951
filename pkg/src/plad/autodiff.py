"""Dense float64 tensors with taped reverse-mode differentiation.

The engine is deliberately small: it supports exactly the primitives needed
by fully-connected networks, the reparameterized perturbation path and the
combined training loss. A ``Tape`` is opened per forward pass (define-by-run),
ops append nodes to the innermost active tape, and ``backward`` walks the tape
once in reverse to accumulate adjoints.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np


class AutodiffError(Exception):
    """Base class for engine failures."""


class DimensionError(AutodiffError):
    """Operand shapes do not conform to the requested op."""


class NumericError(AutodiffError):
    """A committed value is NaN or infinite."""


class ContractError(AutodiffError):
    """An op was called outside its contract (bad kind, bad label, ...)."""


class InternalError(AutodiffError):
    """The tape is malformed (cycle / duplicated output)."""


_next_id = itertools.count()


class _TapeStack(threading.local):
    """Per-thread stack of active tapes; parallel runs never share a tape."""

    def __init__(self):
        self.stack = []


_TAPES = _TapeStack()


class Tensor:
    """Dense float64 array with an id, an optional gradient and a grad flag.

    Values are stored row-major (C order). Construction rejects non-finite
    data, so every committed tensor in the system is finite.
    """

    __slots__ = ("id", "data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.id = next(_next_id)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def values(self):
        """Flat row-major view of the stored values."""
        return self.data.ravel()

    def item(self):
        return float(self.data.item())

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; every path funnels into the module-level ops so that
    # recording and shape checks live in one place
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add(self, -float(other))

    def __rsub__(self, other):
        return add(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def relu(self):
        return relu(self)

    def leaky_relu(self, slope=0.01):
        return leaky_relu(self, slope=slope)

    def sigmoid(self):
        return sigmoid(self)

    def square(self):
        return square(self)

    def exp(self):
        return exp(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    @property
    def T(self):
        return transpose(self)


class Node:
    """One recorded op: kind, input/output tensors and the adjoint rule."""

    __slots__ = ("kind", "inputs", "output", "bwd")

    def __init__(self, kind, inputs, output, bwd):
        self.kind = kind
        self.inputs = tuple(inputs)
        self.output = output
        self.bwd = bwd


class Tape:
    """Ordered record of ops from one forward pass.

    Nodes are appended in execution order, which is already a topological
    order. Use as a context manager; nesting pushes the inner tape.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.stack.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.nodes)


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {where}")


def _make(arr, inputs):
    out = Tensor.__new__(Tensor)
    arr = np.asarray(arr, dtype=np.float64)
    _check_finite(arr, "op output")
    out.id = next(_next_id)
    out.data = arr
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    return out


def _record(kind, inputs, out, bwd):
    if _TAPES.stack and any(t.requires_grad for t in inputs):
        _TAPES.stack[-1].nodes.append(Node(kind, inputs, out, bwd))
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _shape_err(kind, *shapes):
    return DimensionError(f"{kind}: incompatible shapes {', '.join(str(s) for s in shapes)}")


def matmul(a, b):
    """Matrix product of two 2-D tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_err("matmul", a.shape, b.shape)
    out = _make(a.data @ b.data, (a, b))

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", (a, b), out, bwd)


def _elementwise_pair(kind, a, b):
    """Validate an elementwise pair: same shape, or one side a size-1 scalar."""
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise _shape_err(kind, a.shape, b.shape)


def _reduce_to(g, ref):
    """Collapse a broadcast gradient back onto a size-1 operand."""
    if ref.size == 1 and g.shape != ref.data.shape:
        return np.asarray(g.sum()).reshape(ref.data.shape)
    return g


def add(a, b):
    """Elementwise sum; the second operand may be a python scalar constant."""
    if not isinstance(b, Tensor):
        out = _make(a.data + float(b), (a,))
        return _record("add", (a,), out, lambda g: (g,))
    _elementwise_pair("add", a, b)
    out = _make(a.data + b.data, (a, b))

    def bwd(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _record("add", (a, b), out, bwd)


def add_bias(m, b):
    """Add a length-d bias row to every row of an (n, d) matrix."""
    if m.data.ndim != 2 or b.data.ndim != 1 or m.shape[1] != b.shape[0]:
        raise _shape_err("add_bias", m.shape, b.shape)
    out = _make(m.data + b.data, (m, b))

    def bwd(g):
        return g, g.sum(axis=0)

    return _record("add_bias", (m, b), out, bwd)


def hadamard(a, b):
    """Elementwise product (same shapes or a size-1 scalar operand)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _elementwise_pair("hadamard", a, b)
    out = _make(a.data * b.data, (a, b))

    def bwd(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return _record("hadamard", (a, b), out, bwd)


def scale(x, factor):
    """Multiply by a python float constant."""
    factor = float(factor)
    out = _make(x.data * factor, (x,))
    return _record("scale", (x,), out, lambda g: (g * factor,))


def leaky_relu(x, slope=0.01):
    pos = x.data > 0
    out = _make(np.where(pos, x.data, slope * x.data), (x,))
    return _record("leaky_relu", (x,), out, lambda g: (g * np.where(pos, 1.0, slope),))


def relu(x):
    pos = x.data > 0
    out = _make(np.where(pos, x.data, 0.0), (x,))
    return _record("relu", (x,), out, lambda g: (g * pos,))


def sigmoid(x):
    """Numerically stable logistic function."""
    t = x.data
    s = np.empty_like(t)
    pos = t >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    s[~pos] = e / (1.0 + e)
    out = _make(s, (x,))
    return _record("sigmoid", (x,), out, lambda g: (g * s * (1.0 - s),))


def square(x):
    out = _make(x.data * x.data, (x,))
    return _record("square", (x,), out, lambda g: (2.0 * x.data * g,))


def exp(x):
    with np.errstate(over="ignore"):
        e = np.exp(x.data)
    out = _make(e, (x,))  # overflow -> inf -> NumericError
    return _record("exp", (x,), out, lambda g: (g * e,))


def sum_all(x):
    out = _make(x.data.sum(), (x,))
    return _record("sum", (x,), out, lambda g: (np.broadcast_to(g, x.data.shape).copy(),))


def mean_all(x):
    n = x.data.size
    out = _make(x.data.mean(), (x,))
    return _record("mean", (x,), out, lambda g: (np.broadcast_to(g / n, x.data.shape).copy(),))


def transpose(x):
    if x.data.ndim != 2:
        raise _shape_err("transpose", x.shape)
    out = _make(np.ascontiguousarray(x.data.T), (x,))
    return _record("transpose", (x,), out, lambda g: (g.T,))


def concat(parts, axis=-1):
    """Concatenate tensors along ``axis``; inverse of :func:`split`."""
    parts = tuple(_as_tensor(p) for p in parts)
    ref = parts[0].data.ndim
    if any(p.data.ndim != ref for p in parts):
        raise _shape_err("concat", *(p.shape for p in parts))
    try:
        out_arr = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise _shape_err("concat", *(p.shape for p in parts)) from None
    out = _make(out_arr, parts)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record("concat", parts, out, bwd)


def split(x, parts=2, axis=-1):
    """Split into ``parts`` equal chunks along ``axis``; returns a tuple."""
    extent = x.data.shape[axis]
    if extent % parts != 0:
        raise _shape_err(f"split into {parts}", x.shape)
    chunks = np.split(x.data, parts, axis=axis)
    outs = []
    for i, chunk in enumerate(chunks):
        out = _make(chunk.copy(), (x,))

        def bwd(g, _i=i):
            full = np.zeros_like(x.data)
            np.split(full, parts, axis=axis)[_i][...] = g
            return (full,)

        outs.append(_record("split", (x,), out, bwd))
    return tuple(outs)


def bce_with_logits(logits, label):
    """Elementwise binary cross-entropy against a constant 0/1 label.

    Uses the stable form max(t, 0) - t*y + log(1 + exp(-|t|)), which stays
    finite for logits far beyond 1e3. Fused as one primitive so the adjoint
    sigmoid(t) - y never sees an overflowing intermediate.
    """
    if label not in (0, 1, 0.0, 1.0):
        raise ContractError(f"bce label must be 0 or 1, got {label!r}")
    y = float(label)
    t = logits.data
    out_arr = np.maximum(t, 0.0) - t * y + np.log1p(np.exp(-np.abs(t)))
    out = _make(out_arr, (logits,))

    def bwd(g):
        s = np.empty_like(t)
        pos = t >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
        e = np.exp(t[~pos])
        s[~pos] = e / (1.0 + e)
        return (g * (s - y),)

    return _record("bce_logits", (logits,), out, bwd)


_OPS = {
    "matmul": matmul,
    "add": add,
    "add_bias": add_bias,
    "hadamard": hadamard,
    "scale": scale,
    "leaky_relu": leaky_relu,
    "relu": relu,
    "sigmoid": sigmoid,
    "square": square,
    "exp": exp,
    "sum": sum_all,
    "mean": mean_all,
    "transpose": transpose,
    "concat": lambda *parts, axis=-1: concat(parts, axis=axis),
    "split": split,
    "bce_logits": bce_with_logits,
}

OP_KINDS = tuple(sorted(_OPS))


def forward_op(kind, inputs, **params):
    """Generic entry point: apply the named primitive to a list of inputs.

    Non-tensor inputs are lifted to constant tensors. ``split`` returns a
    tuple; every other kind returns a single tensor.
    """
    if kind not in _OPS:
        raise ContractError(f"unknown op kind {kind!r}; known: {OP_KINDS}")
    lifted = [x if isinstance(x, Tensor) or isinstance(x, (int, float)) else _as_tensor(x) for x in inputs]
    return _OPS[kind](*lifted, **params)


def backward(loss, tape, params=()):
    """Reverse-sweep the tape from a scalar loss.

    Returns a map from tensor id to a float64 gradient array shaped like the
    parameter. Every tensor in ``params`` is guaranteed an entry (zeros when
    the loss does not depend on it); each leaf's ``grad`` slot is set too.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.nodes:
        raise ContractError("backward on an empty tape")
    if tape.nodes[-1].output.id != loss.id:
        raise ContractError("loss is not the tape's final output")

    produced_at = {}
    for i, node in enumerate(tape.nodes):
        if node.output.id in produced_at:
            raise InternalError("tape output produced twice")
        produced_at[node.output.id] = i
    for i, node in enumerate(tape.nodes):
        for t in node.inputs:
            if produced_at.get(t.id, -1) > i:
                raise InternalError("tape is not topologically ordered (cycle?)")

    adjoint = {loss.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = adjoint.get(node.output.id)
        if g is None:
            continue
        for t, gin in zip(node.inputs, node.bwd(g)):
            if gin is None or not t.requires_grad:
                continue
            acc = adjoint.get(t.id)
            adjoint[t.id] = gin if acc is None else acc + gin

    grads = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and t.id not in produced_at and t.id not in grads:
                g = adjoint.get(t.id)
                grads[t.id] = g if g is not None else np.zeros_like(t.data)
                t.grad = grads[t.id]
    for p in params:
        if p.id not in grads:
            grads[p.id] = np.zeros_like(p.data)
            p.grad = grads[p.id]
    for g in grads.values():
        _check_finite(g, "gradient")
    return grads


def grad_check(f, point, h=1e-6):
    """Max relative error between taped and central-difference gradients.

    ``f`` maps one tensor to a scalar tensor. The error per coordinate is
    |analytic - numeric| / max(1, |analytic|); the max over coordinates is
    returned.
    """
    if h <= 0:
        raise ContractError("grad_check step h must be positive")
    x = Tensor(point.data.copy(), requires_grad=True)
    tape = Tape()
    with tape:
        y = f(x)
    if y.data.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    analytic = backward(y, tape, params=(x,))[x.id].ravel()

    numeric = np.empty_like(analytic)
    flat = x.data.ravel()
    for i in range(flat.size):
        bumped = x.data.copy()
        bumped.ravel()[i] = flat[i] + h
        fp = f(Tensor(bumped)).item()
        bumped.ravel()[i] = flat[i] - h
        fm = f(Tensor(bumped)).item()
        numeric[i] = (fp - fm) / (2.0 * h)
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max())
