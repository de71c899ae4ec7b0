"""Minimal reverse-mode autodiff over dense numpy arrays.

Covers exactly the operations the video transformer and the motion-flow
loss need: matmul, transpose/permute/reshape, add/sub/scale/mul,
temperature softmax, layer norm, gelu, row gather, mean over an axis and
sum of squares. Forward values are plain numpy; gradients are recorded on
an explicit :class:`Tape` and replayed in reverse.

Model storage and generation run in float32; gradient-check paths build
their tensors in float64 (f32 central differences are too noisy to assert
tight tolerances).
"""

from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    """Operand dims violate an operation's shape rule."""


_SUPPORTED_DTYPES = (np.float32, np.float64)

# one active tape at a time; generation runs own their tape exclusively
_ACTIVE_TAPE = None


class Tensor:
    """Dense real array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.dtype(np.float32), np.dtype(np.float64)) \
                else np.float64
        if np.dtype(dtype).type not in _SUPPORTED_DTYPES:
            raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
        self.data = arr if arr.dtype == np.dtype(dtype) else arr.astype(dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")

    def copy(self):
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; all routing goes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    """One recorded op: inputs, output identity, and its backward rule."""

    __slots__ = ("inputs", "out_id", "backward")

    def __init__(self, inputs, out_id, backward):
        self.inputs = inputs
        self.out_id = out_id
        self.backward = backward


class Tape:
    """Ordered record of ops; a single reverse sweep yields all gradients.

    Use as a context manager around the forward computation. Ops record a
    node whenever any input requires a gradient; outside an active tape no
    recording happens and outputs never require gradients (inference mode).
    """

    def __init__(self):
        self.nodes = []
        self._produced = set()
        self._watched = {}

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active; tapes are single-owner")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def watch(self, tensor):
        """Register a leaf so backward() fills its grad even off-path."""
        if tensor.requires_grad:
            self._watched[id(tensor)] = tensor

    def _record(self, out, inputs, backward):
        for x in inputs:
            if x.requires_grad and id(x) not in self._produced:
                self._watched[id(x)] = x
        out.requires_grad = True
        self._produced.add(id(out))
        self.nodes.append(_Node(inputs, id(out), backward))

    def backward(self, out):
        """Accumulate gradients of a scalar output into every watched leaf.

        Leaves that do not feed the output get a zero grad of their shape.
        """
        if not isinstance(out, Tensor) or out.size != 1:
            shape = out.shape if isinstance(out, Tensor) else type(out)
            raise ValueError(f"backward needs a scalar tensor output, got {shape}")
        if id(out) not in self._produced:
            raise ValueError("output was not produced through this tape")

        grads = {id(out): np.ones_like(out.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.out_id, None)
            if g is None:
                continue
            contribs = node.backward(g)
            for x, gx in zip(node.inputs, contribs):
                if gx is None or not x.requires_grad:
                    continue
                key = id(x)
                if key in grads:
                    grads[key] = grads[key] + gx
                else:
                    grads[key] = gx

        for key, leaf in self._watched.items():
            acc = grads.get(key)
            leaf.grad = np.zeros_like(leaf.data) if acc is None else acc.astype(leaf.data.dtype, copy=False)


def _tensorize(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_finite(op, *arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{op}: non-finite values in operand")


def _check_dtypes(op, *tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ValueError(f"{op}: mixed dtypes {dt} and {t.data.dtype}")


def _maybe_record(out, inputs, backward):
    tape = _ACTIVE_TAPE
    if tape is None:
        return out
    if any(x.requires_grad for x in inputs):
        tape._record(out, inputs, backward)
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b):
    """Elementwise sum with numpy broadcasting."""
    b = _tensorize(b, a)
    _check_dtypes("add", a, b)
    _check_finite("add", a.data, b.data)
    try:
        out_data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    out = Tensor(out_data)

    def backward(g):
        return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]

    return _maybe_record(out, [a, b], backward)


def sub(a, b):
    """Elementwise difference with numpy broadcasting."""
    b = _tensorize(b, a)
    _check_dtypes("sub", a, b)
    _check_finite("sub", a.data, b.data)
    try:
        out_data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    out = Tensor(out_data)

    def backward(g):
        return [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)]

    return _maybe_record(out, [a, b], backward)


def mul(a, b):
    """Elementwise product with numpy broadcasting."""
    b = _tensorize(b, a)
    _check_dtypes("mul", a, b)
    _check_finite("mul", a.data, b.data)
    try:
        out_data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    out = Tensor(out_data)
    a_data, b_data = a.data, b.data

    def backward(g):
        return [_unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)]

    return _maybe_record(out, [a, b], backward)


def scale(a, s):
    """Multiply by a python scalar."""
    s = float(s)
    if not math.isfinite(s):
        raise ValueError("scale: non-finite scalar")
    _check_finite("scale", a.data)
    out = Tensor(a.data * a.data.dtype.type(s))

    def backward(g):
        return [g * s]

    return _maybe_record(out, [a], backward)


def matmul(a, b):
    """Matrix product; 2-d, or 3-d with matching leading batch dim."""
    _check_dtypes("matmul", a, b)
    _check_finite("matmul", a.data, b.data)
    if a.ndim not in (2, 3) or b.ndim not in (2, 3) or a.ndim != b.ndim:
        raise ShapeError(f"matmul: need equal-rank 2-d or 3-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: shapes {a.shape} x {b.shape} do not align")
    out = Tensor(a.data @ b.data)
    a_data, b_data = a.data, b.data

    def backward(g):
        return [g @ np.swapaxes(b_data, -1, -2), np.swapaxes(a_data, -1, -2) @ g]

    return _maybe_record(out, [a, b], backward)


def transpose(a):
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 dims, got {a.shape}")
    _check_finite("transpose", a.data)
    out = Tensor(np.swapaxes(a.data, -1, -2).copy())

    def backward(g):
        return [np.swapaxes(g, -1, -2)]

    return _maybe_record(out, [a], backward)


def permute(a, axes):
    """Reorder axes."""
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {a.shape}")
    _check_finite("permute", a.data)
    out = Tensor(np.transpose(a.data, axes).copy())
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return [np.transpose(g, inverse)]

    return _maybe_record(out, [a], backward)


def reshape(a, shape):
    """Row-major reshape."""
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    _check_finite("reshape", a.data)
    out = Tensor(a.data.reshape(shape).copy())
    in_shape = a.shape

    def backward(g):
        return [g.reshape(in_shape)]

    return _maybe_record(out, [a], backward)


def softmax(a, temperature=1.0):
    """Row-stochastic softmax(temperature * a) over the last axis.

    Subtracts the row max before exponentiation so high temperatures
    cannot overflow.
    """
    temperature = float(temperature)
    if not math.isfinite(temperature):
        raise ValueError("softmax: non-finite temperature")
    _check_finite("softmax", a.data)
    z = a.data * a.data.dtype.type(temperature)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return [temperature * y * (g - inner)]

    return _maybe_record(out, [a], backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean, unit variance, then affine."""
    _check_dtypes("layer_norm", x, gamma, beta)
    _check_finite("layer_norm", x.data, gamma.data, beta.data)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: params {gamma.shape}/{beta.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    std = np.sqrt(var + x.data.dtype.type(eps))
    xhat = (x.data - mu) / std
    out = Tensor(gamma.data * xhat + beta.data)
    gamma_data = gamma.data

    def backward(g):
        dxhat = g * gamma_data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) / std
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        return [dx, dgamma, dbeta]

    return _maybe_record(out, [x, gamma, beta], backward)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x):
    """Tanh-approximation gelu."""
    _check_finite("gelu", x.data)
    xd = x.data
    u = _GELU_C * (xd + _GELU_A * xd ** 3)
    t = np.tanh(u)
    out = Tensor(0.5 * xd * (1.0 + t))

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * xd ** 2)
        return [g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * du)]

    return _maybe_record(out, [x], backward)


def gather_rows(table, indices):
    """Select rows of a 2-d table; gradient scatter-adds into the table."""
    if table.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-d, got {table.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim > 1:
        raise ShapeError(f"gather_rows: indices must be scalar or 1-d, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {table.shape[0]} rows")
    _check_finite("gather_rows", table.data)
    out = Tensor(table.data[idx].copy())
    n_rows = table.shape[0]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return [gt]

    return _maybe_record(out, [table], backward)


def mean_axis(a, axis):
    """Mean over one axis (dropped from the result)."""
    axis = int(axis)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"mean_axis: axis {axis} invalid for {a.shape}")
    axis = axis % a.ndim
    _check_finite("mean_axis", a.data)
    out = Tensor(a.data.mean(axis=axis))
    n = a.shape[axis]

    def backward(g):
        return [np.repeat(np.expand_dims(g, axis), n, axis=axis) / n]

    return _maybe_record(out, [a], backward)


def sum_squares(a):
    """Scalar sum of squared entries."""
    _check_finite("sum_squares", a.data)
    out = Tensor(np.array(np.sum(a.data * a.data), dtype=a.data.dtype))
    a_data = a.data

    def backward(g):
        return [2.0 * a_data * g]

    return _maybe_record(out, [a], backward)


def finite_diff_check(fn, point, eps):
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must map a Tensor to a scalar Tensor deterministically; it is
    evaluated twice at ``point`` and rejected on any bit difference. The
    analytic gradient comes from a fresh tape; the numeric one perturbs
    each coordinate by +-eps with no tape active, so the two routes stay
    independent. Error is |analytic - numeric| / max(|analytic|, 1e-8),
    maximized over coordinates.
    """
    if eps <= 0:
        raise ValueError("finite_diff_check: eps must be positive")
    base = np.asarray(point.data, dtype=np.float64)

    def eval_at(values):
        out = fn(Tensor(values, dtype=np.float64))
        if out.size != 1:
            raise ValueError("finite_diff_check: fn must return a scalar")
        return float(out.data.reshape(-1)[0])

    first, second = eval_at(base.copy()), eval_at(base.copy())
    if first != second:
        raise ValueError("finite_diff_check: fn is not deterministic")

    x = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        y = fn(x)
        if y.size != 1:
            raise ValueError("finite_diff_check: fn must return a scalar")
        tape.backward(y)
    analytic = x.grad.reshape(-1)

    numeric = np.empty_like(analytic)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = eval_at(base)
        flat[i] = orig - eps
        lo = eval_at(base)
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.abs(analytic), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
