"""Minimal dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient, so inference code pays nothing for the machinery::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = (w * w).sum()
    tape.backward(loss)
    w.grad  # array([2., 2., 2.])
"""

import threading

import numpy as np

from .errors import GradientCheckError, ShapeError, TapeError

_local = threading.local()

_SIGMOID_LO = np.nextafter(0.0, 1.0)
_SIGMOID_HI = np.nextafter(1.0, 0.0)


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output, inputs, backward):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations for one training step.

    Nodes are appended as operations execute, so the list is already in
    topological order. A tape can be differentiated once; record a new one
    for the next step.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        if self.consumed:
            raise TapeError("tape was already consumed by backward()")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, output, inputs, backward):
        self.nodes.append(_Node(output, inputs, backward))

    def backward(self, loss):
        """Populate ``.grad`` on every leaf tensor reachable from ``loss``.

        Gradients replace any previous ``.grad`` value. The tape is consumed.
        """
        if not isinstance(loss, Tensor):
            raise TypeError("loss must be a Tensor")
        if loss.data.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("backward() called twice on the same tape; record a new one")
        if loss._tape is not self:
            raise TapeError("loss was not produced under this tape")
        self.consumed = True

        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            input_grads = node.backward(g)
            for inp, ig in zip(node.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if inp._tape is None:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            leaf.grad = np.asarray(grads[key], dtype=np.float64).reshape(leaf.shape)
        self.nodes = []


def backward(loss):
    """Differentiate ``loss`` through the tape that recorded it."""
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor")
    if loss._tape is None:
        if loss.data.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        raise TapeError("loss was not produced under an active tape")
    loss._tape.backward(loss)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._tape = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    # arithmetic
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs, backward):
    tape = active_tape()
    out = Tensor(data)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        for axis in range(1, max(a.ndim, b.ndim) + 1):
            n = a.shape[-axis] if axis <= a.ndim else 1
            m = b.shape[-axis] if axis <= b.ndim else 1
            if n != m and n != 1 and m != 1:
                raise ShapeError(
                    f"{op}: shapes {a.shape} and {b.shape} disagree on axis {-axis}", axis=-axis
                ) from None
        raise


# elementwise binary ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), backward)


def neg(a):
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def where(cond, a, b):
    """Select ``a`` where ``cond`` holds, else ``b``; ``cond`` is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), sa),
            _unbroadcast(np.where(cond, 0.0, g), sb),
        )

    return _result(np.where(cond, a.data, b.data), (a, b), backward)


# unary ops


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    """Square root with a zero subgradient at 0 (used for standard deviations)."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _result(out, (a,), backward)


def relu(a):
    a = as_tensor(a)
    ad = a.data
    return _result(np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0),))


def sigmoid(a):
    """Logistic function, clipped so outputs stay strictly inside (0, 1)."""
    a = as_tensor(a)
    x = a.data
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = np.clip(out, _SIGMOID_LO, _SIGMOID_HI)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return tsum(a, axis=axes, keepdims=keepdims) / float(count)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    # drop one max entry (exactly 1) and use log1p, so saturated rows keep full precision
    first = np.expand_dims(np.argmax(x, axis=axis), axis)
    np.put_along_axis(e, first, 0.0, axis=axis)
    lse = np.log1p(e.sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _result(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softmax(a, axis=-1):
    a = as_tensor(a)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


# shape ops


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def _is_basic_index(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, np.integer)) or p is None or p is Ellipsis for p in parts)


def getitem(a, index):
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim:
            raise ShapeError(f"concat: rank {t.ndim} != {ref.ndim}")
        for i in range(ref.ndim):
            if i != ax and t.shape[i] != ref.shape[i]:
                raise ShapeError(f"concat: shapes {ref.shape} and {t.shape} disagree on axis {i}", axis=i)
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=ax),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=ax)),
    )


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    return _result(
        np.stack([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != (b.shape[0] if b.ndim == 1 else b.shape[-2]):
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} differ", axis=-1)
    ad, bd = a.data, b.data
    a2 = ad[None, :] if ad.ndim == 1 else ad
    b2 = bd[:, None] if bd.ndim == 1 else bd
    out = a2 @ b2
    if bd.ndim == 1:
        out = out[..., 0]
    if ad.ndim == 1:
        out = out[..., 0, :] if bd.ndim > 1 else out[..., 0]

    def backward(g):
        g2 = g[..., None] if bd.ndim == 1 else g
        if ad.ndim == 1:
            g2 = g2[..., None, :]
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(bd.shape)
        return ga, gb

    return _result(out, (a, b), backward)


def affine(x, weight, bias=None):
    """``weight @ x + bias`` applied over the last axis of ``x``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2:
        raise ShapeError(f"affine: weight must be 2-D, got {weight.shape}")
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"affine: input dim {x.shape[-1]} does not match weight columns {weight.shape[1]}", axis=-1
        )
    out = matmul(x, transpose(weight))
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"affine: bias shape {bias.shape} != ({weight.shape[0]},)", axis=0)
        out = out + bias
    return out


def conv1d(x, kernel, dilation=1, bias=None):
    """Dilated 1-D convolution with zero "same" padding.

    ``x`` is ``C_in x T`` or ``B x C_in x T``; ``kernel`` is ``C_out x C_in x K``.
    ``out[c, t] = sum_{i,k} kernel[c, i, k] * x_pad[i, t + (k - K//2) * dilation]``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 3:
        raise ShapeError(f"conv1d: kernel must be 3-D, got {kernel.shape}")
    if dilation < 1:
        raise ValueError("dilation must be a positive integer")
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 3:
        raise ShapeError(f"conv1d: input must be 2-D or 3-D, got {x.shape}")
    B, C, T = xd.shape
    O, Ck, K = kernel.shape
    if C != Ck:
        raise ShapeError(f"conv1d: input has {C} channels but kernel expects {Ck}", axis=-2)
    if T < 1:
        raise ShapeError("conv1d: empty time axis", axis=-1)

    offsets = (np.arange(K) - K // 2) * dilation
    left = int(max(0, -offsets.min()))
    right = int(max(0, offsets.max()))
    if K == 1:
        cols = xd
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (left, right)))
        cols = np.stack([xp[:, :, left + o : left + o + T] for o in offsets], axis=2).reshape(B, C * K, T)
    w2 = kernel.data.reshape(O, C * K)
    out = np.matmul(w2, cols)
    if unbatched:
        out = out[0]

    def backward(g):
        g3 = g[None] if unbatched else g
        gk = None
        if kernel.requires_grad:
            gk = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(O, C, K)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g3)
            if K == 1:
                gx = gcols
            else:
                gcols = gcols.reshape(B, C, K, T)
                gpad = np.zeros((B, C, T + left + right))
                for k, o in enumerate(offsets):
                    gpad[:, :, left + o : left + o + T] += gcols[:, :, k]
                gx = gpad[:, :, left : left + T]
            if unbatched:
                gx = gx[0]
        return gx, gk

    out_t = _result(out, (x, kernel), backward)
    if bias is not None:
        out_t = out_t + reshape(as_tensor(bias), (O, 1))
    return out_t


# gradient checking


def _named(params):
    if isinstance(params, dict):
        return dict(params)
    if isinstance(params, Tensor):
        return {params.name or "param0": params}
    return {(p.name or f"param{i}"): p for i, p in enumerate(params)}


def _scalar_value(out, name):
    value = float(np.asarray(out.data if isinstance(out, Tensor) else out).reshape(-1)[0])
    if not np.isfinite(value):
        raise GradientCheckError(f"non-finite output while perturbing parameter {name!r}", parameter=name)
    return value


def finite_difference_check(model_fn, params, step=1e-5, per_parameter=False, elementwise=False):
    """Compare tape gradients with central finite differences.

    ``model_fn`` takes no arguments and returns a scalar Tensor computed from
    ``params``. For each parameter the error is
    ``||analytic - numeric|| / max(1e-12, ||numeric||)`` (L2 over the tensor);
    the maximum over parameters is returned, or a per-parameter dict.
    ``elementwise=True`` takes the ratio per element instead, which is useful
    for locating a bad entry but blows up wherever the true gradient is below
    finite-difference resolution.
    """
    named = _named(params)
    for p in named.values():
        p.data = np.array(p.data, dtype=np.float64, copy=True)
        p.requires_grad = True
        p.grad = None

    with Tape() as tape:
        loss = model_fn()
    _scalar_value(loss, "<unperturbed>")
    tape.backward(loss)

    report = {}
    for name, p in named.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = _scalar_value(model_fn(), name)
            flat[i] = orig - step
            f_minus = _scalar_value(model_fn(), name)
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * step)
        diff = analytic.reshape(-1) - numeric
        if elementwise:
            err = np.abs(diff) / np.maximum(1e-12, np.abs(numeric))
            report[name] = float(err.max()) if err.size else 0.0
        else:
            report[name] = float(np.linalg.norm(diff) / max(1e-12, np.linalg.norm(numeric)))
    if per_parameter:
        return report
    return max(report.values()) if report else 0.0
