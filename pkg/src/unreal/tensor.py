"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op records its parents and a backward closure on the output tensor.
``backward`` walks the recorded graph once in reverse topological order and
accumulates into the ``grad`` slot of each leaf that requires a gradient.
Intermediate gradients never touch ``grad`` slots.
"""

import contextlib
import struct
import threading

import numpy as np

from . import kernels


class TensorError(Exception):
    pass


class ShapeError(TensorError):
    def __init__(self, op, expected, actual):
        super().__init__(f"{op}: shape mismatch, expected {expected}, got {actual}")
        self.op = op
        self.expected = expected
        self.actual = actual


class NonFiniteError(TensorError):
    pass


class GraphError(TensorError):
    pass


_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: non-finite value in output")
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- differentiation ----------------------------------------------------------


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(out, grad=None):
    """Accumulate d(out)/d(leaf) into every reachable leaf's ``grad`` slot."""
    if not out.requires_grad:
        raise GraphError("backward called on a tensor with no recorded graph (run forward with grad enabled)")
    if grad is None:
        if out.size != 1:
            raise GraphError("output gradient required for non-scalar output")
        grad = np.ones_like(out.data)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != out.shape:
        raise ShapeError("backward", out.shape, grad.shape)

    grads = {id(out): grad}
    for node in reversed(_topo_order(out)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def gradients(loss, params):
    """Zero the grads of ``params`` (a name -> Tensor mapping), backprop, collect."""
    for p in params.values():
        p.grad = None
    backward(loss)
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


# --- elementwise --------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def scale(x, c):
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x):
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    y[~pos] = e / (1.0 + e)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x):
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), bw, "log_softmax")


# --- reductions and shape ops -------------------------------------------------


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(y), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    y = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size // max(np.asarray(y).size, 1) if axis is not None else x.size

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result(np.asarray(y), (x,), bw, "mean")


def reshape(x, shape):
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def take(x, index):
    """Basic or fancy indexing (the ``slice`` op)."""
    y = np.array(x.data[index], dtype=np.float64)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _result(y, (x,), bw, "slice")


def concat(xs, axis=0):
    xs = [as_tensor(x) for x in xs]
    y = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(y, tuple(xs), bw, "concat")


def stack(xs, axis=0):
    return concat([reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) for x in xs], axis=axis)


# --- linear algebra -----------------------------------------------------------


def matmul(a, b):
    if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", f"(..., {b.shape[0] if b.ndim == 2 else 'K'}) @ (K, M)", (a.shape, b.shape))

    def bw(g):
        ga = g @ b.data.T
        gb = np.outer(a.data, g) if a.ndim == 1 else a.data.T @ g
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def add_bias(x, b):
    """Add a per-channel bias: axis -3 for images, last axis otherwise."""
    axis = x.ndim - 3 if x.ndim >= 3 else x.ndim - 1
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise ShapeError("add_bias", (x.shape[axis],), b.shape)
    view = [1] * x.ndim
    view[axis] = -1
    others = tuple(i for i in range(x.ndim) if i != axis)

    def bw(g):
        return g, g.sum(axis=others)

    return _result(x.data + b.data.reshape(view), (x, b), bw, "add_bias")


def _batched(x, op):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(op, "C×H×W or N×C×H×W", x.shape)


def conv2d(x, w, stride=1):
    """Valid (unpadded) convolution. ``w`` is F×C×kH×kW."""
    xb, squeeze = _batched(x, "conv2d")
    n, c, h, wd = xb.shape
    if w.ndim != 4 or w.shape[1] != c:
        raise ShapeError("conv2d", f"kernel (F, {c}, kH, kW)", w.shape)
    f, _, kh, kw = w.shape
    if stride < 1 or kh > h or kw > wd:
        raise ShapeError("conv2d", f"kernel no larger than input {h}×{wd}, stride ≥ 1", (kh, kw, stride))
    cols = kernels.im2col(xb, kh, kw, stride)
    ho, wo = cols.shape[1], cols.shape[2]
    wmat = w.data.reshape(f, -1)
    y = (cols.reshape(-1, wmat.shape[1]) @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    y = np.ascontiguousarray(y)

    def bw(g):
        gb = g[None] if squeeze else g
        gt = gb.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (gt.T @ cols.reshape(-1, wmat.shape[1])).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gx = kernels.col2im((gt @ wmat).reshape(n, ho, wo, -1), c, h, wd, kh, kw, stride)
            if squeeze:
                gx = gx[0]
        return gx, gw

    return _result(y[0] if squeeze else y, (x, w), bw, "conv2d")


def deconv2d(x, w, stride=1):
    """Transposed convolution with zero padding. ``w`` is C_out×C_in×kH×kW.

    Output spatial size is (H - 1) * stride + kH. With ``wt = w`` swapped on
    its first two axes, this is the adjoint of ``conv2d(., wt, stride)``.
    """
    xb, squeeze = _batched(x, "deconv2d")
    n, cin, h, wd = xb.shape
    if w.ndim != 4 or w.shape[1] != cin:
        raise ShapeError("deconv2d", f"kernel (C_out, {cin}, kH, kW)", w.shape)
    cout, _, kh, kw = w.shape
    if stride < 1 or kh < stride or kw < stride:
        raise ShapeError("deconv2d", "kernel spatial dims ≥ stride ≥ 1", (kh, kw, stride))
    ho, wo = (h - 1) * stride + kh, (wd - 1) * stride + kw
    # rows: input channel, cols: (out channel, kh, kw)
    wmat = w.data.transpose(1, 0, 2, 3).reshape(cin, -1)
    xt = xb.transpose(0, 2, 3, 1).reshape(-1, cin)
    y = kernels.col2im((xt @ wmat).reshape(n, h, wd, -1), cout, ho, wo, kh, kw, stride)

    def bw(g):
        gb = g[None] if squeeze else g
        gcols = kernels.im2col(np.ascontiguousarray(gb), kh, kw, stride).reshape(-1, wmat.shape[1])
        gw = (xt.T @ gcols).reshape(cin, cout, kh, kw).transpose(1, 0, 2, 3)
        gx = None
        if x.requires_grad:
            gx = (gcols @ wmat.T).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gx[0] if squeeze else gx)
        return gx, np.ascontiguousarray(gw)

    return _result(y[0] if squeeze else y, (x, w), bw, "deconv2d")


# --- serialization ------------------------------------------------------------


def to_bytes(t):
    """Rank and dims as little-endian int64, then row-major little-endian float64."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    header = struct.pack(f"<q{data.ndim}q", data.ndim, *data.shape)
    return header + np.ascontiguousarray(data, dtype="<f8").tobytes()


def from_bytes(buf, offset=0):
    """Parse one tensor blob; returns (Tensor, offset just past the blob)."""
    (rank,) = struct.unpack_from("<q", buf, offset)
    offset += 8
    shape = struct.unpack_from(f"<{rank}q", buf, offset)
    offset += 8 * rank
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
    return Tensor(data), offset + 8 * count
