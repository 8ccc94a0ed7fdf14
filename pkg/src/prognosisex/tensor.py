"""Dense tensors with reverse-mode automatic differentiation.

The primitive set is closed: matmul, conv2d, nearest 2x upsampling, add,
mul, silu, group_norm, sum, mean, softmax, log, abs, plus the structural
ops reshape/transpose/index that only move values around. Everything else
is composed from these.
"""
from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward_fn, op):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out.op = op
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bw, "add")


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), bw, "mul")


def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), bw, "matmul")


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation of an NCHW input with an OIHW kernel."""
    x = as_tensor(x)
    w = as_tensor(w, like=x)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    p, s = padding, stride
    Hp, Wp = H + 2 * p, W + 2 * p
    if Hp < kh or Wp < kw:
        raise ShapeError("conv2d", x.shape, w.shape)
    Ho, Wo = (Hp - kh) // s + 1, (Wp - kw) // s + 1
    # channel-major columns (C, kh, kw, B, Ho, Wo) keep the copies contiguous
    xc = x.data.transpose(1, 0, 2, 3)
    if p:
        xc = np.pad(xc, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((C, kh, kw, B, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xc[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s]
    cols = cols.reshape(C * kh * kw, -1)
    wmat = w.data.reshape(O, -1)
    out = (wmat @ cols).reshape(O, B, Ho, Wo)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b, like=x)
        if b.shape != (O,):
            raise ShapeError("conv2d bias", b.shape, (O,))
        out += b.data[:, None, None, None]
        parents = (x, w, b)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(O, -1)
        dw = (gm @ cols.T).reshape(w.shape)
        dx = None
        if x.requires_grad:
            dcols = (wmat.T @ gm).reshape(C, kh, kw, B, Ho, Wo)
            dxc = np.zeros((C, B, Hp, Wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxc[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += dcols[:, i, j]
            dx = np.ascontiguousarray(dxc[:, :, p:p + H, p:p + W].transpose(1, 0, 2, 3))
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return _node(out, parents, bw, "conv2d")


def upsample2x(x):
    """Nearest-neighbour 2x spatial upsampling of an NCHW tensor."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("upsample2x", x.shape)
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        B, C, H, W = x.shape
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _node(out, (x,), bw, "upsample2x")


def silu(x):
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def bw(g):
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)

    return _node(out, (x,), bw, "silu")


def group_norm(x, groups, gamma, beta, eps=1e-5):
    x = as_tensor(x)
    gamma = as_tensor(gamma, like=x)
    beta = as_tensor(beta, like=x)
    B, C = x.shape[:2]
    if C % groups or gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError("group_norm", x.shape, gamma.shape, beta.shape)
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    bshape = (1, C) + (1,) * (x.data.ndim - 2)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.data.ndim))

    def bw(g):
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        dxh = (g * gamma.data.reshape(bshape)).reshape(B, groups, -1)
        xh = xhat.reshape(B, groups, -1)
        n = xh.shape[2]
        dx = inv / n * (n * dxh - dxh.sum(axis=2, keepdims=True)
                        - xh * (dxh * xh).sum(axis=2, keepdims=True))
        return dx.reshape(x.shape), dgamma, dbeta

    return _node(out, (x, gamma, beta), bw, "group_norm")


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _node(out, (x,), bw, "mean")


def softmax(x, axis=-1):
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    sm = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (sm * (g - (g * sm).sum(axis=axis, keepdims=True)),)

    return _node(sm, (x,), bw, "softmax")


def log(x, floor=None):
    """Natural log; values below ``floor`` are clamped and pass no gradient."""
    x = as_tensor(x)
    v = x.data if floor is None else np.maximum(x.data, floor)
    out = np.log(v)

    def bw(g):
        d = g / v
        if floor is not None:
            d = np.where(x.data >= floor, d, 0.0).astype(x.dtype)
        return (d,)

    return _node(out, (x,), bw, "log")


def tabs(x):
    x = as_tensor(x)

    def bw(g):
        return (g * np.sign(x.data),)

    return _node(np.abs(x.data), (x,), bw, "abs")


def l1_loss(pred, target):
    """Mean absolute error, composed from add/abs/mean."""
    return mean(tabs(add(pred, mul(as_tensor(target, like=as_tensor(pred)), -1.0))))


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None

    def bw(g):
        return (g.reshape(x.shape),)

    return _node(out, (x,), bw, "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    out = x.data.transpose(axes)
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        return (g.transpose(inv),)

    return _node(out, (x,), bw, "transpose")


def index(x, idx):
    x = as_tensor(x)
    out = np.asarray(x.data[idx])

    def bw(g):
        d = np.zeros_like(x.data)
        np.add.at(d, idx, g)
        return (d,)

    return _node(out, (x,), bw, "index")


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss):
    """Populate ``.grad`` on every tensor reachable from a scalar loss.

    Leaf gradients accumulate across calls; call ``zero_grad`` (or let the
    optimizer do it) between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    grads = {id(loss): np.ones_like(loss.data)}
    order = _topo(loss)
    for node in reversed(order):
        g = grads.pop(id(node))
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
