"""Parameter containers, a handful of layers and the Adam optimizer."""
import numpy as np

from . import tensor as T
from .rng import truncated_normal


def param(rng, shape, fan_in, dtype=np.float32):
    # fan-in scaled truncated normal
    return T.Tensor(truncated_normal(rng, shape, 1.0 / np.sqrt(fan_in), dtype), requires_grad=True)


def zeros(shape, dtype=np.float32):
    return T.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape, dtype=np.float32):
    return T.Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Module:
    """Minimal parameter tree: attributes that are Tensors, Modules or lists thereof."""

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            yield from _walk(val, prefix + name)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state, prefix=""):
        own = dict(self.named_parameters())
        missing = [k for k in own if prefix + k not in state]
        if missing:
            raise KeyError(f"checkpoint is missing parameters: {missing[:5]}")
        for k, p in own.items():
            arr = np.asarray(state[prefix + k])
            if arr.shape != p.shape:
                raise T.ShapeError(f"load {k}", p.shape, arr.shape)
            p.data = arr.astype(p.dtype)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _walk(val, name):
    if isinstance(val, T.Tensor):
        if val.requires_grad:
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, v in enumerate(val):
            yield from _walk(v, f"{name}.{i}")


class Linear(Module):
    def __init__(self, rng, n_in, n_out, bias=True):
        self.weight = param(rng, (n_in, n_out), n_in)
        self.bias = zeros((n_out,)) if bias else None

    def __call__(self, x):
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, k=3, stride=1, padding=None):
        self.weight = param(rng, (c_out, c_in, k, k), c_in * k * k)
        self.bias = zeros((c_out,))
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class GroupNorm(Module):
    def __init__(self, groups, channels):
        self.groups = groups
        self.gamma = ones((channels,))
        self.beta = zeros((channels,))

    def __call__(self, x):
        return T.group_norm(x, self.groups, self.gamma, self.beta)


class Adam:
    """Adam with bias-corrected moments. ``step`` clears gradients afterwards."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        if all(p.grad is None for p in self.params):
            raise RuntimeError("adam step called with no gradients populated")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - upd).astype(p.dtype)
            p.grad = None
