"""Small reverse-mode automatic differentiation engine over numpy arrays.

Only the operations the moment-retrieval network needs are provided. All
data is float64. Randomness is always drawn from an explicit
``numpy.random.Generator``.
"""
from __future__ import annotations

import numpy as np

MASK_VALUE = -1e30
LAYERNORM_EPS = 1e-5


class ShapeError(ValueError):
    pass


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Array node in a computation graph.

    ``grad`` is populated by :meth:`backward` for every node that requires
    gradients. Leaves created by the user default to ``requires_grad=False``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
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
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced in forward pass")
    if not req:
        return Tensor(data)
    return Tensor(data, True, parents, backward)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _node(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data
    return _node(out, (a, b), lambda g: (
        _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
        _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
    ))


def reciprocal(a):
    out = 1.0 / a.data
    return _node(out, (a,), lambda g: (-g * out * out,))


def relu(a):
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    x = a.data
    return _node(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a):
    sign = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * sign,))


def clip(a, lo, hi):
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _node(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    sa, sb = a.shape, b.shape
    return _node(out, (a, b), lambda g: (
        _unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)))


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)
    sa, sb = a.shape, b.shape
    return _node(out, (a, b), lambda g: (
        _unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)))


def smooth_l1(a, beta=1.0):
    """Elementwise Huber-style smooth L1 with transition at ``beta``."""
    x = a.data
    ax = np.abs(x)
    small = ax < beta
    out = np.where(small, 0.5 * x * x / beta, ax - 0.5 * beta)
    dx = np.where(small, x / beta, np.sign(x))
    return _node(out, (a,), lambda g: (g * dx,))


# ---------------------------------------------------------------- reductions

def tensor_sum(a, axis=None, keepdims=False):
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(out, (a,), back)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tensor_sum(a, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------- structure

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    flat = bd.ndim == 2 and ad.ndim > 2
    if flat:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + bd.shape[-1:])
    else:
        out = ad @ bd

    def back(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if flat:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _node(out, (a, b), back)


def reshape(a, shape):
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from exc
    return _node(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(Ellipsis), type(None))) for p in parts)


def getitem(a, idx):
    shape = a.shape
    basic = _is_basic(idx)

    def back(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), back)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: shapes {shapes} do not agree off axis {axis}") from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def gather_rows(a, index):
    """``out[b, p] = a[b, index[b, p]]`` for a (B, L, ...) tensor."""
    index = np.asarray(index)
    b_idx = np.arange(a.shape[0])[:, None]
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, (b_idx, index), g)
        return (full,)

    return _node(a.data[b_idx, index], (a,), back)


# ---------------------------------------------------------------- nn ops

def softmax(a, axis=-1):
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), back)


def layer_norm(a, eps=LAYERNORM_EPS):
    """Normalise over the last axis (no affine part)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    out = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gx),)

    return _node(out, (a,), back)


def dropout(a, p, rng=None, training=False):
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _node(a.data * keep, (a,), lambda g: (g * keep,))


def conv1d(x, weight, bias=None):
    """Width-3, stride-1, zero-padded convolution along axis 1.

    ``x`` is (B, L, C_in), ``weight`` is (3, C_in, C_out), output (B, L, C_out).
    """
    if weight.ndim != 3 or weight.shape[0] != 3 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {weight.shape}")
    xd, wd = x.data, weight.data
    B, L, C = xd.shape
    padded = np.zeros((B, L + 2, C))
    padded[:, 1:-1] = xd
    # window t = x[i - 1 + t]
    cols = np.concatenate([padded[:, t:t + L] for t in range(3)], axis=-1)
    wflat = wd.reshape(3 * C, -1)
    out = cols @ wflat
    parents = (x, weight)
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)

    def back(g):
        gx = gw = gb = None
        if x.requires_grad:
            gcols = g @ wflat.T
            gpad = np.zeros((B, L + 2, C))
            for t in range(3):
                gpad[:, t:t + L] += gcols[..., t * C:(t + 1) * C]
            gx = gpad[:, 1:-1]
        if weight.requires_grad:
            gw = (cols.reshape(-1, 3 * C).T @ g.reshape(-1, g.shape[-1])).reshape(wd.shape)
        if bias is not None:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return _node(out, parents, back)


# ---------------------------------------------------------------- init & optim

def xavier_init(shape, rng):
    """Glorot-uniform draw; fan-in/out are the last two axes scaled by the rest."""
    shape = tuple(shape)
    if len(shape) < 2:
        raise ShapeError(f"xavier_init: need at least 2 axes, got {shape}")
    receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[-2] * receptive, shape[-1] * receptive
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class AdamW:
    """Adam with decoupled weight decay.

    ``params`` maps names to leaf tensors. Decay is applied as
    ``p <- p * (1 - lr * wd)`` before the Adam update.
    """

    def __init__(self, params, lr=1e-4, weight_decay=1e-4, beta1=0.9, beta2=0.999,
                 eps=1e-8, no_decay=()):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.no_decay = set(no_decay)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"AdamW: non-finite gradient for parameter {name!r}")
            if name not in self.no_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self):
        out = {}
        for name in self.params:
            out[f"adam.m/{name}"] = self.m[name]
            out[f"adam.v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays, step_count):
        for name in self.params:
            self.m[name] = np.array(arrays[f"adam.m/{name}"], dtype=np.float64)
            self.v[name] = np.array(arrays[f"adam.v/{name}"], dtype=np.float64)
        self.step_count = int(step_count)


def adamw_step(params, grads, state):
    """Functional form: write ``grads`` into ``params`` and step ``state``."""
    for name, g in grads.items():
        params[name].grad = np.asarray(g, dtype=np.float64)
    state.step()
    return params
