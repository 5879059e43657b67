"""Small reverse-mode autodiff over numpy arrays.

Every op records a closure that pushes the output gradient back to its
inputs. ``Tensor.backward`` walks the graph in reverse topological order
once. Inside ``no_grad()`` nothing is recorded, which is what scoring and
evaluation use.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    # make ndarray-op-Tensor defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise GradientError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise GradientError("loss does not depend on any parameter (no graph recorded)")

        order = []
        seen = set()
        stack = [(self, False)]
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

        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents, backward):
    """Wrap ``data`` as an op output; ``backward(g)`` returns one grad per parent."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return make_node(out, (a, b), back)


def power(a, p):
    a = as_tensor(a)
    ad = a.data
    return make_node(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(
            f"matmul: {a.name or 'lhs'} {a.shape} incompatible with {b.name or 'rhs'} {b.shape}"
        )
    ad, bd = a.data, b.data

    def back(g):
        if bd.ndim == 2 and ad.ndim == 2:
            return g @ bd.T, ad.T @ g
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_node(ad @ bd, (a, b), back)


def linear(x, w, b):
    """``x @ w + b`` as a single node; x is (N, in), w (in, out), b (out,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with {w.name or 'weight'} {w.shape}")
    xd, wd = x.data, w.data
    need_x = x.requires_grad

    def back(g):
        return (g @ wd.T if need_x else None), xd.T @ g, g.sum(axis=0)

    return make_node(xd @ wd + b.data, (x, w, b), back)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    ad = a.data
    return make_node(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return make_node(a.data * mask, (a,), lambda g: (g * mask,))


def softplus(a):
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return make_node(out, (a,), lambda g: (g * _sigmoid(ad),))


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_node(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(a, idx):
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic_index(idx)

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_node(a.data[idx], (a,), back)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def cumsum(a, axis=-1):
    a = as_tensor(a)

    def back(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return make_node(np.cumsum(a.data, axis=axis), (a,), back)


def take_along_axis(a, idx, axis=-1):
    """Gather ``a`` along ``axis`` with integer ``idx`` (broadcast like numpy)."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    shape = a.shape
    out = np.take_along_axis(a.data, idx, axis=axis)

    def back(g):
        ax = axis % g.ndim
        full_shape = list(g.shape)
        full_shape[ax] = shape[ax]
        full = np.zeros(full_shape, dtype=DTYPE)
        grids = list(np.ix_(*[np.arange(n) for n in g.shape]))
        grids[ax] = np.broadcast_to(idx, g.shape)
        np.add.at(full, tuple(np.broadcast_arrays(*grids)), g)
        return (_unbroadcast(full, shape),)

    return make_node(out, (a,), back)


def where(cond, a, b):
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant mask."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return make_node(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)),
    )


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (a,), back)


def dropout(x, rate, mode="eval", rng=None, mask=None):
    """Inverted dropout.

    ``mode`` is ``"train"``, ``"eval"`` or ``"mc"``. In ``"eval"`` the input is
    returned untouched. ``mask`` (a 0/1 array broadcastable to ``x``) overrides
    sampling so callers can fix a mask for the lifetime of a handle.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval", "mc"):
        raise ValueError(f"unknown dropout mode {mode!r}")
    if mode == "eval" or (rate == 0.0 and mask is None):
        return x
    if mask is None:
        if rng is None:
            raise ValueError("dropout in train/mc mode needs an rng or an explicit mask")
        mask = rng.random(x.shape) >= rate
    return mul(x, np.asarray(mask, dtype=DTYPE) * (1.0 / (1.0 - rate)))


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)


def kaiming_uniform(fan_in, fan_out, rng):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class NAdam:
    """NAdam (Nesterov-corrected Adam) with decoupled weight decay.

    Update for step t (1-based)::

        m = b1*m + (1-b1)*g
        v = b2*v + (1-b2)*g^2
        m_hat = b1*m/(1-b1^(t+1)) + (1-b1)*g/(1-b1^t)
        v_hat = v/(1-b2^t)
        p <- p*(1 - lr*wd) - lr*m_hat/(sqrt(v_hat)+eps)

    Parameters are re-bound as views into one flat buffer so the update is
    a handful of vector ops.
    """

    def __init__(self, params, lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        sizes = [p.data.size for p in self.params]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.flat = np.concatenate([p.data.reshape(-1) for p in self.params]) if self.params else np.zeros(0)
        for p, a, b in zip(self.params, self._offsets[:-1], self._offsets[1:]):
            p.data = self.flat[a:b].reshape(p.data.shape)
        self.m = np.zeros_like(self.flat)
        self.v = np.zeros_like(self.flat)
        self._grad = np.empty_like(self.flat)
        self._tmp = np.empty_like(self.flat)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _flat_grad(self):
        g = self._grad
        for p, a, b in zip(self.params, self._offsets[:-1], self._offsets[1:]):
            if p.grad is None:
                g[a:b] = 0.0
            else:
                g[a:b] = p.grad.reshape(-1)
        # a finite sum implies finite entries; only scan on failure
        if np.isfinite(g.sum()) or np.all(np.isfinite(g)):
            return g
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        i = int(np.searchsorted(self._offsets, bad, side="right")) - 1
        raise GradientError(f"non-finite gradient in parameter {self.params[i].name or i}")

    def step(self):
        g = self._flat_grad()
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        m, v, tmp = self.m, self.v, self._tmp
        m *= b1
        np.multiply(g, 1.0 - b1, out=tmp)
        m += tmp
        v *= b2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v += tmp
        # tmp <- bias-corrected Nesterov momentum, g reused for the denominator
        np.multiply(m, b1 / (1.0 - b1 ** (t + 1)), out=tmp)
        g *= (1.0 - b1) / (1.0 - b1**t)
        tmp += g
        np.sqrt(v, out=g)
        g *= 1.0 / np.sqrt(1.0 - b2**t)
        g += self.eps
        tmp /= g
        tmp *= self.lr
        if self.weight_decay:
            self.flat *= 1.0 - self.lr * self.weight_decay
        self.flat -= tmp

    def state_dict(self):
        return {"step": self.step_count, "m": self.m.copy(), "v": self.v.copy()}


def numerical_grad(f, param, h=1e-5, indices=None):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. ``param``.

    ``indices`` restricts the check to some flat positions; other entries are
    left at NaN.
    """
    flat = param.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        old = flat[i]
        flat[i] = old + h
        fp = float(f())
        flat[i] = old - h
        fm = float(f())
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(param.shape)
