"""Dense tensors with reverse-mode differentiation, plus the Adam optimizer.

Every learnable computation in the network goes through :class:`Tensor`.
Values live in a numpy array; each op that touches a tensor requiring a
gradient records a backward closure, and :meth:`Tensor.backward` replays
them in reverse topological order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_DEFAULT_DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def _check_finite(values, op):
    if not np.isfinite(values).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    return values


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or _DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype, copy=True) if not isinstance(data, np.ndarray) \
            else np.asarray(data, dtype=dtype)
        self.data = _check_finite(arr, "constructor")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __len__(self):
        return self.shape[0]

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    # -- graph plumbing ---------------------------------------------------
    @staticmethod
    def _make(values, parents, backward, op):
        """Wrap an op result; record it only if some parent needs a gradient."""
        out = Tensor.__new__(Tensor)
        out.data = _check_finite(values, op)
        out.grad = None
        out.name = None
        track = any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.shape)
        else:
            self.grad = self.grad + g

    def backward(self):
        """Back-propagate from this scalar; fills ``.grad`` on every leaf."""
        if self.data.size != 1:
            raise GradientError(f"backward needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise GradientError("root does not depend on any tensor requiring grad")
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
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                node._accumulate(g if g is not None else np.zeros_like(node.data))
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # tape cleared: intermediate nodes drop their closures
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()

    # -- operators --------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis):
        return reduce_max(self, axis)

    def softmax(self, axis=-1):
        return softmax(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.data.dtype)
    return a, b


def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = _pair(a, b)
    av, bv = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                _unbroadcast(g * av, bv.shape) if b.requires_grad else None)
    return Tensor._make(av * bv, (a, b), back, "mul")


def matmul(a, w):
    """``a @ w`` where ``w`` is 2-D and ``a`` has any leading shape ``(..., C)``."""
    a, w = _pair(a, w)
    if a.ndim < 1 or w.ndim != 2 or a.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {w.shape}")
    av, wv = a.data, w.data
    # flatten leading axes: one BLAS call instead of one per stacked matrix
    a2 = av.reshape(-1, av.shape[-1])
    out_shape = av.shape[:-1] + (wv.shape[1],)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ wv.T).reshape(av.shape) if a.requires_grad else None
        gw = a2.T @ g2 if w.requires_grad else None
        return ga, gw
    return Tensor._make((a2 @ wv).reshape(out_shape), (a, w), back, "matmul")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,),
                        lambda g: (g * mask,), "relu")


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return Tensor._make(y, (x,), back, "softmax")


def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)
    return Tensor._make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back,
                        "reduce_sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(reduce_sum(x, axis, keepdims), 1.0 / n)


def reduce_max(x, axis):
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, arg, axis=axis)

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        return (gx,)
    return Tensor._make(np.squeeze(out, axis), (x,), back, "reduce_max")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    dtype = tensors[0].dtype
    tensors = [t if t.dtype == dtype else Tensor(t.data, dtype=dtype) for t in tensors]
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat shape mismatch {[t.shape for t in tensors]} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=ax))
    return Tensor._make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), back,
                        "concat")


def gather(x, idx):
    """Batched row gather: ``out[b, ...] = x[b, idx[b, ...]]``.

    ``x`` is ``(B, N, C)``, ``idx`` an integer array ``(B, ...)``; the result has
    shape ``idx.shape + (C,)``.
    """
    x = as_tensor(x)
    idx = np.asarray(idx)
    if x.ndim != 3 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather expects (B,N,C) and (B,...) got {x.shape}, {idx.shape}")
    B, N, C = x.shape
    if idx.size and (idx.min() < 0 or idx.max() >= N):
        raise IndexError(f"gather index out of range [0, {N})")
    flat = (idx.reshape(B, -1) + (np.arange(B) * N)[:, None]).reshape(-1)
    src = x.data.reshape(B * N, C)
    out = src[flat].reshape(idx.shape + (C,))

    def back(g):
        gx = np.zeros((B * N, C), dtype=g.dtype)
        np.add.at(gx, flat, g.reshape(-1, C))
        return (gx.reshape(B, N, C),)
    return Tensor._make(out, (x,), back, "gather")


def l2_norm_last_axis(x, keepdims=True):
    """Euclidean norm over the last axis; subgradient 0 at the origin."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))

    def back(g):
        if not keepdims:
            g = g[..., None]
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, x.data / safe, 0.0) * g,)
    return Tensor._make(n if keepdims else n[..., 0], (x,), back, "l2_norm")


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def broadcast_to(x, shape):
    x = as_tensor(x)
    old = x.shape
    return Tensor._make(np.broadcast_to(x.data, shape).copy(), (x,),
                        lambda g: (_unbroadcast(g, old),), "broadcast_to")


def expand_dims(x, axis):
    x = as_tensor(x)
    return reshape(x, np.expand_dims(x.data, axis).shape)


# -- parameters and modules ---------------------------------------------------

def init_uniform(rng, fan_in, shape):
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal parameter container; submodules and tensors found by attribute."""

    def named_parameters(self, prefix=""):
        out = []
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((prefix + key, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(prefix + key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, n_in, n_out, rng):
        self.n_in, self.n_out = n_in, n_out
        self.weight = Tensor(init_uniform(rng, n_in, (n_in, n_out)), requires_grad=True)
        self.bias = Tensor(init_uniform(rng, n_in, (n_out,)), requires_grad=True)

    def __call__(self, x):
        return add(matmul(x, self.weight), self.bias)


class MLP(Module):
    """Shared per-point MLP over the last axis.

    ReLU follows every layer except, when ``final_activation`` is false, the last.
    """

    def __init__(self, n_in, widths, rng, final_activation=True):
        self.layers = []
        for w in widths:
            self.layers.append(Linear(n_in, w, rng))
            n_in = w
        self.final_activation = final_activation
        self.n_out = n_in

    def __call__(self, x):
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.final_activation:
                x = relu(x)
        return x


# -- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    decay_rate: float = 0.5
    decay_step: int = 80
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must lie in (0, 1]")
        if self.decay_step < 1:
            raise ValueError("decay_step must be positive")

    def effective_lr(self, epoch):
        return self.lr * self.decay_rate ** (epoch // self.decay_step)


def adam_step(params, state, epoch=0, round_to=None):
    """One bias-corrected Adam update on ``params`` (a name -> Tensor mapping).

    ``round_to`` (e.g. ``np.float32``) rounds parameters and moments after the
    update so the persisted state is exactly representable in that dtype.
    """
    if not isinstance(params, dict):
        params = {str(i): p for i, p in enumerate(params)}
    for name, p in params.items():
        if p.grad is None:
            raise GradientError(f"parameter {name!r} has no gradient")
    state.step_count += 1
    t = state.step_count
    lr = state.effective_lr(epoch)
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = p.grad
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new = p.data - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        if round_to is not None:
            new = new.astype(round_to).astype(p.data.dtype)
            m = m.astype(round_to).astype(p.data.dtype)
            v = v.astype(round_to).astype(p.data.dtype)
        p.data = _check_finite(new, "adam_step")
        state.first_moment[name] = m
        state.second_moment[name] = v
    return lr
