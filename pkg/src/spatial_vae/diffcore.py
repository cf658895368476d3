"""Define-by-run reverse-mode differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor`. When at least one input
requires a gradient, the result remembers its inputs and a backward rule;
:func:`backprop` walks that graph once in reverse topological order.
The tape is rebuilt for every forward pass, so there is no graph caching.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from . import _kernels


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

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
    def is_leaf(self):
        return self.backward_fn is None

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"only size-1 tensors convert to float, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __float__(self):
        return self.item()

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flag})"

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

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def parameter(data):
    """A leaf tensor that collects gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data, op):
    # a sum is one read pass; any NaN or Inf among the entries propagates
    if not math.isfinite(float(np.add.reduce(data, axis=None))):
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite value produced by {op!r}")


def _node(data, parents, backward_fn, op):
    _check_finite(data, op)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, False, (), None, op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward, "div")


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def square(a):
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sin(a):
    a = as_tensor(a)
    return _node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a):
    a = as_tensor(a)
    return _node(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def tanh_act(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (_kernels.tanh_grad(g, out),), "tanh")


def sigmoid(a):
    a = as_tensor(a)
    # tanh form keeps large |x| from overflowing exp
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]``; the gradient is zero where the clamp is active."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clip")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if b.ndim == 1:
            if a.requires_grad:
                ga = np.multiply.outer(g, b.data)
            if b.requires_grad:
                gb = np.tensordot(g, a.data, axes=(tuple(range(g.ndim)), tuple(range(g.ndim))))
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, W, b):
    """``x @ W + b`` over the last axis of ``x``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(f"linear shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    out = x2 @ W.data
    out += b.data

    def backward(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gW, gb

    return _node(out.reshape(lead + (W.shape[1],)), (x, W, b), backward, "linear")


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _node(out, (a,), backward, "sum")


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def _is_basic_index(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def getitem(a, index):
    a = as_tensor(a)
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(a.shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), backward, "getitem")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 backward, "concat")


def stack(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(np.stack([t.data for t in tensors], axis=axis), tuple(tensors),
                 backward, "stack")


def custom_op(data, parents, backward_fn, op):
    """Record a hand-written operation; ``backward_fn(g)`` returns one gradient per parent."""
    return _node(np.asarray(data, dtype=np.float64), tuple(parents), backward_fn, op)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topological_order(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backprop(loss, wrt=None):
    """Gradients of a scalar ``loss``.

    Returns a dict mapping each reachable leaf that requires a gradient to
    its gradient array. If ``wrt`` is given, returns a list aligned with it
    instead, with zeros for parameters the loss does not depend on.
    """
    if loss.size != 1:
        raise ValueError(f"backprop needs a scalar loss, got shape {loss.shape}")
    leaves = {}
    if loss.requires_grad:
        grads = {id(loss): np.ones(loss.shape)}
        for node in reversed(_topological_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                leaves[node] = np.array(g, dtype=np.float64)
                continue
            for parent, gp in zip(node.parents, node.backward_fn(g)):
                if gp is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + gp if key in grads else gp
    if wrt is None:
        return leaves
    return [leaves[p] if p in leaves else np.zeros(p.shape) for p in wrt]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kwargs):
        state = cls(**kwargs)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        return state

    def copy(self):
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                         [a.copy() for a in self.m], [a.copy() for a in self.v])


def adam_step(params, grads, state):
    """One bias-corrected ADAM update. Inputs are left untouched.

    Returns the new parameter arrays and the new state.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("params, grads and optimizer moments differ in count")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient passed to adam_step")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_params.append(p - state.lr * update)
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(state.lr, b1, b2, state.eps, step, new_m, new_v)


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------

def finite_diff_check(f, params, eps=1e-5):
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a list of tensors to a scalar tensor. The error at each
    coordinate is ``|ga - gfd| / max(1e-8, |ga| + |gfd|)``.
    """
    if not eps > 0:
        raise ValueError("finite-difference step must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]
    leaves = [parameter(p) for p in params]
    loss = f(leaves)
    if not math.isfinite(float(loss)):
        raise NonFiniteError("objective is not finite")
    analytic = backprop(loss, wrt=leaves)

    def value(arrays):
        out = float(f([Tensor(a) for a in arrays]))
        if not math.isfinite(out):
            raise NonFiniteError("objective is not finite under perturbation")
        return out

    worst = 0.0
    for k, p in enumerate(params):
        flat = p.reshape(-1)
        ga_flat = analytic[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = value(params)
            flat[i] = orig - eps
            down = value(params)
            flat[i] = orig
            gfd = (up - down) / (2.0 * eps)
            ga = ga_flat[i]
            err = abs(ga - gfd) / max(1e-8, abs(ga) + abs(gfd))
            worst = max(worst, err)
    return worst
