"""Dense float64 arrays with a small reverse-mode tape and Adam.

Every trainable part of the package is written against :class:`Node`.  A
``Node`` wraps a numpy array (2-D matrices mostly, batched 3-D stacks where it
saves a Python loop) and remembers how it was computed, so ``backward`` can
push gradients back to the leaves.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateVectorError, DimensionError

__all__ = [
    "Node", "param", "const", "as_node", "backward", "grad_check",
    "matmul", "add", "sub", "mul", "div", "neg", "relu", "sigmoid", "exp",
    "log", "absolute", "minimum", "maximum", "softmax_rows", "softmax",
    "log_softmax", "sum", "mean", "swapaxes", "reshape", "concat",
    "cosine", "AdamState", "Adam", "adam_step", "step_decay",
]


class Node:
    """One value on the tape."""

    __slots__ = ("value", "grad", "parents", "op", "requires_grad", "_backward")

    def __init__(self, value, parents: tuple = (), op: str = "leaf",
                 requires_grad: bool = False, backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._backward = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, idx): return _getitem(self, idx)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def param(value) -> Node:
    """A trainable leaf."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def const(value) -> Node:
    return Node(value)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _acc(node: Node, g: np.ndarray):
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad = node.grad + _unbroadcast(g, node.value.shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def bw(out):
        _acc(a, out.grad)
        _acc(b, out.grad)
    return Node(a.value + b.value, (a, b), "add", backward_fn=bw)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def bw(out):
        _acc(a, out.grad)
        _acc(b, -out.grad)
    return Node(a.value - b.value, (a, b), "sub", backward_fn=bw)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def bw(out):
        _acc(a, out.grad * b.value)
        _acc(b, out.grad * a.value)
    return Node(a.value * b.value, (a, b), "mul", backward_fn=bw)


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def bw(out):
        _acc(a, out.grad / b.value)
        _acc(b, -out.grad * a.value / b.value ** 2)
    return Node(a.value / b.value, (a, b), "div", backward_fn=bw)


def neg(a) -> Node:
    a = as_node(a)

    def bw(out):
        _acc(a, -out.grad)
    return Node(-a.value, (a,), "neg", backward_fn=bw)


def relu(a) -> Node:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    a = as_node(a)
    mask = a.value > 0

    def bw(out):
        _acc(a, out.grad * mask)
    return Node(np.where(mask, a.value, 0.0), (a,), "relu", backward_fn=bw)


def sigmoid(a) -> Node:
    a = as_node(a)
    x = a.value
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(out):
        _acc(a, out.grad * s * (1.0 - s))
    return Node(s, (a,), "sigmoid", backward_fn=bw)


def exp(a) -> Node:
    a = as_node(a)
    e = np.exp(a.value)

    def bw(out):
        _acc(a, out.grad * e)
    return Node(e, (a,), "exp", backward_fn=bw)


def log(a) -> Node:
    a = as_node(a)

    def bw(out):
        _acc(a, out.grad / a.value)
    return Node(np.log(a.value), (a,), "log", backward_fn=bw)


def absolute(a) -> Node:
    a = as_node(a)
    sign = np.sign(a.value)

    def bw(out):
        _acc(a, out.grad * sign)
    return Node(np.abs(a.value), (a,), "abs", backward_fn=bw)


def minimum(a, b) -> Node:
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = as_node(a), as_node(b)
    pick_a = a.value <= b.value

    def bw(out):
        _acc(a, out.grad * pick_a)
        _acc(b, out.grad * ~pick_a)
    return Node(np.where(pick_a, a.value, b.value), (a, b), "min", backward_fn=bw)


def maximum(a, b) -> Node:
    """Elementwise max; on ties the gradient goes to ``a``."""
    a, b = as_node(a), as_node(b)
    pick_a = a.value >= b.value

    def bw(out):
        _acc(a, out.grad * pick_a)
        _acc(b, out.grad * ~pick_a)
    return Node(np.where(pick_a, a.value, b.value), (a, b), "max", backward_fn=bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Node:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_node(a), as_node(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.value.shape[-1] != b.value.shape[-2]:
        raise DimensionError(
            f"matmul shape mismatch: {a.value.shape} x {b.value.shape}")

    def bw(out):
        g = out.grad
        if a.requires_grad:
            if a.value.ndim == 2 and g.ndim > 2:
                # shared 2-D left operand: fold the batch into the contraction
                g2 = np.moveaxis(g, -2, 0).reshape(g.shape[-2], -1)
                bb = np.broadcast_to(b.value, g.shape[:-2] + b.value.shape[-2:])
                b2 = np.moveaxis(bb, -2, 0).reshape(b.value.shape[-2], -1)
                _acc(a, g2 @ b2.T)
            else:
                _acc(a, g @ np.swapaxes(b.value, -1, -2))
        if b.requires_grad:
            _acc(b, np.swapaxes(a.value, -1, -2) @ g)
    return Node(a.value @ b.value, (a, b), "matmul", backward_fn=bw)


def softmax(a, axis: int = -1) -> Node:
    a = as_node(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(out):
        g = out.grad
        _acc(a, s * (g - (g * s).sum(axis=axis, keepdims=True)))
    return Node(s, (a,), "softmax", backward_fn=bw)


def softmax_rows(m) -> Node:
    """Row-wise softmax with max subtraction; each row sums to one."""
    return softmax(m, axis=-1)


def log_softmax(a, axis: int = -1) -> Node:
    a = as_node(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out_v = z - lse
    s = np.exp(out_v)

    def bw(out):
        g = out.grad
        _acc(a, g - s * g.sum(axis=axis, keepdims=True))
    return Node(out_v, (a,), "log_softmax", backward_fn=bw)


# ---------------------------------------------------------------- reductions & shape

def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    a = as_node(a)
    shape = a.value.shape

    def bw(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, shape))
    return Node(a.value.sum(axis=axis, keepdims=keepdims), (a,), "sum", backward_fn=bw)


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else np.prod(
        [a.value.shape[ax] for ax in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) / float(n)


def swapaxes(a, ax1: int, ax2: int) -> Node:
    a = as_node(a)

    def bw(out):
        _acc(a, np.swapaxes(out.grad, ax1, ax2))
    return Node(np.swapaxes(a.value, ax1, ax2), (a,), "swapaxes", backward_fn=bw)


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.value.shape

    def bw(out):
        _acc(a, out.grad.reshape(old))
    return Node(a.value.reshape(shape), (a,), "reshape", backward_fn=bw)


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is Ellipsis or p is None or isinstance(p, (int, np.integer, slice)) for p in parts)


def _getitem(a: Node, idx) -> Node:
    basic = _is_basic(idx)

    def bw(out):
        g = np.zeros_like(a.value)
        if basic:
            g[idx] = out.grad
        else:
            np.add.at(g, idx, out.grad)  # repeated indices accumulate
        _acc(a, g)
    return Node(a.value[idx], (a,), "getitem", backward_fn=bw)


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    sizes = [n.value.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]

    def bw(out):
        for n, g in zip(nodes, np.split(out.grad, cuts, axis=axis)):
            _acc(n, g)
    return Node(np.concatenate([n.value for n in nodes], axis=axis),
                tuple(nodes), "concat", backward_fn=bw)


# ---------------------------------------------------------------- backward

def _topo(root: Node) -> list[Node]:
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
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Fill ``.grad`` of every node reachable from a scalar ``root``.

    Gradients are reset first, so after the call ``p.grad`` is exactly
    d(root)/dp for each leaf ``p``; a node used twice receives the sum.
    """
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.value.shape}")
    order = _topo(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node)


def grad_check(f: Callable[[list], Node], params: list, h: float = 1e-5) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f(params)`` must return a scalar Node.  The relative error of a coordinate
    is ``|a - n| / max(1, |a|, |n|)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    out = f(params)
    backward(out)
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(params).item()
            flat[i] = orig - h
            fm = f(params).item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            rel = abs(gflat[i] - num) / max(1.0, abs(gflat[i]), abs(num))
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------- plain-array helpers

def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError(f"cosine shape mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateVectorError("cosine of a zero-norm vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              decay_mask: Sequence[bool] | None = None) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    Weight decay, when non-zero, is decoupled (applied to the weights directly,
    scaled by the learning rate) and only hits entries where ``decay_mask`` is
    true.
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.m[i].shape != p.shape:
            raise DimensionError(f"param {i}: shape {p.shape} vs grad {g.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1 - state.beta2) * g * g
        if state.weight_decay and (decay_mask is None or decay_mask[i]):
            p -= state.lr * state.weight_decay * p
        p -= state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)


class Adam:
    def __init__(self, params: Iterable[Node], lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, decay_mask=None):
        self.params = list(params)
        self.decay_mask = decay_mask
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                               weight_decay=weight_decay)

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = value

    def step(self):
        grads = [np.zeros_like(p.value) if p.grad is None else p.grad for p in self.params]
        adam_step(self.state, [p.value for p in self.params], grads, self.decay_mask)


def step_decay(base_lr: float, rate: float, every: int, epoch: int) -> float:
    """Learning rate multiplied by ``rate`` once per ``every`` completed epochs."""
    return base_lr * rate ** (epoch // every)
