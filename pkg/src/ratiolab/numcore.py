"""Small reverse-mode autodiff engine over float64 numpy arrays, plus Adam.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure propagating the upstream gradient to them. ``backward`` walks the DAG
in reverse topological order. Only tensors flagged ``requires_grad`` (the
parameters) keep their accumulated gradient; everything else is scratch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ParameterError(ValueError):
    """A hyperparameter is outside its valid range."""


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, value, requires_grad: bool = False, _parents=(), op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.value.reshape(-1)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value) -> Tensor:
    return Tensor(value, requires_grad=True, op="param")


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in ts)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _node(value: np.ndarray, parents: tuple[Tensor, ...], op: str, backward_fn) -> Tensor:
    out = Tensor(value, _parents=parents if _needs_grad(*parents) else (), op=op)
    if out._parents:
        out._backward = backward_fn
    return out


def dense_forward(W: Tensor, b: Tensor, x: Tensor) -> Tensor:
    """``y = W x + b``; ``x`` may carry a leading batch axis."""
    W, b, x = as_tensor(W), as_tensor(b), as_tensor(x)
    if W.value.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1:] != (W.shape[1],):
        raise DimensionError(
            f"dense: W{list(W.shape)} b{list(b.shape)} incompatible with x{list(x.shape)}"
        )
    y = x.value @ W.value.T + b.value

    def backward(g):
        if _needs_grad(W):
            gx = g.reshape(-1, g.shape[-1])
            W._accumulate(gx.T @ x.value.reshape(-1, x.shape[-1]))
        if _needs_grad(b):
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if _needs_grad(x):
            x._accumulate(g @ W.value)

    return _node(y, (W, b, x), "dense", backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0.0  # subgradient at 0 is 0

    def backward(g):
        x._accumulate(g * mask)

    return _node(np.where(mask, x.value, 0.0), (x,), "relu", backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if _needs_grad(a):
            a._accumulate(_unbroadcast(g, a.shape))
        if _needs_grad(b):
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.value + b.value, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if _needs_grad(a):
            a._accumulate(_unbroadcast(g, a.shape))
        if _needs_grad(b):
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(a.value - b.value, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if _needs_grad(a):
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if _needs_grad(b):
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    return _node(a.value * b.value, (a, b), "mul", backward)


def reduce_sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _node(x.value.sum(axis=axis, keepdims=keepdims), (x,), "sum", backward)


def reduce_mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.value.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _node(x.value.reshape(shape), (x,), "reshape", backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        x._accumulate(g - probs * g.sum(axis=axis, keepdims=True))

    return _node(out, (x,), "log_softmax", backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.value - x.value.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _node(p, (x,), "softmax", backward)


def gather(x: Tensor, index) -> Tensor:
    """Pick ``x[i, index[i]]`` along axis 1 for every row ``i``.

    Works for ``[B, A]`` (result ``[B]``) and ``[B, A, N]`` (result ``[B, N]``).
    """
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (x.shape[0],):
        raise DimensionError(f"gather: index{list(index.shape)} vs x{list(x.shape)}")
    rows = np.arange(x.shape[0])

    def backward(g):
        full = np.zeros_like(x.value)
        full[rows, index] = g
        x._accumulate(full)

    return _node(x.value[rows, index], (x,), "gather", backward)


def huber(delta: Tensor, kappa: float = 1.0) -> Tensor:
    """Elementwise Huber penalty of a residual tensor."""
    if kappa <= 0:
        raise ParameterError(f"huber kappa must be > 0, got {kappa}")
    delta = as_tensor(delta)
    d = delta.value
    small = np.abs(d) <= kappa
    out = np.where(small, 0.5 * d * d, kappa * (np.abs(d) - 0.5 * kappa))

    def backward(g):
        delta._accumulate(g * np.where(small, d, kappa * np.sign(d)))

    return _node(out, (delta,), "huber", backward)


def huber_loss(delta: float, kappa: float = 1.0) -> float:
    if kappa <= 0:
        raise ParameterError(f"huber kappa must be > 0, got {kappa}")
    a = abs(delta)
    return 0.5 * delta * delta if a <= kappa else kappa * (a - 0.5 * kappa)


def topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> list[Tensor]:
    """Populate ``.grad`` on every parameter reachable from a scalar ``loss``.

    Returns the parameters that received a gradient. Gradients accumulate, so
    callers zero them between steps.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    order = topological_order(loss)
    scratch = [n for n in order if not n.requires_grad]
    for n in scratch:
        n.grad = None
    loss.grad = np.ones_like(loss.value)
    params = []
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if node.requires_grad:
            params.append(node)
    for n in scratch:
        n.grad = None
    return params


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Iterable[Tensor], **hyper) -> "AdamState":
        params = list(params)
        return cls(
            m=[np.zeros_like(p.value) for p in params],
            v=[np.zeros_like(p.value) for p in params],
            **hyper,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState):
    """One bias-corrected Adam update, applied in place.

    A ``None`` gradient is treated as zero.
    """
    if not (len(params) == len(grads) == len(state.m)):
        raise DimensionError(
            f"adam: {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots"
        )
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.value)
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"adam: param{list(p.shape)} grad{list(g.shape)} moment{list(m.shape)}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        p.value -= (state.lr / c1) * m / denom
    return params, state
