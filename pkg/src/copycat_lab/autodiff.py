"""Reverse-mode automatic differentiation on a per-step tape.

A ``Tape`` records every forward operation as a node holding the op kind,
the ids of its inputs, the forward value and a closure that maps the
incoming gradient to gradients for each input.  ``Tape.backward`` walks the
nodes in reverse creation order, which is a valid reverse topological order
because an op can only consume nodes that already exist.

All values are float64 numpy arrays.  Broadcasting is limited to bias-add
(a trailing-dimension vector added to a batch).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class UnknownOpError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None


class Tensor:
    """A float64 array bound to a tape node."""

    __slots__ = ("tape", "node_id")

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.node_id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.node_id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.value.reshape(-1)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node_id})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul_elementwise(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    gradients: dict[int, np.ndarray] = field(default_factory=dict)

    def _record(self, kind, inputs, value, grad_fn=None) -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(Node(kind, tuple(inputs), value, grad_fn))
        return Tensor(self, len(self.nodes) - 1)

    def leaf(self, value) -> Tensor:
        value = np.array(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1)
        return self._record("leaf", (), value)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        if loss.tape is not self:
            raise ValueError("loss belongs to a different tape")
        if loss.value.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.value)}
        for nid in range(loss.node_id, -1, -1):
            g = grads.get(nid)
            node = self.nodes[nid]
            if g is None or node.grad_fn is None:
                continue
            for src, gi in zip(node.inputs, node.grad_fn(g)):
                if gi is None:
                    continue
                if src in grads:
                    grads[src] = grads[src] + gi
                else:
                    grads[src] = gi
        self.gradients = grads
        return grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward() w.r.t. ``t``; zeros if unreachable."""
        g = self.gradients.get(t.node_id)
        return np.zeros_like(t.value) if g is None else g


def _as_tensor(tape: Tape, x) -> Tensor:
    return x if isinstance(x, Tensor) else tape.leaf(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise TypeError("at least one input must be a Tensor")


def _bias_compatible(a, b) -> bool:
    return b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape(-1, shape[-1]).sum(axis=0)


# -- ops ---------------------------------------------------------------------

def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(tape, a), _as_tensor(tape, b)
    av, bv = a.value, b.value
    if av.shape != bv.shape and not _bias_compatible(av, bv):
        raise ShapeError(f"add: incompatible shapes {av.shape} and {bv.shape}")
    sa, sb = av.shape, bv.shape
    return tape._record("add", (a.node_id, b.node_id), av + bv,
                        lambda g: (g, _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(tape, a), _as_tensor(tape, b)
    av, bv = a.value, b.value
    if av.shape != bv.shape and not _bias_compatible(av, bv):
        raise ShapeError(f"sub: incompatible shapes {av.shape} and {bv.shape}")
    sb = bv.shape
    return tape._record("sub", (a.node_id, b.node_id), av - bv,
                        lambda g: (g, -_reduce_to(g, sb)))


def mul_elementwise(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(tape, a), _as_tensor(tape, b)
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        raise ShapeError(f"mul_elementwise: incompatible shapes {av.shape} and {bv.shape}")
    return tape._record("mul_elementwise", (a.node_id, b.node_id), av * bv,
                        lambda g: (g * bv, g * av))


def matmul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(tape, a), _as_tensor(tape, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    return tape._record("matmul", (a.node_id, b.node_id), av @ bv,
                        lambda g: (g @ bv.T, av.T @ g))


def relu(x: Tensor) -> Tensor:
    xv = x.value
    # subgradient at 0 is 0
    active = (xv > 0).astype(np.float64)
    return x.tape._record("relu", (x.node_id,), xv * active, lambda g: (g * active,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return x.tape._record("tanh", (x.node_id,), y, lambda g: (g * (1.0 - y * y),))


def concat_lastdim(*xs) -> Tensor:
    if len(xs) == 1 and isinstance(xs[0], (list, tuple)):
        xs = tuple(xs[0])
    tape = _tape_of(*xs)
    xs = [_as_tensor(tape, x) for x in xs]
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise ShapeError(
                f"concat_lastdim: incompatible shapes {xs[0].shape} and {x.shape}")
    widths = [x.shape[-1] for x in xs]
    bounds = np.cumsum([0] + widths)

    def grad_fn(g):
        return [g[..., bounds[i]:bounds[i + 1]] for i in range(len(xs))]

    value = np.concatenate([x.value for x in xs], axis=-1)
    return tape._record("concat_lastdim", [x.node_id for x in xs], value, grad_fn)


def slice_lastdim(x: Tensor, start: int, stop: int) -> Tensor:
    n = x.shape[-1]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice_lastdim: range [{start}, {stop}) invalid for shape {x.shape}")
    shape = x.shape

    def grad_fn(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return x.tape._record("slice_lastdim", (x.node_id,), x.value[..., start:stop], grad_fn)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return x.tape._record("scale", (x.node_id,), x.value * c, lambda g: (g * c,))


def mean(x: Tensor) -> Tensor:
    n = x.value.size
    shape = x.shape
    return x.tape._record("mean", (x.node_id,), np.array([x.value.mean()]),
                          lambda g: (np.full(shape, g[0] / n),))


def _row_weights(weights, pred_shape):
    if weights is None:
        return None
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != pred_shape[:1]:
        raise ShapeError(f"loss weights: shape {w.shape} does not match batch {pred_shape[:1]}")
    return w.reshape((-1,) + (1,) * (len(pred_shape) - 1))


def _loss(kind, pred, target, weights, elem, delem):
    tape = pred.tape
    target_v = target.value if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if target_v.shape != pred.shape:
        raise ShapeError(f"{kind}: incompatible shapes {pred.shape} and {target_v.shape}")
    diff = pred.value - target_v
    w = _row_weights(weights, pred.shape)
    per = elem(diff) if w is None else w * elem(diff)
    n = diff.size
    inputs = [pred.node_id]
    if isinstance(target, Tensor):
        inputs.append(target.node_id)

    def grad_fn(g):
        d = delem(diff) if w is None else w * delem(diff)
        gp = d * (g[0] / n)
        return (gp, -gp) if len(inputs) == 2 else (gp,)

    return tape._record(kind, inputs, np.array([per.mean()]), grad_fn)


def l1_loss(pred: Tensor, target, weights=None) -> Tensor:
    """Mean absolute error; optional per-row weights.  d|x|/dx at 0 is 0."""
    return _loss("l1_loss", pred, target, weights, np.abs, np.sign)


def l2_loss(pred: Tensor, target, weights=None) -> Tensor:
    """Mean squared error; optional per-row weights."""
    return _loss("l2_loss", pred, target, weights, np.square, lambda d: 2.0 * d)


def dropout_apply(x: Tensor, mask, scale_by: float = 1.0) -> Tensor:
    """Multiply by a caller-supplied binary mask (times ``scale_by``)."""
    m = np.asarray(mask, dtype=np.float64) * scale_by
    if m.shape != x.shape:
        raise ShapeError(f"dropout_apply: incompatible shapes {x.shape} and {m.shape}")
    return x.tape._record("dropout_apply", (x.node_id,), x.value * m, lambda g: (g * m,))


def stop_gradient(x: Tensor) -> Tensor:
    return x.tape._record("stop_gradient", (x.node_id,), x.value, lambda g: (None,))


def grad_reverse(x: Tensor, lam: float = 1.0) -> Tensor:
    lam = float(lam)
    return x.tape._record("grad_reverse", (x.node_id,), x.value, lambda g: (-lam * g,))


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul_elementwise": mul_elementwise,
    "matmul": matmul,
    "relu": relu,
    "tanh": tanh,
    "concat_lastdim": concat_lastdim,
    "slice_lastdim": slice_lastdim,
    "scale": scale,
    "mean": mean,
    "l1_loss": l1_loss,
    "l2_loss": l2_loss,
    "dropout_apply": dropout_apply,
    "stop_gradient": stop_gradient,
    "grad_reverse": grad_reverse,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = OPS[kind]
    except KeyError:
        raise UnknownOpError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    return loss.tape.backward(loss)


def finite_diff_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central| / max(1, |central|).

    ``f`` maps a Tensor on a fresh tape to a scalar Tensor.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(point.value if isinstance(point, Tensor) else point, dtype=np.float64)
    tape = Tape()
    x = tape.leaf(x0)
    out = f(x)
    if not np.all(np.isfinite(out.value)):
        raise NonFiniteError("f is not finite at the check point")
    tape.backward(out)
    analytic = tape.grad(x)

    def evaluate(v):
        t = Tape()
        y = f(t.leaf(v)).value
        if not np.all(np.isfinite(y)):
            raise NonFiniteError("f is not finite near the check point")
        return float(y.reshape(-1)[0])

    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        flat[i] = (evaluate(xp.reshape(x0.shape)) - evaluate(xm.reshape(x0.shape))) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max())
