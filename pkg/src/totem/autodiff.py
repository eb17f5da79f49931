"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Values are plain C-contiguous ``numpy.float64`` arrays. A :class:`Tape`
records every primitive in forward order; :meth:`Tape.backward` walks the
record in reverse, which is a valid reverse topological order because a
node can only consume nodes recorded before it.

Typical use::

    tape = Tape()
    w = tape.param(weight)            # Param -> Node
    y = linear(tape.constant(x), w)   # ops take Nodes (or raw arrays)
    loss = mean(square(y))
    tape.backward(loss)               # accumulates into weight.grad
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .rng import Rng

__all__ = [
    "PRIMITIVES",
    "ShapeError",
    "ContractError",
    "NonFiniteError",
    "Param",
    "Node",
    "Tape",
    "backward",
    "xavier_init",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "matmul",
    "bmm",
    "linear",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "take",
    "broadcast_rows",
    "relu",
    "softplus",
    "square",
    "absolute",
    "softmax",
    "attention",
    "layer_norm",
    "instance_normalize",
    "sum_all",
    "mean",
]


# op names as recorded on a tape; gradcheck keeps one case per entry
PRIMITIVES = (
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "matmul",
    "bmm",
    "linear",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "take",
    "broadcast_rows",
    "relu",
    "softplus",
    "square",
    "abs",
    "softmax",
    "attention",
    "layer_norm",
    "instance_normalize",
    "sum",
    "mean",
)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def _as_f64(value) -> np.ndarray:
    return np.ascontiguousarray(value, dtype=np.float64)


class Param:
    """A learnable array with a gradient accumulator."""

    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, value, name: str = "", trainable: bool = True):
        self.name = name
        self.value = _as_f64(value).copy()
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        flag = "" if self.trainable else ", frozen"
        return f"Param({self.name!r}, shape={self.shape}{flag})"


class Node:
    """One value on a tape, with the closure that routes its gradient."""

    __slots__ = ("tape", "value", "grad", "parents", "backward_fn", "requires_grad", "op", "param")

    def __init__(self, tape, value, parents=(), backward_fn=None, requires_grad=False, op="const"):
        self.tape = tape
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op
        self.param = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node({self.op}, shape={self.shape})"


def _all_finite(value: np.ndarray) -> bool:
    # one reduction instead of a boolean temporary; inf/nan propagate through the sum
    with np.errstate(over="ignore", invalid="ignore"):
        total = float(np.add.reduce(value, axis=None))
    return math.isfinite(total) or bool(np.isfinite(value).all())


class Tape:
    """Ordered record of primitive applications.

    With ``record=False`` the tape only evaluates values; nothing is kept
    for a backward pass (used for inference).
    """

    def __init__(self, record: bool = True, check_finite: bool = True):
        self.record = record
        self.check_finite = check_finite
        self.nodes: list[Node] = []
        self._param_nodes: dict[int, Node] = {}

    def constant(self, value) -> Node:
        return Node(self, _as_f64(value))

    def param(self, p: Param) -> Node:
        node = self._param_nodes.get(id(p))
        if node is None:
            node = Node(self, p.value, requires_grad=self.record and p.trainable, op="param")
            node.param = p
            self._param_nodes[id(p)] = node
            if self.record:
                self.nodes.append(node)
        return node

    def push(self, op: str, value: np.ndarray, parents: tuple, backward_fn: Callable) -> Node:
        if self.check_finite and not _all_finite(value):
            raise NonFiniteError(f"{op} produced non-finite values")
        needs = self.record and any(p.requires_grad for p in parents)
        node = Node(self, value, parents if needs else (), backward_fn if needs else None, needs, op)
        if self.record:
            self.nodes.append(node)
        return node

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def backward(self, loss: Node, retain: bool = False) -> None:
        """Accumulate d(loss)/d(param) into every trainable Param's ``grad``.

        Unless ``retain`` is set the recorded graph is released afterwards:
        nodes point back at their tape, so a kept record would hold every
        activation of the step until the cyclic collector happens to run.
        """
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.record:
            raise ContractError("backward on a non-recording tape")
        if not loss.requires_grad:
            return
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            if node.backward_fn is None:
                if node.param is not None:
                    node.param.grad += g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg
            node.grad = None
        if not retain:
            self.release()

    def release(self) -> None:
        """Drop the recorded graph (values stay readable on live nodes)."""
        for node in self.nodes:
            node.parents, node.backward_fn = (), None
        self.nodes = []
        self._param_nodes = {}


def backward(tape: Tape, loss: Node, retain: bool = False) -> None:
    tape.backward(loss, retain)


def xavier_init(fan_in: int, fan_out: int, rng_seed: int | Rng) -> np.ndarray:
    """Glorot uniform sample of shape (fan_in, fan_out)."""
    if fan_in < 1 or fan_out < 1:
        raise ContractError(f"fans must be >= 1, got {fan_in}, {fan_out}")
    rng = rng_seed if isinstance(rng_seed, Rng) else Rng(rng_seed)
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(fan_in * fan_out, -a, a).reshape(fan_in, fan_out)


# --------------------------------------------------------------------------
# argument plumbing


def _tape_of(args) -> Tape:
    tape = None
    for a in args:
        if isinstance(a, Node):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ContractError("operands live on different tapes")
    if tape is None:
        raise ContractError("at least one operand must be a Node; lift Params with tape.param()")
    return tape


def _node(tape: Tape, a) -> Node:
    if isinstance(a, Node):
        return a
    if isinstance(a, Param):
        return tape.param(a)
    return tape.constant(a)


def _unbroadcast_rows(g: np.ndarray, ndim: int) -> np.ndarray:
    if g.ndim == ndim:
        return g
    return g.reshape(-1, *g.shape[g.ndim - ndim:]).sum(axis=0)


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Node:
    tape = _tape_of((a, b))
    a, b = _node(tape, a), _node(tape, b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return tape.push("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Node:
    tape = _tape_of((a, b))
    a, b = _node(tape, a), _node(tape, b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return tape.push("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Node:
    tape = _tape_of((a, b))
    a, b = _node(tape, a), _node(tape, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    av, bv = a.value, b.value
    return tape.push("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, s: float) -> Node:
    tape = _tape_of((a,))
    a = _node(tape, a)
    s = float(s)
    return tape.push("scale", a.value * s, (a,), lambda g: (g * s,))


def add_bias(x, b) -> Node:
    """x (..., d) + b (d,), broadcasting over leading axes."""
    tape = _tape_of((x, b))
    x, b = _node(tape, x), _node(tape, b)
    if b.value.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    return tape.push("add_bias", x.value + b.value, (x, b), lambda g: (g, _unbroadcast_rows(g, 1)))


def relu(a) -> Node:
    tape = _tape_of((a,))
    a = _node(tape, a)
    out = np.maximum(a.value, 0.0)
    return tape.push("relu", out, (a,), lambda g: (g * (out > 0),))


def softplus(a) -> Node:
    tape = _tape_of((a,))
    a = _node(tape, a)
    v = a.value
    out = np.logaddexp(0.0, v)

    def bw(g):
        sig = np.exp(-np.logaddexp(0.0, -v))
        return (g * sig,)

    return tape.push("softplus", out, (a,), bw)


def square(a) -> Node:
    tape = _tape_of((a,))
    a = _node(tape, a)
    v = a.value
    return tape.push("square", v * v, (a,), lambda g: (2.0 * g * v,))


def absolute(a) -> Node:
    tape = _tape_of((a,))
    a = _node(tape, a)
    v = a.value
    return tape.push("abs", np.abs(v), (a,), lambda g: (g * np.sign(v),))


# --------------------------------------------------------------------------
# products


def matmul(a, b) -> Node:
    """(m, k) @ (k, n)."""
    tape = _tape_of((a, b))
    a, b = _node(tape, a), _node(tape, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return tape.push("matmul", av @ bv, (a, b), bw)


def bmm(a, b) -> Node:
    """Batched (B, m, k) @ (B, k, n)."""
    tape = _tape_of((a, b))
    a, b = _node(tape, a), _node(tape, b)
    if (
        a.value.ndim != 3
        or b.value.ndim != 3
        or a.shape[0] != b.shape[0]
        or a.shape[2] != b.shape[1]
    ):
        raise ShapeError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        ga = np.matmul(g, bv.transpose(0, 2, 1)) if a.requires_grad else None
        gb = np.matmul(av.transpose(0, 2, 1), g) if b.requires_grad else None
        return ga, gb

    return tape.push("bmm", np.matmul(av, bv), (a, b), bw)


def linear(x, W, b=None) -> Node:
    """x (..., d_in) @ W (d_in, d_out) + b (d_out,)."""
    tape = _tape_of((x, W, b))
    x, W = _node(tape, x), _node(tape, W)
    d_in = W.shape[0]
    if W.value.ndim != 2 or x.shape[-1] != d_in:
        raise ShapeError(f"linear: input {x.shape} does not match weight {W.shape}")
    lead = x.shape[:-1]
    x2 = x.value.reshape(-1, d_in)
    out = x2 @ W.value
    parents = [x, W]
    if b is not None:
        b = _node(tape, b)
        if b.shape != (W.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {W.shape}")
        out += b.value
        parents.append(b)
    Wv = W.value

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ Wv.T).reshape(*lead, d_in) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gW
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gW, gb

    return tape.push("linear", out.reshape(*lead, Wv.shape[1]), tuple(parents), bw)


# --------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape: Sequence[int]) -> Node:
    tape = _tape_of((a,))
    a = _node(tape, a)
    src = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return tape.push("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes: Sequence[int]) -> Node:
    tape = _tape_of((a,))
    a = _node(tape, a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.value.transpose(axes))
    return tape.push(
        "transpose", out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),)
    )


def concat(parts: Sequence, axis: int = 0) -> Node:
    tape = _tape_of(parts)
    nodes = [_node(tape, p) for p in parts]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[n.shape for n in nodes]}") from exc
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]
    return tape.push(
        "concat", out, tuple(nodes), lambda g: tuple(np.split(g, bounds, axis=axis))
    )


def stack(parts: Sequence, axis: int = 0) -> Node:
    tape = _tape_of(parts)
    nodes = [_node(tape, p) for p in parts]
    shapes = {n.shape for n in nodes}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {[n.shape for n in nodes]}")
    out = np.stack([n.value for n in nodes], axis=axis)
    k = len(nodes)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(k))

    return tape.push("stack", out, tuple(nodes), bw)


def take(a, index: int, axis: int) -> Node:
    """Select one slice along ``axis`` (the axis is dropped)."""
    tape = _tape_of((a,))
    a = _node(tape, a)
    src = a.shape
    ax = axis % len(src)
    out = np.ascontiguousarray(np.take(a.value, index, axis=ax))

    def bw(g):
        full = np.zeros(src)
        sl = [slice(None)] * len(src)
        sl[ax] = index
        full[tuple(sl)] = g
        return (full,)

    return tape.push("take", out, (a,), bw)


def broadcast_rows(v, n: int) -> Node:
    """Repeat a vector (d,) into a matrix (n, d)."""
    tape = _tape_of((v,))
    v = _node(tape, v)
    if v.value.ndim != 1:
        raise ShapeError(f"broadcast_rows: expected a vector, got {v.shape}")
    out = np.broadcast_to(v.value, (n, v.shape[0])).copy()
    return tape.push("broadcast_rows", out, (v,), lambda g: (g.sum(axis=0),))


# --------------------------------------------------------------------------
# normalisation and reductions


def softmax(v, axis: int = -1) -> Node:
    tape = _tape_of((v,))
    v = _node(tape, v)
    if not -v.value.ndim <= axis < v.value.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {v.shape}")
    z = v.value - v.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return tape.push("softmax", y, (v,), bw)


def attention(q, k, v, heads: int) -> Node:
    """Multi-head scaled dot-product attention.

    q is (B, m, c), k and v are (B, n, c); channels are split into ``heads``
    contiguous groups of c/heads. Returns (B, m, c) with the heads
    concatenated in order. Equivalent to per-head softmax(q k^T / sqrt(d)) v.
    """
    tape = _tape_of((q, k, v))
    q, k, v = _node(tape, q), _node(tape, k), _node(tape, v)
    if q.value.ndim != 3 or k.shape != v.shape or k.value.ndim != 3:
        raise ShapeError(f"attention: bad shapes q={q.shape} k={k.shape} v={v.shape}")
    B, m, c = q.shape
    n = k.shape[1]
    if k.shape[0] != B or k.shape[2] != c or c % heads:
        raise ShapeError(f"attention: q={q.shape} k={k.shape} incompatible with {heads} heads")
    d = c // heads
    s = 1.0 / math.sqrt(d)
    split = lambda t, length: t.reshape(B, length, heads, d).transpose(0, 2, 1, 3)
    merge = lambda t, length: np.ascontiguousarray(t.transpose(0, 2, 1, 3)).reshape(B, length, c)
    qh, kh, vh = split(q.value, m), split(k.value, n), split(v.value, n)
    scores = np.matmul(qh, kh.transpose(0, 1, 3, 2)) * s
    scores -= scores.max(axis=-1, keepdims=True)
    a = np.exp(scores)
    a /= a.sum(axis=-1, keepdims=True)
    out = merge(np.matmul(a, vh), m)

    def bw(g):
        go = split(g, m)
        gv = merge(np.matmul(a.transpose(0, 1, 3, 2), go), n) if v.requires_grad else None
        ga = np.matmul(go, vh.transpose(0, 1, 3, 2))
        gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True)) * s
        gq = merge(np.matmul(gs, kh), m) if q.requires_grad else None
        gk = merge(np.matmul(gs.transpose(0, 1, 3, 2), qh), n) if k.requires_grad else None
        return gq, gk, gv

    return tape.push("attention", out, (q, k, v), bw)


def _normalize(x: np.ndarray, axes: tuple[int, ...], eps: float):
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def _normalize_bw(g: np.ndarray, xhat: np.ndarray, inv: np.ndarray, axes) -> np.ndarray:
    gm = g.mean(axis=axes, keepdims=True)
    gxm = (g * xhat).mean(axis=axes, keepdims=True)
    return inv * (g - gm - xhat * gxm)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Node:
    """Normalise over the last axis, then apply the affine (gamma, beta)."""
    tape = _tape_of((x, gamma, beta))
    x, gamma, beta = _node(tape, x), _node(tape, gamma), _node(tape, beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine {gamma.shape}/{beta.shape} vs input {x.shape}")
    xhat, inv = _normalize(x.value, (-1,), eps)
    gv = gamma.value

    def bw(g):
        gx = _normalize_bw(g * gv, xhat, inv, (-1,)) if x.requires_grad else None
        ggamma = _unbroadcast_rows(g * xhat, 1) if gamma.requires_grad else None
        gbeta = _unbroadcast_rows(g, 1) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return tape.push("layer_norm", xhat * gv + beta.value, (x, gamma, beta), bw)


def instance_normalize(m, eps: float = 1e-5) -> Node:
    """Per-channel normalisation over the spatial axes of a feature map.

    ``m`` is (h, w, c) or (n, h, w, c); statistics are taken over (h, w)
    independently for every sample and channel (population variance).
    """
    tape = _tape_of((m,))
    m = _node(tape, m)
    if m.value.ndim not in (3, 4):
        raise ShapeError(f"instance_normalize: expected (h, w, c) or (n, h, w, c), got {m.shape}")
    axes = (-3, -2)
    v = m.value
    flat = v.reshape(*v.shape[:-3], -1, v.shape[-1])
    # sums over sorted cells do not depend on the cell order, so the map
    # permutes exactly (bit for bit) with its input
    mu = np.sort(flat, axis=-2).mean(axis=-2, keepdims=True)
    xc = flat - mu
    inv = 1.0 / np.sqrt(np.sort(xc * xc, axis=-2).mean(axis=-2, keepdims=True) + eps)
    xhat = (xc * inv).reshape(v.shape)
    inv = inv.reshape(*v.shape[:-3], 1, 1, v.shape[-1])
    return tape.push(
        "instance_normalize", xhat, (m,), lambda g: (_normalize_bw(g, xhat, inv, axes),)
    )


def sum_all(a) -> Node:
    tape = _tape_of((a,))
    a = _node(tape, a)
    src = a.shape
    return tape.push(
        "sum", np.array(a.value.sum()), (a,), lambda g: (np.full(src, float(g)),)
    )


def mean(a) -> Node:
    tape = _tape_of((a,))
    a = _node(tape, a)
    src = a.shape
    n = a.value.size
    return tape.push(
        "mean", np.array(a.value.sum() / n), (a,), lambda g: (np.full(src, float(g) / n),)
    )
