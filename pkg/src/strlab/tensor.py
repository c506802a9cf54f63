"""Dense tensors with reverse-mode automatic differentiation on a tape.

A single module-level tape records every op whose inputs require gradients.
``backward(loss)`` replays the tape in reverse, accumulating gradients into
``Tensor.grad`` (add, never overwrite) until ``zero_grad`` / ``reset_tape``.
Layout is row-major, and the only implicit broadcast allowed is
scalar-with-tensor; everything else must match shapes exactly.
"""
from __future__ import annotations

import contextlib

import numpy as np

from .errors import DetachedGraph, NonFiniteValue, NotScalar, ShapeMismatch

DEFAULT_DTYPE = np.float64


class Tape:
    """Append-only record of ops, replayed in reverse by backward()."""

    def __init__(self):
        self.nodes = []


_tape = Tape()
_grad_enabled = True


def get_tape() -> Tape:
    return _tape


def reset_tape() -> None:
    """Drop the current graph; leaf tensors and their grads survive.

    Output tensors and their nodes reference each other, so the old graph
    is unlinked explicitly; otherwise freeing it would wait on the cyclic
    garbage collector while the closures pin every activation in memory.
    """
    global _tape
    for node in _tape.nodes:
        node.out.node = None
        node.out = None
        node.parents = ()
        node.backward_fn = None
        node.tape = None
    _tape.nodes.clear()
    _tape = Tape()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (evaluation / data plumbing)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("out", "parents", "backward_fn", "name", "tape")

    def __init__(self, out, parents, backward_fn, name, tape):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.tape = tape


class Tensor:
    """N-dimensional array of 32/64-bit reals with an optional grad slot."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _check_finite(arr, name):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"op '{name}' produced non-finite values")


def make_op(data, parents, backward_fn, name) -> Tensor:
    """Create an op output tensor and record it on the tape.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    parent, in order. Used by this module's primitives and by custom ops in
    nn/ctc.
    """
    _check_finite(data, name)
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        node = Node(out, tuple(parents), backward_fn, name, _tape)
        out.node = node
        _tape.nodes.append(node)
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _scalar_ok(a: Tensor, b: Tensor) -> bool:
    return a.data.shape == b.data.shape or a.data.size == 1 or b.data.size == 1


def _reduce_to(grad, shape):
    # Collapse a broadcast gradient back onto a scalar-shaped parent.
    if grad.shape == tuple(shape):
        return grad
    return np.sum(grad).reshape(shape)


def backward(loss: Tensor) -> None:
    """Reverse-mode pass from a scalar loss over the current tape.

    Gradients accumulate into ``.grad`` of every tensor that requires grad;
    calling backward twice on the same graph doubles each grad exactly.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss.node is None or loss.node.tape is not _tape:
        raise DetachedGraph("loss is not the output of an op on the current tape")
    flowing = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}
    for node in reversed(_tape.nodes):
        g = flowing.pop(id(node.out), None)
        if g is None:
            continue
        out = holders.pop(id(node.out))
        out.grad = g if out.grad is None else out.grad + g
        grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in flowing:
                flowing[pid] = flowing[pid] + pg
            else:
                flowing[pid] = pg
                holders[pid] = parent
    # Whatever is left belongs to leaves (tensors with no producing node).
    for pid, g in flowing.items():
        t = holders[pid]
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    if not _scalar_ok(a, b):
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    return make_op(
        a.data + b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)),
        "add",
    )


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def sub(a: Tensor, b) -> Tensor:
    return add(a, neg(_as_tensor(b, a)))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    if not _scalar_ok(a, b):
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
    return make_op(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
        "mul",
    )


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return make_op(out, (a,), lambda g: (g * (a.data > 0),), "relu")


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis; rows exponentiate to sum 1."""
    m = np.max(a.data, axis=-1, keepdims=True)
    z = a.data - m
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    out = z - lse

    def bwd(g):
        return (g - np.exp(out) * np.sum(g, axis=-1, keepdims=True),)

    return make_op(out, (a,), bwd, "log_softmax")


# ---------------------------------------------------------------------------
# reductions and structure


def sum_all(a: Tensor) -> Tensor:
    return make_op(
        np.asarray(np.sum(a.data)),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),),
        "sum",
    )


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return mul(sum_all(a), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} x {b.shape}")
    return make_op(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., F] + b[F], gradient for b summed over leading axes."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"add_bias: {x.shape} + {b.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return make_op(
        x.data + b.data,
        (x, b),
        lambda g: (g, g.sum(axis=lead)),
        "add_bias",
    )


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return make_op(
        a.data.reshape(shape),
        (a,),
        lambda g: (g.reshape(a.shape),),
        "reshape",
    )


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inv),),
        "transpose",
    )


def flip0(a: Tensor) -> Tensor:
    """Reverse along axis 0 (time reversal for recurrent layers)."""
    return make_op(a.data[::-1].copy(), (a,), lambda g: (g[::-1].copy(),), "flip0")


def index(a: Tensor, idx) -> Tensor:
    """Static basic indexing (ints / slices); backward scatters into zeros."""
    out = a.data[idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return make_op(out.copy(), (a,), bwd, "index")


def concat(tensors, axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(np.concatenate(datas, axis=axis), tuple(tensors), bwd, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    def bwd(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_op(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bwd, "stack")
