"""Reverse-mode autodiff over small dense float64 arrays.

Every op returns a :class:`Tensor`; when any input requires a gradient and
recording is enabled, the result keeps a reference to its parents plus a
closure mapping the upstream gradient to per-parent gradients.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("value", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.value


class Parameter(Tensor):
    """Trainable leaf tensor; gradients accumulate into ``grad``."""

    __slots__ = ("name", "grad")

    def __init__(self, value, name: str):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(value: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording the graph edge only when needed."""
    if not np.all(np.isfinite(value)):
        raise FloatingPointError("non-finite value produced by tensor op")
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(value, tuple(parents), backward_fn, requires_grad=True)
    return Tensor(value)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable Parameter.grad.

    The graph is retained, so calling this twice doubles the gradients.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward called without a recorded forward computation")
    if isinstance(loss, Parameter):
        loss.grad += 1.0
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- basic ops

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return make(a.value + b.value, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return make(av * bv, (a, b), lambda g: (g * bv, g * av))


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a 0-d tensor."""
    shape = a.shape
    return make(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[-1] for p in parts]
    bounds = np.cumsum([0] + sizes)
    value = np.concatenate([p.value for p in parts], axis=-1)

    def bw(g):
        return tuple(g[..., bounds[k]:bounds[k + 1]] for k in range(len(parts)))

    return make(value, parts, bw)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return make(a.value[idx], (a,), bw)


def put_rows(base: Tensor, idx: np.ndarray, rows: Tensor) -> Tensor:
    """Copy of ``base`` with ``base[idx] = rows``; ``idx`` must be unique."""
    idx = np.asarray(idx, dtype=np.intp)
    if len(np.unique(idx)) != len(idx):
        raise ValueError("put_rows: duplicate row indices")
    value = base.value.copy()
    value[idx] = rows.value

    def bw(g):
        gb = g.copy()
        gb[idx] = 0.0
        return gb, g[idx]

    return make(value, (base, rows), bw)
