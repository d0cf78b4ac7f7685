from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import Parameter


def clip_global_norm(params: Iterable[Parameter], threshold: float) -> float:
    """Rescale all grads in place when their joint L2 norm exceeds ``threshold``.

    Returns the scale factor that was applied (1.0 when untouched).
    """
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    params = list(params)
    sq = 0.0
    for p in params:
        sq += float(np.vdot(p.grad, p.grad))
    norm = math.sqrt(sq)
    if norm <= threshold:
        return 1.0
    scale = threshold / norm
    for p in params:
        p.grad *= scale
    return scale


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Iterable[Parameter], state: AdamState, lr: float) -> None:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        v = state.v[p.name]
        if m.shape != p.shape:
            raise ValueError(f"Adam moment shape mismatch for {p.name}")
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * p.grad * p.grad
        p.value -= lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
