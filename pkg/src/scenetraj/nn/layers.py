from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Parameter, Tensor, as_tensor, make


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _wgrad(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.outer(g, x) if g.ndim == 1 else g.T @ x


def _check_in(name: str, W: Tensor, x: Tensor) -> None:
    if W.value.ndim != 2 or x.value.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise ValueError(f"{name}: weight {W.shape} incompatible with input {x.shape}")


@dataclass
class LSTMCellParams:
    """Gate blocks are stacked input / forget / candidate / output along axis 0."""

    W_ih: Parameter
    W_hh: Parameter
    b: Parameter

    def __post_init__(self):
        four_h, d = self.W_ih.shape
        if four_h % 4 or four_h == 0 or d == 0:
            raise ValueError(f"W_ih must be (4H, D) with H, D > 0, got {self.W_ih.shape}")
        h = four_h // 4
        if self.W_hh.shape != (4 * h, h) or self.b.shape != (4 * h,):
            raise ValueError(
                f"inconsistent LSTM shapes: W_ih {self.W_ih.shape}, "
                f"W_hh {self.W_hh.shape}, b {self.b.shape}"
            )

    @property
    def hidden(self) -> int:
        return self.W_hh.shape[1]

    @property
    def input_dim(self) -> int:
        return self.W_ih.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.W_ih, self.W_hh, self.b]

    @classmethod
    def init(cls, prefix: str, input_dim: int, hidden: int, rng: np.random.Generator):
        k = 1.0 / np.sqrt(hidden)
        return cls(
            Parameter(rng.uniform(-k, k, (4 * hidden, input_dim)), f"{prefix}.W_ih"),
            Parameter(rng.uniform(-k, k, (4 * hidden, hidden)), f"{prefix}.W_hh"),
            Parameter(rng.uniform(-k, k, 4 * hidden), f"{prefix}.b"),
        )


def lstm_step(params: LSTMCellParams, x, h_prev, c_prev) -> tuple[Tensor, Tensor]:
    """One LSTM update; inputs may be single vectors or row batches."""
    x, h_prev, c_prev = as_tensor(x), as_tensor(h_prev), as_tensor(c_prev)
    H, D = params.hidden, params.input_dim
    if x.shape[-1] != D or h_prev.shape[-1] != H or c_prev.shape != h_prev.shape \
            or x.shape[:-1] != h_prev.shape[:-1]:
        raise ValueError(
            f"lstm_step: expected x[..., {D}], h/c[..., {H}]; "
            f"got x {x.shape}, h {h_prev.shape}, c {c_prev.shape}"
        )
    Wih, Whh, b = params.W_ih, params.W_hh, params.b
    pre = x.value @ Wih.value.T + h_prev.value @ Whh.value.T + b.value
    acts = sigmoid(pre)
    acts[..., 2 * H:3 * H] = np.tanh(pre[..., 2 * H:3 * H])
    deriv = acts * (1.0 - acts)
    cand = acts[..., 2 * H:3 * H]
    deriv[..., 2 * H:3 * H] = 1.0 - cand * cand
    xv, hv = x.value, h_prev.value

    def gates_bw(g):
        d = g * deriv
        red = d if d.ndim == 1 else d.sum(axis=0)
        return d @ Wih.value, d @ Whh.value, _wgrad(d, xv), _wgrad(d, hv), red

    gates = make(acts, (x, h_prev, Wih, Whh, b), gates_bw)
    i, f, gg, o = (acts[..., k * H:(k + 1) * H] for k in range(4))
    cv = c_prev.value

    def cell_bw(g):
        dacts = np.zeros_like(acts)
        dacts[..., 0:H] = g * gg
        dacts[..., H:2 * H] = g * cv
        dacts[..., 2 * H:3 * H] = g * i
        return dacts, g * f

    c = make(f * cv + i * gg, (gates, c_prev), cell_bw)
    tc = np.tanh(c.value)

    def hidden_bw(g):
        dacts = np.zeros_like(acts)
        dacts[..., 3 * H:] = g * tc
        return dacts, g * o * (1.0 - tc * tc)

    h = make(o * tc, (gates, c), hidden_bw)
    return h, c


def embed_relu(W: Parameter, x) -> Tensor:
    """ReLU(W x) with no bias term."""
    x = as_tensor(x)
    _check_in("embed_relu", W, x)
    out = np.maximum(x.value @ W.value.T, 0.0)
    xv = x.value

    def bw(g):
        d = g * (out > 0)
        return d @ W.value, _wgrad(d, xv)

    return make(out, (x, W), bw)


def linear_sigmoid(W: Parameter, b: Parameter, x) -> Tensor:
    x = as_tensor(x)
    _check_in("linear_sigmoid", W, x)
    if b.shape != (W.shape[0],):
        raise ValueError(f"linear_sigmoid: bias {b.shape} does not match weight {W.shape}")
    s = sigmoid(x.value @ W.value.T + b.value)
    xv = x.value

    def bw(g):
        d = g * s * (1.0 - s)
        return d @ W.value, _wgrad(d, xv), d if d.ndim == 1 else d.sum(axis=0)

    return make(s, (x, W, b), bw)


def dropout(x, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; the exact input object is returned in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make(x.value * mask, (x,), lambda g: (g * mask,))
