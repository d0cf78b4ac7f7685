"""Bivariate Gaussian output head.

The head emits a raw 5-vector ``(a, b, c, d, e)`` per row, read as
``mu_x = a, mu_y = b, sigma_x = exp(c), sigma_y = exp(d), rho = tanh(e)``.
The NLL is written directly in terms of the raw values so that a valid
density is guaranteed without clipping.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Parameter, Tensor, as_tensor, make

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GaussianParams:
    raw: Tensor  # (..., 5)

    @classmethod
    def from_moments(cls, mu_x, mu_y, sigma_x, sigma_y, rho) -> "GaussianParams":
        sigma_x, sigma_y, rho = (np.asarray(v, dtype=np.float64) for v in (sigma_x, sigma_y, rho))
        if np.any(sigma_x <= 0) or np.any(sigma_y <= 0) or np.any(np.abs(rho) >= 1):
            raise ValueError("need sigma > 0 and |rho| < 1")
        raw = np.stack(np.broadcast_arrays(
            np.asarray(mu_x, dtype=np.float64), np.asarray(mu_y, dtype=np.float64),
            np.log(sigma_x), np.log(sigma_y), np.arctanh(rho)), axis=-1)
        return cls(Tensor(raw))

    @property
    def mu_x(self): return self.raw.value[..., 0]

    @property
    def mu_y(self): return self.raw.value[..., 1]

    @property
    def sigma_x(self): return np.exp(self.raw.value[..., 2])

    @property
    def sigma_y(self): return np.exp(self.raw.value[..., 3])

    @property
    def rho(self): return np.tanh(self.raw.value[..., 4])


def gaussian_head(W_of: Parameter, h) -> GaussianParams:
    h = as_tensor(h)
    if W_of.value.ndim != 2 or W_of.shape[0] != 5 or h.shape[-1] != W_of.shape[1]:
        raise ValueError(f"gaussian_head: W_of {W_of.shape} incompatible with h {h.shape}")
    hv = h.value

    def bw(g):
        gw = np.outer(g, hv) if g.ndim == 1 else g.T @ hv
        return gw, g @ W_of.value

    return GaussianParams(make(hv @ W_of.value.T, (W_of, h), bw))


def _log_cosh(e: np.ndarray) -> np.ndarray:
    a = np.abs(e)
    return a + np.log1p(np.exp(-2.0 * a)) - math.log(2.0)


def bvn_nll(g: GaussianParams, target) -> Tensor:
    """Per-row negative log density of ``target`` (shape (..., 2))."""
    target = np.asarray(target, dtype=np.float64)
    raw = g.raw
    rv = raw.value
    if not (np.all(np.isfinite(target)) and np.all(np.isfinite(rv))):
        raise ValueError("bvn_nll: non-finite input")
    if target.shape != rv.shape[:-1] + (2,):
        raise ValueError(f"bvn_nll: target shape {target.shape} vs params {rv.shape}")
    mx, my, c, d, e = (rv[..., k] for k in range(5))
    sx, sy, rho = np.exp(c), np.exp(d), np.tanh(e)
    inv_q = np.cosh(e) ** 2  # 1 / (1 - rho^2)
    dx = (target[..., 0] - mx) / sx
    dy = (target[..., 1] - my) / sy
    z = dx * dx + dy * dy - 2.0 * rho * dx * dy
    # 0.5 * log(1 - rho^2) == -log cosh(e)
    nll = LOG_2PI + c + d - _log_cosh(e) + 0.5 * z * inv_q

    def bw(gr):
        out = np.empty_like(rv)
        out[..., 0] = gr * (rho * dy - dx) * inv_q / sx
        out[..., 1] = gr * (rho * dx - dy) * inv_q / sy
        out[..., 2] = gr * (1.0 - (dx * dx - rho * dx * dy) * inv_q)
        out[..., 3] = gr * (1.0 - (dy * dy - rho * dx * dy) * inv_q)
        out[..., 4] = gr * (-rho - dx * dy + rho * z * inv_q)
        return (out,)

    return make(nll, (raw,), bw)


def bvn_mean(g: GaussianParams) -> np.ndarray:
    return np.stack([g.mu_x, g.mu_y], axis=-1)


def bvn_sample(g: GaussianParams, rng: np.random.Generator) -> np.ndarray:
    """Draw via the closed-form Cholesky factor of the 2x2 covariance."""
    sx, sy, rho = g.sigma_x, g.sigma_y, g.rho
    z = rng.standard_normal(np.shape(sx) + (2,))
    dx = g.mu_x + sx * z[..., 0]
    dy = g.mu_y + sy * (rho * z[..., 0] + np.sqrt(1.0 - rho * rho) * z[..., 1])
    return np.stack([dx, dy], axis=-1)
