"""Quantizers with surrogate gradients, and accumulator noise."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


def surrogate_grad_sign(w, m: float):
    """d/dw tanh(m w) = m (1 - tanh^2(m w)), the stand-in derivative of sign."""
    if m <= 0:
        raise ValueError("steepness m must be positive")
    t = np.tanh(m * np.asarray(w, dtype=np.float64))
    out = m * (1.0 - t * t)
    return float(out) if out.ndim == 0 else out


def surrogate_grad_sigmoid(w, m: float):
    """d/dw sigmoid(m w) = m e^{-m w} / (1 + e^{-m w})^2, for the {0, 1} step."""
    if m <= 0:
        raise ValueError("steepness m must be positive")
    w = np.asarray(w, dtype=np.float64)
    # the logistic via tanh stays finite for large |m w|
    s = 0.5 * (1.0 + np.tanh(0.5 * m * w))
    out = m * s * (1.0 - s)
    return float(out) if out.ndim == 0 else out


class _SignSurrogate(torch.autograd.Function):
    """sign forward, tanh(m x / scale) derivative backward.

    Zero maps to +1, or to -1 when `strict` (threshold sites: +1 only above).
    """

    @staticmethod
    def forward(ctx, x, m, scale, strict):
        ctx.save_for_backward(x)
        ctx.m, ctx.scale = m, scale
        positive = x > 0 if strict else x >= 0
        return torch.where(positive, torch.ones_like(x), -torch.ones_like(x))

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        k = ctx.m / ctx.scale
        t = torch.tanh(k * x)
        return grad * k * (1 - t * t), None, None, None


class _StepSurrogate(torch.autograd.Function):
    """{0, 1} step forward (x > 0 -> 1), sigmoid(m x / scale) derivative backward."""

    @staticmethod
    def forward(ctx, x, m, scale, strict):
        ctx.save_for_backward(x)
        ctx.m, ctx.scale = m, scale
        return (x > 0).to(x.dtype)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        k = ctx.m / ctx.scale
        s = torch.sigmoid(k * x)
        return grad * k * s * (1 - s), None, None, None


@dataclass(frozen=True)
class Quantizer:
    """Binarization site.

    mode "binary": discrete forward, surrogate backward.
    mode "smooth": the differentiable proxy (tanh or sigmoid) in both passes.
    `scale` normalizes the argument, so feature sites whose accumulators span
    +-fan_in see the same surrogate width as weights.
    """

    mode: str = "binary"
    regime: str = "pm1"
    m: float = 2.0

    def __call__(self, x: torch.Tensor, scale: float = 1.0, strict: bool = False) -> torch.Tensor:
        if self.mode == "binary":
            fn = _SignSurrogate if self.regime == "pm1" else _StepSurrogate
            return fn.apply(x, self.m, scale, strict)
        if self.mode == "smooth":
            if self.regime == "pm1":
                return torch.tanh(self.m * x / scale)
            return torch.sigmoid(self.m * x / scale)
        raise ValueError(f"unknown quantizer mode {self.mode!r}")


def inject_noise(plane, sigma: float, seed=None):
    """Add i.i.d. N(0, sigma^2) to every accumulator; deterministic per seed.

    Integer planes come back as float64 since the sum is no longer integral.
    """
    if sigma < 0:
        raise ValueError("noise sigma must be >= 0")
    plane = np.asarray(plane)
    if sigma == 0:
        return plane.copy()
    rng = np.random.default_rng(seed)
    return plane.astype(np.float64) + rng.normal(0.0, sigma, size=plane.shape)


def accumulator_sigma(sigma_write: float, n_writes: int, increment: float) -> float:
    """Std, in tap units, of a sum of n noisy analog writes of size `increment`."""
    return sigma_write * math.sqrt(n_writes) / increment
