"""Hard rounding and stochastic Gumbel annealing (SGA) soft quantization."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

__all__ = ["SgaSchedule", "hard_round", "gumbel_pair", "noise_stream", "sga_quantize"]


@dataclass(frozen=True)
class SgaSchedule:
    tau0: float = 0.5
    decay: float = 0.999
    tau_min: float = 0.05
    epsilon: float = 1e-4

    def __post_init__(self):
        if not self.tau0 > self.tau_min > 0:
            raise ValueError("need tau0 > tau_min > 0")
        if not 0 < self.decay < 1:
            raise ValueError("need 0 < decay < 1")
        if not 0 < self.epsilon < 0.5:
            raise ValueError("need 0 < epsilon < 0.5")

    def tau(self, iteration: int) -> float:
        return max(self.tau0 * self.decay ** iteration, self.tau_min)


def hard_round(y) -> np.ndarray:
    """Nearest integer, halves rounded away from zero."""
    y = y.data if isinstance(y, ad.Tensor) else np.asarray(y)
    if not np.all(np.isfinite(y)):
        raise ValueError("hard_round on non-finite input")
    return (np.sign(y) * np.floor(np.abs(y) + 0.5)).astype(y.dtype)


def noise_stream(seed: int, frame: int, iteration: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, frame, iteration)."""
    return np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, iteration, frame]))


def gumbel_pair(rng: np.random.Generator, shape) -> tuple:
    tiny = np.finfo(np.float64).tiny
    u = np.clip(rng.random((2,) + tuple(shape)), tiny, 1.0 - 1e-16)
    g = -np.log(-np.log(u))
    return g[0], g[1]


def sga_quantize(y: ad.Tensor, tau: float, rng, epsilon: float = 1e-4) -> ad.Tensor:
    """Two-candidate Gumbel-softmax relaxation of rounding.

    ``rng`` is a numpy Generator or an already drawn ``(g_floor, g_ceil)``
    pair (frozen noise, for gradient checks).  The result lies in
    ``[floor(y), floor(y) + 1]``; gradients reach ``y`` through the mixing
    weight only.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    y = ad.as_tensor(y)
    g_floor, g_ceil = rng if isinstance(rng, tuple) else gumbel_pair(rng, y.shape)
    floor = np.floor(y.data)
    frac = ad.sub(y, floor)
    d_floor = ad.clamp(frac, epsilon, 1.0 - epsilon)
    d_ceil = ad.clamp(ad.sub(1.0, frac), epsilon, 1.0 - epsilon)
    # logits are -atanh(distance)/tau; softmax temperature is tau as well
    inv = 1.0 / tau
    logit_gap = ad.scale(ad.sub(ad.atanh(d_floor), ad.atanh(d_ceil)), inv)
    z = ad.scale(ad.add(logit_gap, g_ceil - g_floor), inv)
    return ad.add(floor, ad.sigmoid(z))


def sga_round_up_probability(frac: float, tau: float, epsilon: float = 1e-4) -> float:
    """Probability that a near-zero-temperature sample rounds up (logistic in the gap)."""
    f = min(max(frac, epsilon), 1 - epsilon)
    c = min(max(1 - frac, epsilon), 1 - epsilon)
    gap = (math.atanh(f) - math.atanh(c)) / tau
    return 1.0 / (1.0 + math.exp(-gap)) if gap > -700 else 0.0
