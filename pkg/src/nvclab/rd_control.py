"""Frame-level rate/distortion weights: the hierarchical w_t cycle and the beta controller."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from . import autodiff as ad

__all__ = [
    "MINIGOP_WEIGHTS",
    "update_beta",
    "frame_weight",
    "rd_loss",
    "BetaController",
    "QualityTracker",
]

MINIGOP_WEIGHTS = (0.5, 1.2, 0.5, 0.9)


def _sign(v: float) -> int:
    return (v > 0) - (v < 0)


def update_beta(delta_q: float, beta0: float = 1.0, step: float = 0.2, direction: int = 1) -> float:
    """``beta0 - step * sign(delta_q)``; a quality drop raises the rate weight.

    ``direction=-1`` flips the rule for comparison runs.
    """
    if not math.isfinite(delta_q):
        raise ValueError(f"delta_q must be finite, got {delta_q}")
    return beta0 - direction * step * _sign(delta_q)


def frame_weight(frame_index: int, intra_period: int = 32,
                 pattern: tuple = MINIGOP_WEIGHTS) -> float:
    if frame_index < 0:
        raise ValueError("frame_index must be >= 0")
    if frame_index % intra_period == 0:
        return 1.0
    return pattern[frame_index % len(pattern)]


def rd_loss(rate, distortion, w: float, lam: float, beta: float = 1.0):
    """``beta * R + w * lam * D``.  Works on floats and on autodiff tensors."""
    if isinstance(rate, ad.Tensor) or isinstance(distortion, ad.Tensor):
        return ad.add(ad.scale(rate, beta), ad.scale(distortion, w * lam))
    return beta * rate + w * lam * distortion


@dataclass
class BetaController:
    beta0: float = 1.0
    step: float = 0.2
    direction: int = 1
    beta: float = field(default=1.0, init=False)

    def __post_init__(self):
        self.beta = self.beta0

    def reset(self) -> float:
        self.beta = self.beta0
        return self.beta

    def update(self, delta_q: float) -> float:
        self.beta = update_beta(delta_q, self.beta0, self.step, self.direction)
        return self.beta


@dataclass
class QualityTracker:
    """Previous frame's final PSNR and the current frame's first-pass PSNR (dB)."""

    previous: float | None = None
    current: float | None = None

    def delta(self) -> float | None:
        if self.previous is None or self.current is None:
            return None
        return self.current - self.previous
