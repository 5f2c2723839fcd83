"""Encoder-side online refinement of a frame latent.

The latent is moved by gradient descent on the RD cost while every network
parameter stays fixed.  The default update normalizes each element's step by
running gradient moments (Adam); ``optimizer="sgd"`` gives the raw
``y - lr * grad`` step.  Rounding is relaxed with SGA during the loop;
the hard-rounded cost is checked every ``eval_every`` iterations and the best
latent seen (the initial one included) is returned.

Costs are in bits: ``beta * R_bits + w * lam * (H * W) * MSE``, which is the
usual ``beta * bpp + w * lam * MSE`` scaled by the pixel count.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .codec import LAMBDAS, CodecModel, Latent, predict_entropy_params, synthesis_context, synthesize
from .entropy import rate_bits
from .quantizer import SgaSchedule, hard_round, noise_stream, sga_quantize
from .rd_control import rd_loss

__all__ = ["RefineConfig", "TraceRow", "RefineResult", "lr_at", "refine_latent",
           "FrameObjective", "write_trace_csv"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RefineConfig:
    lmbda: float = 1360.0
    max_iters: int = 1000
    lr_initial: float = 1e-3
    lr_late: float = 1e-4
    lr_switch_fraction: float = 0.8
    sga: SgaSchedule = field(default_factory=SgaSchedule)
    dynamic_rd: bool = False
    beta_step: float = 0.2
    beta_direction: int = 1
    eval_every: int = 25
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if not 0 < self.lr_switch_fraction < 1:
            raise ValueError("lr_switch_fraction must be in (0, 1)")
        if not self.lmbda > 0:
            raise ValueError("lambda must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lmbda not in LAMBDAS:
            raise ValueError(f"lambda must be one of {LAMBDAS}")

    @property
    def rate_index(self) -> int:
        return LAMBDAS.index(self.lmbda)


def lr_at(iteration: int, config: RefineConfig) -> float:
    if iteration < math.floor(config.lr_switch_fraction * config.max_iters):
        return config.lr_initial
    return config.lr_late


@dataclass
class TraceRow:
    iteration: int
    r_bits: float
    d_mse: float
    loss: float
    tau: float
    lr: float


@dataclass
class RefineResult:
    latent: np.ndarray          # continuous y' that produced the best hard cost
    hard: np.ndarray            # hard_round(latent), what gets entropy coded
    initial_loss: float
    final_loss: float
    trace: list
    iterations: int
    improved: bool
    diverged: bool = False


class FrameObjective:
    """RD cost of a coded latent for one frame under fixed context."""

    def __init__(self, x, ctx, model: CodecModel, rate_index: int, w: float, lam: float,
                 beta: float = 1.0):
        self.x = ad.Tensor(x)
        self.model = model
        self.rate_index = rate_index
        self.mu, self.sigma = predict_entropy_params(ctx, model, rate_index)
        self.ctx_term = synthesis_context(ctx, model)
        self.pixels = x.shape[1] * x.shape[2]
        self.w, self.lam, self.beta = w, lam, beta

    def __call__(self, y_hat) -> tuple:
        r = ad.tsum(rate_bits(y_hat, self.mu, self.sigma))
        x_hat = synthesize(y_hat, self.ctx_term, self.model, self.rate_index)
        d = ad.tmean(ad.square(ad.sub(x_hat, self.x)))
        loss = rd_loss(r, ad.scale(d, self.pixels), self.w, self.lam, self.beta)
        return loss, float(r.data), float(d.data)


def refine_latent(y0: Latent, ctx, x, w_t: float, beta_t: float, model: CodecModel,
                  config: RefineConfig) -> RefineResult:
    if not model.frozen:
        raise RuntimeError("model must be frozen")
    objective = FrameObjective(x, ctx, model, y0.rate_index, w_t, config.lmbda, beta_t)
    best_y = y0.data
    best_hard = hard_round(y0.data)
    loss0, r0, d0 = objective(best_hard)
    best = initial = float(loss0.data)
    trace = [TraceRow(0, r0, d0, initial, 0.0, 0.0)]

    y = ad.Tensor(y0.data.copy(), requires_grad=True)
    step_fn = _AdamStep(y.shape) if config.optimizer == "adam" else (lambda g: g)
    diverged = False
    done = 0
    for i in range(config.max_iters):
        tau = config.sga.tau(i)
        lr = lr_at(i, config)
        try:
            rng = noise_stream(config.seed, y0.frame_index, i)
            soft = sga_quantize(y, tau, rng, config.sga.epsilon)
            loss, r, d = objective(soft)
            ad.backward(loss, [y])
            step = y.data - np.float32(lr) * step_fn(y.grad)
            if not np.all(np.isfinite(step)):
                raise ad.NonFiniteError("non-finite latent after update")
        except (ad.NonFiniteError, ValueError) as exc:
            log.warning("refinement stopped at iteration %d: %s", i, exc)
            diverged = True
            break
        trace.append(TraceRow(i + 1, r, d, float(loss.data), tau, lr))
        y = ad.Tensor(step, requires_grad=True)
        done = i + 1
        if done % config.eval_every == 0 or done == config.max_iters:
            cand = hard_round(y.data)
            cand_loss = float(objective(cand)[0].data)
            if cand_loss < best:
                best, best_y, best_hard = cand_loss, y.data.copy(), cand

    return RefineResult(best_y, best_hard, initial, best, trace, done, best < initial, diverged)


class _AdamStep:
    def __init__(self, shape, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(shape, np.float64)
        self.v = np.zeros(shape, np.float64)
        self.t = 0
        self.b1, self.b2, self.eps = b1, b2, eps

    def __call__(self, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return (m_hat / (np.sqrt(v_hat) + self.eps)).astype(np.float32)


def write_trace_csv(trace: list, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "R_bits", "D_mse", "loss", "tau", "lr"])
        for row in trace:
            wr.writerow([row.iteration, repr(row.r_bits), repr(row.d_mse), repr(row.loss),
                         repr(row.tau), repr(row.lr)])
