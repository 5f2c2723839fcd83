"""A small frozen conditional codec.

Layout (all kernels ``[C_out, C_in, k, k]``)::

    context   g_c : x_prev -> conv5/2 (32) -> lrelu -> conv5/2 (48)            = ctx
    analysis  g_a : x      -> conv5/2 (32) -> lrelu -> conv5/2 (48) + conv1(ctx) = y
    entropy   g_e : ctx    -> conv3 (48) -> lrelu -> {conv3 -> mu, conv3 -> softplus -> sigma}
    synthesis g_s : tconv5/2(y) + tconv5/2(ctx) -> lrelu -> tconv5/2 (3)  = x_hat

Variable rate comes from a fixed quantization scale per rate point: the coded
latent is ``y / scale[k]`` and the decoder multiplies it back.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .entropy import SIGMA_MIN, rate_bits
from .video_io import gen_synthetic

__all__ = [
    "LAMBDAS",
    "LAMBDA_TRAIN",
    "ModelFormatError",
    "CodecModel",
    "Latent",
    "init_model",
    "extract_context",
    "zero_context",
    "encode_frame",
    "predict_entropy_params",
    "decode_frame",
    "synthesis_context",
    "synthesize",
    "pretrain",
    "training_sequences",
    "DivergenceError",
    "save_model",
    "load_model",
    "default_model",
]

log = logging.getLogger(__name__)

LAMBDAS = (680.0, 1360.0, 3040.0, 6720.0)
LAMBDA_TRAIN = 1360.0
SIGMA_MAX = 64.0
FORMAT_VERSION = 1
_MAGIC = b"NVCM"

LATENT_CH = 48
HIDDEN_CH = 32
KERNEL = 5
HEAD_KERNEL = 3

# name -> shape; payload order of the model file
PARAM_SHAPES = {
    "gc1_w": (HIDDEN_CH, 3, KERNEL, KERNEL), "gc1_b": (HIDDEN_CH,),
    "gc2_w": (LATENT_CH, HIDDEN_CH, KERNEL, KERNEL), "gc2_b": (LATENT_CH,),
    "ga1_w": (HIDDEN_CH, 3, KERNEL, KERNEL), "ga1_b": (HIDDEN_CH,),
    "ga2_w": (LATENT_CH, HIDDEN_CH, KERNEL, KERNEL), "ga2_b": (LATENT_CH,),
    "gac_w": (LATENT_CH, LATENT_CH, 1, 1),
    "ge1_w": (LATENT_CH, LATENT_CH, HEAD_KERNEL, HEAD_KERNEL), "ge1_b": (LATENT_CH,),
    "gem_w": (LATENT_CH, LATENT_CH, HEAD_KERNEL, HEAD_KERNEL), "gem_b": (LATENT_CH,),
    "ges_w": (LATENT_CH, LATENT_CH, HEAD_KERNEL, HEAD_KERNEL), "ges_b": (LATENT_CH,),
    "gs1_w": (HIDDEN_CH, LATENT_CH, KERNEL, KERNEL), "gs1_b": (HIDDEN_CH,),
    "gsc_w": (HIDDEN_CH, LATENT_CH, KERNEL, KERNEL),
    "gs2_w": (3, HIDDEN_CH, KERNEL, KERNEL), "gs2_b": (3,),
}


class ModelFormatError(ValueError):
    pass


@dataclass
class CodecModel:
    params: dict
    rate_scales: tuple = tuple(float(np.float32(np.sqrt(LAMBDA_TRAIN / lam))) for lam in LAMBDAS)
    frozen: bool = False
    version: int = FORMAT_VERSION
    _tensors: dict = field(default=None, repr=False, compare=False)

    def freeze(self) -> "CodecModel":
        for arr in self.params.values():
            arr.flags.writeable = False
        self.frozen = True
        self._tensors = {k: ad.Tensor(v) for k, v in self.params.items()}
        return self

    def tensors(self) -> dict:
        if self._tensors is None or not self.frozen:
            return {k: ad.Tensor(v) for k, v in self.params.items()}
        return self._tensors

    def payload(self) -> bytes:
        return b"".join(np.ascontiguousarray(self.params[k], dtype="<f4").tobytes()
                        for k in PARAM_SHAPES)

    def checksum(self) -> bytes:
        return hashlib.sha256(self.payload()).digest()

    def scale(self, rate_index: int) -> float:
        return self.rate_scales[rate_index]


@dataclass
class Latent:
    data: np.ndarray
    frame_index: int = 0
    rate_index: int = 1

    @property
    def shape(self) -> tuple:
        return self.data.shape


def init_model(seed: int) -> CodecModel:
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {}
    for name, shape in PARAM_SHAPES.items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape, np.float32)
            continue
        fan_in = shape[1] * shape[2] * shape[3]
        if name in ("gs1_w", "gsc_w", "gs2_w"):
            fan_in //= 4  # stride-2 transposed conv sees a quarter of the taps per output
        std = np.sqrt(1.0 / fan_in)
        params[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    params["ges_b"][:] = 0.5413  # softplus(0.5413) == 1
    return CodecModel(params)


# ------------------------------------------------------------ network pieces

def _context(P, prev: ad.Tensor) -> ad.Tensor:
    h = ad.leaky_relu(ad.conv2d(prev, P["gc1_w"], P["gc1_b"], stride=2))
    return ad.conv2d(h, P["gc2_w"], P["gc2_b"], stride=2)


def _analysis(P, x: ad.Tensor, ctx: ad.Tensor) -> ad.Tensor:
    h = ad.leaky_relu(ad.conv2d(x, P["ga1_w"], P["ga1_b"], stride=2))
    y = ad.conv2d(h, P["ga2_w"], P["ga2_b"], stride=2)
    return ad.add(y, ad.conv2d(ctx, P["gac_w"]))


def _entropy_head(P, ctx: ad.Tensor) -> tuple:
    h = ad.leaky_relu(ad.conv2d(ctx, P["ge1_w"], P["ge1_b"]))
    mu = ad.conv2d(h, P["gem_w"], P["gem_b"])
    sigma = ad.softplus(ad.conv2d(h, P["ges_w"], P["ges_b"]))
    return mu, sigma


def _synthesis_context(P, ctx: ad.Tensor) -> ad.Tensor:
    return ad.conv2d(ctx, P["gsc_w"], P["gs1_b"], stride=2, transposed=True)


def _synthesis(P, y: ad.Tensor, ctx_term: ad.Tensor) -> ad.Tensor:
    h = ad.add(ad.conv2d(y, P["gs1_w"], stride=2, transposed=True), ctx_term)
    return ad.conv2d(ad.leaky_relu(h), P["gs2_w"], P["gs2_b"], stride=2, transposed=True)


# ---------------------------------------------------------------- public ops

def _check_frame(model: CodecModel, x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] != 3 or x.shape[1] % 16 or x.shape[2] % 16:
        raise ValueError(f"shape mismatch: expected [3, H, W] with H, W divisible by 16, got {x.shape}")
    return x


def _check_ctx(ctx, hw) -> np.ndarray:
    ctx = np.asarray(ctx)
    want = (LATENT_CH, hw[0] // 4, hw[1] // 4)
    if ctx.shape != want:
        raise ValueError(f"shape mismatch: context {ctx.shape}, expected {want}")
    return ctx


def zero_context(height: int, width: int) -> np.ndarray:
    return np.zeros((LATENT_CH, height // 4, width // 4), np.float32)


def extract_context(prev_recon, model: CodecModel, intra: bool = False) -> np.ndarray:
    """Temporal context from the previous reconstruction; zeros for intra frames."""
    prev_recon = _check_frame(model, prev_recon)
    if intra:
        return zero_context(*prev_recon.shape[1:])
    return _context(model.tensors(), ad.Tensor(prev_recon)).data


def encode_frame(x, ctx, model: CodecModel, rate_index: int = 1, frame_index: int = 0) -> Latent:
    if not model.frozen:
        raise RuntimeError("model must be frozen before encoding")
    x = _check_frame(model, x)
    ctx = _check_ctx(ctx, x.shape[1:])
    y = _analysis(model.tensors(), ad.Tensor(x), ad.Tensor(ctx))
    scaled = ad.scale(y, 1.0 / model.scale(rate_index))
    return Latent(scaled.data, frame_index, rate_index)


def predict_entropy_params(ctx, model: CodecModel, rate_index: int = 1) -> tuple:
    """Per-element (mu, sigma) in the coded (scaled) latent domain."""
    if not model.frozen:
        raise RuntimeError("model must be frozen before encoding")
    mu, sigma = _entropy_head(model.tensors(), ad.Tensor(ctx))
    inv = np.float32(1.0 / model.scale(rate_index))
    return mu.data * inv, np.clip(sigma.data * inv, np.float32(SIGMA_MIN), np.float32(SIGMA_MAX))


def synthesis_context(ctx, model: CodecModel) -> ad.Tensor:
    """Context branch of the decoder; constant for a given frame."""
    return _synthesis_context(model.tensors(), ad.Tensor(ctx))


def synthesize(y_hat, ctx_term: ad.Tensor, model: CodecModel, rate_index: int) -> ad.Tensor:
    """Decoder body on a (possibly soft, differentiable) coded latent."""
    y = ad.scale(ad.as_tensor(y_hat), model.scale(rate_index))
    return ad.clamp(_synthesis(model.tensors(), y, ctx_term), 0.0, 1.0)


def decode_frame(y_hat, ctx, model: CodecModel, rate_index: int | None = None) -> np.ndarray:
    if isinstance(y_hat, Latent):
        rate_index = y_hat.rate_index if rate_index is None else rate_index
        y_hat = y_hat.data
    if rate_index is None:
        raise ValueError("rate_index required")
    y_hat = np.asarray(y_hat)
    ctx = np.asarray(ctx)
    if y_hat.shape != ctx.shape:
        raise ValueError(f"shape mismatch: latent {y_hat.shape}, context {ctx.shape}")
    return synthesize(y_hat, synthesis_context(ctx, model), model, rate_index).data


# ----------------------------------------------------------------- training

class DivergenceError(RuntimeError):
    pass


def training_sequences(seed: int, count: int = 8, size: int = 64, frames: int = 8) -> list:
    motions = ("pan", "noise", "mixed")
    return [gen_synthetic(seed * 1000 + i, size, size, frames, motions[i % 3]) for i in range(count)]


def pretrain(model: CodecModel, dataset, steps: int, lambda_train: float = LAMBDA_TRAIN,
             seed: int = 0, lr: float = 1e-3, intra_fraction: float = 0.25,
             clip_norm: float = 5.0, optimizer: str = "adam",
             history: list | None = None) -> CodecModel:
    """Fit parameters on ``bpp + lambda * MSE`` with additive uniform noise, then freeze.

    ``optimizer`` is ``"adam"`` (fixed step size, default betas) or ``"sgd"``
    (plain descent with the global gradient norm clipped to ``clip_norm``).
    ``history`` (if given) collects the per-step loss.
    """
    if model.frozen:
        raise RuntimeError("model already frozen")
    rng = np.random.Generator(np.random.PCG64(seed))
    P = {k: ad.Tensor(v.copy(), requires_grad=True) for k, v in model.params.items()}
    leaves = [P[k] for k in PARAM_SHAPES]
    m1 = {k: np.zeros_like(v.data) for k, v in P.items()}
    m2 = {k: np.zeros_like(v.data) for k, v in P.items()}
    b1, b2 = 0.9, 0.999
    for step in range(steps):
        seq = dataset[rng.integers(len(dataset))]
        t = int(rng.integers(1, len(seq)))
        k = int(rng.integers(len(LAMBDAS)))
        q = model.rate_scales[k]
        x = ad.Tensor(seq[t])
        if rng.random() < intra_fraction:
            ctx = ad.Tensor(zero_context(*seq[t].shape[1:]))
        else:
            ctx = _context(P, ad.Tensor(seq[t - 1]))
        y = ad.scale(_analysis(P, x, ctx), 1.0 / q)
        noise = rng.uniform(-0.5, 0.5, y.shape).astype(np.float32)
        y_tilde = ad.add(y, noise)
        mu, sigma = _entropy_head(P, ctx)
        mu = ad.scale(mu, 1.0 / q)
        sigma = ad.clamp(ad.scale(sigma, 1.0 / q), SIGMA_MIN, SIGMA_MAX)
        pixels = x.shape[1] * x.shape[2]
        bpp = ad.scale(ad.tsum(_rate_bits_soft_sigma(y_tilde, mu, sigma)), 1.0 / pixels)
        x_hat = _synthesis(P, ad.scale(y_tilde, q), _synthesis_context(P, ctx))
        mse = ad.tmean(ad.square(ad.sub(x_hat, x)))
        loss = ad.add(bpp, ad.scale(mse, lambda_train))
        if not np.isfinite(loss.data):
            raise DivergenceError(f"loss diverged at step {step}")
        grads = ad.backward(loss)  # context params sit out intra steps
        norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
        if not np.isfinite(norm):
            raise DivergenceError(f"non-finite gradient at step {step}")
        factor = lr * min(1.0, clip_norm / max(norm, 1e-12))
        for name, p in P.items():
            if p.grad is None:
                continue
            if optimizer == "adam":
                m1[name] = b1 * m1[name] + (1 - b1) * p.grad
                m2[name] = b2 * m2[name] + (1 - b2) * p.grad * p.grad
                m_hat = m1[name] / (1 - b1 ** (step + 1))
                v_hat = m2[name] / (1 - b2 ** (step + 1))
                p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + 1e-8)).astype(np.float32)
            else:
                p.data = p.data - np.float32(factor) * p.grad
            p.grad = None
        if history is not None:
            history.append(float(loss.data))
        if step % 200 == 0:
            log.info("pretrain step %d loss %.4f (bpp %.3f mse %.5f)", step, float(loss.data),
                     float(bpp.data), float(mse.data))
    out = CodecModel({k: P[k].data.copy() for k in PARAM_SHAPES}, model.rate_scales)
    return out.freeze()


def _rate_bits_soft_sigma(y, mu, sigma):
    """Rate term with differentiable mu and sigma (training only)."""
    dist = ad.abs_(ad.sub(y, mu))
    inv = ad.exp(ad.neg(ad.log(sigma)))
    upper = ad.ndtr(ad.mul(ad.sub(0.5, dist), inv))
    lower = ad.ndtr(ad.mul(ad.sub(-0.5, dist), inv))
    p = ad.maximum_const(ad.sub(upper, lower), 2.0 ** -16)
    return ad.scale(ad.log(p), -1.0 / np.log(2.0))


# --------------------------------------------------------------- model file

_HEADER = struct.Struct("<4sHHHHHH4fI32s")


def save_model(model: CodecModel, path) -> None:
    if not model.frozen:
        raise RuntimeError("only frozen models are saved")
    payload = model.payload()
    header = _HEADER.pack(_MAGIC, model.version, 3, HIDDEN_CH, LATENT_CH, KERNEL, HEAD_KERNEL,
                          *model.rate_scales, len(payload) // 4, hashlib.sha256(payload).digest())
    with open(path, "wb") as fh:
        fh.write(header + payload)


def load_model(path) -> CodecModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise ModelFormatError("model file truncated")
    magic, version, cin, hidden, latent, k, hk, *rest = _HEADER.unpack_from(blob)
    scales, count, digest = tuple(rest[:4]), rest[4], rest[5]
    if magic != _MAGIC:
        raise ModelFormatError("bad model magic")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    if (cin, hidden, latent, k, hk) != (3, HIDDEN_CH, LATENT_CH, KERNEL, HEAD_KERNEL):
        raise ModelFormatError("architecture dims do not match this build")
    payload = blob[_HEADER.size:]
    if len(payload) != 4 * count:
        raise ModelFormatError("payload length mismatch")
    if hashlib.sha256(payload).digest() != digest:
        raise ModelFormatError("model checksum mismatch")
    flat = np.frombuffer(payload, dtype="<f4")
    params, pos = {}, 0
    for name, shape in PARAM_SHAPES.items():
        n = int(np.prod(shape))
        params[name] = flat[pos:pos + n].reshape(shape).astype(np.float32)
        pos += n
    # float32 header values round-trip exactly through the struct
    return CodecModel(params, tuple(float(s) for s in scales), version=version).freeze()


def default_model(seed: int = 0, steps: int = 4000, cache_dir=None) -> CodecModel:
    """Pretrained model for ``(seed, steps)``, cached on disk when ``cache_dir`` is given."""
    import os

    path = None
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        path = os.path.join(cache_dir, f"codec_s{seed}_n{steps}.nvcm")
        if os.path.exists(path):
            return load_model(path)
    model = pretrain(init_model(seed), training_sequences(seed), steps, seed=seed)
    if path is not None:
        save_model(model, path)
    return model
