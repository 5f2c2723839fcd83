"""GOP-level encoding and decoding.

Bitstream layout (little endian)::

    header : magic "DCDT" | u16 version | u16 width | u16 height | u32 frames
             | u16 intra_period | u8 lambda_index | 32-byte model SHA-256
    frame  : u8 type (b"I" or b"P") | u32 payload length | range-coder payload

Nothing in the stream says whether refinement ran; the decoder has a single
path.
"""

from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .codec import (LAMBDAS, LATENT_CH, CodecModel, decode_frame, encode_frame, extract_context,
                    predict_entropy_params, zero_context)
from .entropy import RangeCoderError, build_cdf_table, range_decode, range_encode
from .metrics import psnr
from .quantizer import hard_round
from .rd_control import BetaController, frame_weight
from .refiner import FrameObjective, RefineConfig, refine_latent

__all__ = [
    "MODES",
    "GopConfig",
    "Bitstream",
    "BitstreamError",
    "InvariantError",
    "FrameStats",
    "EncodeResult",
    "encode_sequence",
    "decode_sequence",
]

log = logging.getLogger(__name__)

MODES = ("baseline", "refine_only", "refine_dynamic")
MAGIC = b"DCDT"
BITSTREAM_VERSION = 1
_HEADER = struct.Struct("<4sHHHIHB32s")
_RECORD = struct.Struct("<cI")


class BitstreamError(ValueError):
    pass


class InvariantError(RuntimeError):
    """Encoder and decoder views disagree."""


@dataclass(frozen=True)
class GopConfig:
    intra_period: int = 32
    frames_to_code: int = 96
    minigop: int = 4

    def __post_init__(self):
        if self.intra_period % self.minigop:
            raise ValueError("intra_period must be a multiple of minigop")
        if self.frames_to_code < 1:
            raise ValueError("frames_to_code must be >= 1")

    def is_intra(self, t: int) -> bool:
        return t % self.intra_period == 0


@dataclass
class Bitstream:
    width: int
    height: int
    intra_period: int
    lambda_index: int
    model_checksum: bytes
    records: list = field(default_factory=list)  # (type byte, payload)
    version: int = BITSTREAM_VERSION

    @property
    def frame_count(self) -> int:
        return len(self.records)

    def to_bytes(self) -> bytes:
        out = [_HEADER.pack(MAGIC, self.version, self.width, self.height, self.frame_count,
                            self.intra_period, self.lambda_index, self.model_checksum)]
        for ftype, payload in self.records:
            out.append(_RECORD.pack(ftype, len(payload)))
            out.append(payload)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _HEADER.size:
            raise BitstreamError("truncated stream header")
        magic, version, w, h, n, period, lam, digest = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise BitstreamError("bad magic")
        if version != BITSTREAM_VERSION:
            raise BitstreamError(f"unsupported bitstream version {version}")
        pos, records = _HEADER.size, []
        for i in range(n):
            if pos + _RECORD.size > len(data):
                raise BitstreamError(f"truncated stream at frame {i}")
            ftype, length = _RECORD.unpack_from(data, pos)
            pos += _RECORD.size
            if ftype not in (b"I", b"P"):
                raise BitstreamError(f"bad frame type at frame {i}")
            if pos + length > len(data):
                raise BitstreamError(f"truncated stream at frame {i}")
            records.append((ftype, data[pos:pos + length]))
            pos += length
        if pos != len(data):
            raise BitstreamError("trailing bytes after last frame")
        return cls(w, h, period, lam, digest, records, version)


@dataclass
class FrameStats:
    frame: int
    type: str
    bits: int
    bpp: float
    psnr: float
    delta_q: float
    beta: float
    w: float
    iters: int
    loss0: float
    loss1: float
    seconds: float = 0.0


@dataclass
class EncodeResult:
    bitstream: Bitstream
    stats: list
    reconstructions: list

    @property
    def bpp(self) -> float:
        return float(np.mean([s.bpp for s in self.stats]))

    @property
    def psnr(self) -> float:
        return float(np.mean([s.psnr for s in self.stats]))


def _code_latent(y_hat: np.ndarray, mu, sigma) -> tuple:
    symbols = y_hat.astype(np.int64).reshape(-1)
    cdfs = build_cdf_table(mu, sigma)
    payload = range_encode(symbols, cdfs)
    return payload, cdfs, symbols


def encode_sequence(frames, model: CodecModel, config: RefineConfig, gop: GopConfig = GopConfig(),
                    mode: str = "refine_dynamic", self_check: bool = True) -> EncodeResult:
    """Code ``frames[:gop.frames_to_code]`` at the rate point of ``config.lmbda``."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if not model.frozen:
        raise RuntimeError("model must be frozen")
    frames = list(frames)[:gop.frames_to_code]
    if not frames:
        raise ValueError("no frames to code")
    _, height, width = np.shape(frames[0])
    if height % 16 or width % 16:
        raise ValueError(f"frame dims {height}x{width} not divisible by 16")
    k = config.rate_index
    stream = Bitstream(width, height, gop.intra_period, k, model.checksum())
    controller = BetaController(step=config.beta_step, direction=config.beta_direction)
    refine = mode != "baseline"
    dynamic = mode == "refine_dynamic"

    stats, recons = [], []
    prev_recon, prev_quality = None, None
    for t, x in enumerate(frames):
        start = time.perf_counter()
        x = np.asarray(x, dtype=np.float32)
        if x.shape != (3, height, width):
            raise ValueError(f"frame {t} has shape {x.shape}, expected {(3, height, width)}")
        intra = gop.is_intra(t)
        ctx = zero_context(height, width) if intra else extract_context(prev_recon, model)
        y0 = encode_frame(x, ctx, model, k, t)
        w = frame_weight(t, gop.intra_period)
        beta, delta_q = controller.reset(), 0.0
        if dynamic and not intra:
            first = decode_frame(hard_round(y0.data), ctx, model, k)
            delta_q = psnr(x, first) - prev_quality
            beta = controller.update(delta_q)

        if refine:
            res = refine_latent(y0, ctx, x, w, beta, model, config)
            y_hat, iters, loss0, loss1 = res.hard, res.iterations, res.initial_loss, res.final_loss
        else:
            y_hat, iters, loss0, loss1 = hard_round(y0.data), 0, float("nan"), float("nan")

        mu, sigma = predict_entropy_params(ctx, model, k)
        payload, cdfs, symbols = _code_latent(y_hat, mu, sigma)
        if self_check:
            decoded = range_decode(payload, cdfs, symbols.size)
            if not np.array_equal(decoded, symbols):
                raise InvariantError(f"frame {t}: entropy decode differs from encoded symbols")
        recon = decode_frame(symbols.astype(np.float32).reshape(y_hat.shape), ctx, model, k)
        if self_check and not np.array_equal(recon, decode_frame(y_hat, ctx, model, k)):
            raise InvariantError(f"frame {t}: reconstruction depends on symbol dtype")
        stream.records.append((b"I" if intra else b"P", payload))

        quality = psnr(x, recon)
        bits = 8 * len(payload)
        if not refine:
            loss0 = loss1 = _baseline_cost(x, ctx, y_hat, model, config, w)
        stats.append(FrameStats(t, "I" if intra else "P", bits, bits / (width * height), quality,
                                delta_q, beta, w, iters, loss0, loss1,
                                time.perf_counter() - start))
        recons.append(recon)
        prev_recon, prev_quality = recon, quality
    return EncodeResult(stream, stats, recons)


def _baseline_cost(x, ctx, y_hat, model, config, w) -> float:
    obj = FrameObjective(x, ctx, model, config.rate_index, w, config.lmbda, 1.0)
    return float(obj(y_hat)[0].data)


def decode_sequence(bitstream, model: CodecModel, strict: bool = True) -> list:
    """Reconstruct every frame.

    ``strict=False`` decodes damaged payloads as far as the coder gets instead
    of raising, so the damage shows up in the pictures of that GOP only.
    """
    if isinstance(bitstream, (bytes, bytearray)):
        bitstream = Bitstream.from_bytes(bytes(bitstream))
    if bitstream.model_checksum != model.checksum():
        raise BitstreamError("model mismatch: stream was coded with a different model")
    if not 0 <= bitstream.lambda_index < len(LAMBDAS):
        raise BitstreamError(f"bad lambda index {bitstream.lambda_index}")
    h, w, k = bitstream.height, bitstream.width, bitstream.lambda_index
    count = LATENT_CH * (h // 4) * (w // 4)
    recons, prev = [], None
    for t, (ftype, payload) in enumerate(bitstream.records):
        intra = ftype == b"I"
        if intra != (t % bitstream.intra_period == 0):
            raise BitstreamError(f"frame {t}: type {ftype!r} inconsistent with intra period")
        ctx = zero_context(h, w) if intra else extract_context(prev, model)
        mu, sigma = predict_entropy_params(ctx, model, k)
        try:
            symbols = range_decode(payload, build_cdf_table(mu, sigma), count, strict=strict)
        except RangeCoderError as exc:
            raise BitstreamError(f"frame {t}: {exc}") from exc
        y_hat = symbols.astype(np.float32).reshape(LATENT_CH, h // 4, w // 4)
        prev = decode_frame(y_hat, ctx, model, k)
        recons.append(prev)
    return recons
