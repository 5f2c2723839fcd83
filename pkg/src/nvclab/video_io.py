"""Raw video ingest, BT.709 conversion, and seeded synthetic sequences.

Frames are handled internally as float32 arrays of shape ``[3, H, W]`` holding
RGB in ``[0, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "VideoFormatError",
    "RawVideo",
    "read_y4m",
    "write_y4m",
    "read_yuv420",
    "to_rgb_bt709",
    "ycbcr_to_rgb",
    "rgb_to_ycbcr",
    "rgb_to_yuv420",
    "check_frame",
    "splitmix64",
    "gen_synthetic",
]

KR, KB = 0.2126, 0.0722
KG = 1.0 - KR - KB


class VideoFormatError(ValueError):
    pass


@dataclass
class RawVideo:
    width: int
    height: int
    frame_count: int
    pixel_format: str = "420p8"
    frames: list = field(default_factory=list, repr=False)  # (Y, Cb, Cr) uint8 planes
    frame_rate: str = "30:1"

    def __post_init__(self):
        if self.width % 2 or self.height % 2:
            raise VideoFormatError(f"4:2:0 needs even dims, got {self.width}x{self.height}")
        ch, cw = self.height // 2, self.width // 2
        for y, u, v in self.frames:
            if y.shape != (self.height, self.width) or u.shape != (ch, cw) or v.shape != (ch, cw):
                raise VideoFormatError("plane sizes inconsistent with 4:2:0 layout")


def _split_planes(buf: bytes, width: int, height: int):
    n = width * height
    c = n // 4
    arr = np.frombuffer(buf, dtype=np.uint8)
    y = arr[:n].reshape(height, width)
    u = arr[n:n + c].reshape(height // 2, width // 2)
    v = arr[n + c:n + 2 * c].reshape(height // 2, width // 2)
    return y.copy(), u.copy(), v.copy()


def read_y4m(data: bytes) -> RawVideo:
    """Parse a YUV4MPEG2 stream (C420 family, 8-bit)."""
    if not data.startswith(b"YUV4MPEG2"):
        raise VideoFormatError("missing YUV4MPEG2 signature")
    end = data.find(b"\n")
    if end < 0:
        raise VideoFormatError("unterminated stream header")
    width = height = None
    rate, colorspace = "30:1", "420jpeg"
    for token in data[:end].decode("ascii").split()[1:]:
        key, val = token[0], token[1:]
        try:
            if key == "W":
                width = int(val)
            elif key == "H":
                height = int(val)
        except ValueError:
            raise VideoFormatError(f"malformed header token {token!r}") from None
        if key == "F":
            rate = val
        elif key == "C":
            colorspace = val
        elif key not in "WHIAXF":
            raise VideoFormatError(f"malformed header token {token!r}")
    if width is None or height is None or width <= 0 or height <= 0:
        raise VideoFormatError("header lacks valid W/H")
    if colorspace not in ("420", "420jpeg", "420paldv", "420mpeg2"):
        raise VideoFormatError(f"unsupported pixel format C{colorspace}")

    frame_size = width * height * 3 // 2
    frames = []
    pos = end + 1
    while pos < len(data):
        nl = data.find(b"\n", pos)
        if nl < 0 or not data.startswith(b"FRAME", pos):
            raise VideoFormatError(f"malformed frame header at frame {len(frames)}")
        start = nl + 1
        if start + frame_size > len(data):
            raise VideoFormatError(f"truncated frame {len(frames)}")
        frames.append(_split_planes(data[start:start + frame_size], width, height))
        pos = start + frame_size
    return RawVideo(width, height, len(frames), frames=frames, frame_rate=rate)


def write_y4m(video: RawVideo) -> bytes:
    out = [f"YUV4MPEG2 W{video.width} H{video.height} F{video.frame_rate} Ip A1:1 C420\n".encode()]
    for y, u, v in video.frames:
        out += [b"FRAME\n", y.tobytes(), u.tobytes(), v.tobytes()]
    return b"".join(out)


def read_yuv420(data: bytes, width: int, height: int, frames: int | None = None) -> RawVideo:
    """Read headerless planar 8-bit YUV 4:2:0."""
    frame_size = width * height * 3 // 2
    if frames is None:
        frames = len(data) // frame_size
    out = []
    for i in range(frames):
        chunk = data[i * frame_size:(i + 1) * frame_size]
        if len(chunk) < frame_size:
            raise VideoFormatError(f"truncated frame {i}")
        out.append(_split_planes(chunk, width, height))
    return RawVideo(width, height, frames, frames=out)


def ycbcr_to_rgb(y, cb, cr) -> np.ndarray:
    """Limited-range 8-bit-scale BT.709 Y'CbCr (same-size planes) to RGB in [0, 1]."""
    yn = (np.asarray(y, np.float64) - 16.0) / 219.0
    pb = (np.asarray(cb, np.float64) - 128.0) / 224.0
    pr = (np.asarray(cr, np.float64) - 128.0) / 224.0
    r = yn + 2.0 * (1.0 - KR) * pr
    b = yn + 2.0 * (1.0 - KB) * pb
    g = (yn - KR * r - KB * b) / KG
    return np.clip(np.stack([r, g, b]), 0.0, 1.0)


def rgb_to_ycbcr(rgb) -> tuple:
    """RGB ``[3, H, W]`` in [0, 1] to limited-range BT.709 values on the 8-bit scale (unrounded)."""
    r, g, b = np.asarray(rgb, np.float64)
    yn = KR * r + KG * g + KB * b
    pb = (b - yn) / (2.0 * (1.0 - KB))
    pr = (r - yn) / (2.0 * (1.0 - KR))
    return 16.0 + 219.0 * yn, 128.0 + 224.0 * pb, 128.0 + 224.0 * pr


def rgb_to_yuv420(rgb) -> tuple:
    """Quantize an RGB frame to 8-bit 4:2:0 planes (2x2 box-averaged chroma)."""
    y, cb, cr = rgb_to_ycbcr(rgb)
    h, w = y.shape

    def down(p):
        return p.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))

    def q(p):
        return np.clip(np.floor(p + 0.5), 0, 255).astype(np.uint8)

    return q(y), q(down(cb)), q(down(cr))


def to_rgb_bt709(raw: RawVideo, frame_index: int) -> np.ndarray:
    if not 0 <= frame_index < raw.frame_count:
        raise IndexError(f"frame index {frame_index} out of range [0, {raw.frame_count})")
    y, u, v = raw.frames[frame_index]
    up_u = u.repeat(2, axis=0).repeat(2, axis=1)
    up_v = v.repeat(2, axis=0).repeat(2, axis=1)
    return ycbcr_to_rgb(y, up_u, up_v).astype(np.float32)


def check_frame(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise ValueError(f"expected [3, H, W] frame, got {frame.shape}")
    if frame.shape[1] % 16 or frame.shape[2] % 16:
        raise ValueError(f"frame dims must be divisible by 16, got {frame.shape[1:]}")
    return np.clip(frame, 0.0, 1.0)


# ---------------------------------------------------------------- synthetic

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """Outputs ``offset .. offset+n-1`` of the SplitMix64 stream for ``seed``."""
    with np.errstate(over="ignore"):
        idx = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
        z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + idx * _GAMMA
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _uniform(seed: int, shape, offset: int = 0) -> np.ndarray:
    n = int(np.prod(shape))
    bits = splitmix64(seed, n, offset) >> np.uint64(11)
    return (bits.astype(np.float64) * (1.0 / 2.0**53)).reshape(shape)


def _value_noise(seed: int, height: int, width: int, cell: int, offset: int) -> np.ndarray:
    """Periodic value noise: random lattice values, smoothstep-interpolated."""
    gh, gw = height // cell, width // cell
    lattice = _uniform(seed, (gh, gw), offset)
    ty = (np.arange(height) % cell) / cell
    tx = (np.arange(width) % cell) / cell
    sy, sx = ty * ty * (3 - 2 * ty), tx * tx * (3 - 2 * tx)
    y0 = np.arange(height) // cell
    x0 = np.arange(width) // cell
    y1, x1 = (y0 + 1) % gh, (x0 + 1) % gw
    a = lattice[y0][:, x0]
    b = lattice[y0][:, x1]
    c = lattice[y1][:, x0]
    d = lattice[y1][:, x1]
    top = a + (b - a) * sx[None, :]
    bot = c + (d - c) * sx[None, :]
    return top + (bot - top) * sy[:, None]


_OCTAVES = ((16, 0.45), (8, 0.3), (4, 0.25))
_NOISE_AMPLITUDE = 0.02


def _texture(seed: int, height: int, width: int) -> np.ndarray:
    offset = 0
    chans = []
    for _ in range(4):  # luminance + three colour offsets
        acc = np.zeros((height, width))
        for cell, amp in _OCTAVES:
            acc += amp * _value_noise(seed, height, width, cell, offset)
            offset += (height // cell) * (width // cell)
        chans.append(acc)
    lum = chans[0]
    rgb = np.stack([0.75 * lum + 0.25 * c for c in chans[1:]])
    return rgb, offset


def gen_synthetic(seed: int, width: int, height: int, frames: int, motion: str = "pan") -> list:
    """Deterministic synthetic RGB sequence.

    ``pan`` shifts a periodic texture right by one pixel per frame (wrapping);
    ``noise`` keeps the texture static and adds fresh low-amplitude noise per
    frame; ``mixed`` combines both.
    """
    if width % 16 or height % 16:
        raise ValueError(f"dims must be divisible by 16, got {width}x{height}")
    if motion not in ("pan", "noise", "mixed"):
        raise ValueError(f"unknown motion {motion!r}")
    tex, offset = _texture(seed, height, width)
    out = []
    for t in range(frames):
        f = np.roll(tex, t, axis=2) if motion in ("pan", "mixed") else tex.copy()
        if motion in ("noise", "mixed"):
            u = _uniform(seed, f.shape, offset + t * f.size)
            f = f + _NOISE_AMPLITUDE * (2.0 * u - 1.0)
        out.append(np.clip(f, 0.0, 1.0).astype(np.float32))
    return out
