"""Gaussian rate model and a byte-oriented range coder.

Range coder format
------------------
State: ``low`` (33 significant bits, carry in bit 32), ``range`` (32 bits),
plus a one-byte ``cache`` and a pending-0xFF counter.  Every symbol is coded
against a 16-bit frequency table (total ``2**16``)::

    r = range >> 16
    low += r * cdf[s]
    range = r * freq[s]
    while range < 2**24: range <<= 8; shift_low()

``shift_low`` emits the cached byte (plus carry) and any pending 0xFF bytes
once the top byte of ``low`` is settled, then keeps bits 0..23 of ``low``
shifted left by 8.  ``flush`` calls ``shift_low`` five times, so every
payload starts with one 0x00 byte.  The decoder primes ``code`` with five
bytes and mirrors the arithmetic; bytes past the end read as zero.

Symbols outside ``[-L, L]`` are sent as the escape symbol followed by the
value plus 32768, coded with a flat 16-bit distribution.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import autodiff as ad

__all__ = [
    "PRECISION",
    "TOTAL",
    "ALPHABET_HALF",
    "LIKELIHOOD_FLOOR",
    "SIGMA_MIN",
    "RangeCoderError",
    "RateEstimate",
    "CdfTable",
    "estimate_rate",
    "rate_bits",
    "build_cdf_table",
    "range_encode",
    "range_decode",
    "payload_bits",
]

PRECISION = 16
TOTAL = 1 << PRECISION
ALPHABET_HALF = 64
LIKELIHOOD_FLOOR = 2.0 ** -PRECISION
SIGMA_MIN = 0.01
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
_RAW_OFFSET = 32768


class RangeCoderError(ValueError):
    pass


# ---------------------------------------------------------------- rate model

@dataclass
class RateEstimate:
    total: ad.Tensor
    per_element: ad.Tensor | None = None

    @property
    def total_bits(self) -> float:
        return float(self.total.data)


def rate_bits(y_hat, mu, sigma) -> ad.Tensor:
    """Differentiable per-element bits ``-log2 P(bin of y_hat)`` under N(mu, sigma)."""
    y_hat = ad.as_tensor(y_hat)
    mu = mu.data if isinstance(mu, ad.Tensor) else np.asarray(mu)
    sigma = sigma.data if isinstance(sigma, ad.Tensor) else np.asarray(sigma)
    if np.any(sigma < np.float32(SIGMA_MIN)):
        raise ValueError(f"sigma below {SIGMA_MIN}: upstream clamp missing")
    # fold onto the lower tail, where the CDF difference keeps its precision
    dist = ad.abs_(ad.sub(y_hat, mu))
    inv_sigma = (1.0 / sigma).astype(ad.get_dtype())
    upper = ad.ndtr(ad.mul(ad.sub(0.5, dist), inv_sigma))
    lower = ad.ndtr(ad.mul(ad.sub(-0.5, dist), inv_sigma))
    p = ad.maximum_const(ad.sub(upper, lower), LIKELIHOOD_FLOOR)
    return ad.scale(ad.log(p), -1.0 / math.log(2.0))


def estimate_rate(y_hat, mu, sigma, keep_elements: bool = False) -> RateEstimate:
    bits = rate_bits(y_hat, mu, sigma)
    return RateEstimate(ad.tsum(bits), bits if keep_elements else None)


# ---------------------------------------------------------------- CDF tables

@dataclass
class CdfTable:
    """Quantized cumulative frequencies, one row per distribution.

    ``cdf`` has shape ``[rows, nsym + 1]`` with ``cdf[:, 0] == 0`` and
    ``cdf[:, -1] == 2**16``.  Symbol ``i`` of a stream uses row ``index[i]``
    (row ``i`` when ``index`` is None).  With ``offset`` set, symbol ``v`` of
    the stream maps to table column ``v + offset`` and the last column is the
    escape symbol.
    """

    cdf: np.ndarray
    index: np.ndarray | None = None
    offset: int | None = None

    def __post_init__(self):
        self.cdf = np.asarray(self.cdf, dtype=np.int64)
        if self.cdf.ndim != 2:
            raise ValueError("cdf must be 2-D")
        freq = np.diff(self.cdf, axis=1)
        if np.any(self.cdf[:, 0] != 0) or np.any(self.cdf[:, -1] != TOTAL) or np.any(freq < 1):
            raise ValueError("invalid CDF table: need 0..2**16 with every frequency >= 1")

    @property
    def nsym(self) -> int:
        return self.cdf.shape[1] - 1

    def row(self, i: int) -> int:
        return i if self.index is None else int(self.index[i])

    @classmethod
    def from_pmf(cls, pmf, index=None, offset=None) -> "CdfTable":
        pmf = np.atleast_2d(np.asarray(pmf, dtype=np.float64))
        pmf = pmf / pmf.sum(axis=1, keepdims=True)
        return cls(_quantize_pmf(pmf), index, offset)


def _quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    rows, nsym = pmf.shape
    freq = np.floor(pmf * (TOTAL - nsym)).astype(np.int64) + 1
    spare = TOTAL - freq.sum(axis=1)
    freq[np.arange(rows), np.argmax(freq, axis=1)] += spare
    cdf = np.zeros((rows, nsym + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cdf[:, 1:])
    return cdf


def build_cdf_table(mu, sigma, L: int = ALPHABET_HALF) -> CdfTable:
    """Per-element Gaussian tables over ``[-L, L]`` plus an escape symbol."""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1, 1)
    edges = np.arange(-L - 0.5, L + 1.0, 1.0)[None, :]
    z = (edges - mu) / sigma
    # difference of upper tails above the mean, lower tails below: no cancellation
    lo_tail = special.ndtr(z)
    hi_tail = special.ndtr(-z)
    upper_side = edges[:, :-1] >= mu
    pmf = np.where(upper_side, hi_tail[:, :-1] - hi_tail[:, 1:], lo_tail[:, 1:] - lo_tail[:, :-1])
    escape = lo_tail[:, :1] + hi_tail[:, -1:]
    pmf = np.maximum(np.concatenate([pmf, escape], axis=1), 0.0)
    return CdfTable(_quantize_pmf(pmf), None, L)


# ------------------------------------------------------------------- encoder

class _Encoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        low = self.low
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if not self.cache_size:
                    break
            self.cache = (low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def encode(self, start: int, freq: int):
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class _Decoder:
    def __init__(self, data: bytes, strict: bool = True):
        self.data = data
        self.strict = strict
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(5):
            self.code = ((self.code << 8) | self._byte()) & _MASK32

    def _byte(self) -> int:
        b = self.data[self.pos] if self.pos < len(self.data) else 0
        self.pos += 1
        return b

    def target(self) -> tuple:
        r = self.range >> PRECISION
        v = self.code // r
        if v >= TOTAL:
            if self.strict:
                raise RangeCoderError(f"corrupt stream near byte {self.pos}")
            v = TOTAL - 1
        return r, v

    def consume(self, r: int, start: int, freq: int):
        self.code -= r * start
        self.range = r * freq
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._byte()) & _MASK32
            self.range <<= 8


def _escape_layout(cdfs: CdfTable):
    if cdfs.offset is None:
        return None, None
    return cdfs.offset, cdfs.nsym - 1


def range_encode(symbols, cdfs: CdfTable) -> bytes:
    symbols = np.asarray(symbols).reshape(-1)
    if symbols.size == 0:
        return b""
    offset, esc = _escape_layout(cdfs)
    cdf = cdfs.cdf
    enc = _Encoder()
    rows = np.arange(symbols.size) if cdfs.index is None else np.asarray(cdfs.index)
    cols = symbols.astype(np.int64) + (offset or 0)
    raw = None
    if offset is not None:
        raw = (cols < 0) | (cols >= esc)
        cols = np.where(raw, esc, cols)
    starts = cdf[rows, cols].tolist()
    freqs = (cdf[rows, cols + 1] - cdf[rows, cols]).tolist()
    vals = symbols.astype(np.int64).tolist()
    raw = raw.tolist() if raw is not None else None
    if raw is None and (min(cols.tolist()) < 0 or max(cols.tolist()) >= cdfs.nsym):
        raise RangeCoderError("symbol outside coder alphabet")
    for i, (start, freq) in enumerate(zip(starts, freqs)):
        enc.encode(start, freq)
        if raw is not None and raw[i]:
            v = vals[i] + _RAW_OFFSET
            if not 0 <= v < TOTAL:
                raise RangeCoderError(f"escaped value {vals[i]} exceeds 16-bit raw range")
            enc.encode(v, 1)
    return enc.finish()


def range_decode(data: bytes, cdfs: CdfTable, count: int, verify: bool = False,
                 strict: bool = True) -> np.ndarray:
    """Decode ``count`` symbols.

    With ``verify`` the decoded symbols are re-encoded and compared with
    ``data`` byte for byte, which catches payload corruption.  With
    ``strict=False`` an over-read payload still returns what was decoded.
    """
    if count == 0:
        if data:
            raise RangeCoderError("non-empty payload for zero symbols")
        return np.zeros(0, dtype=np.int64)
    offset, esc = _escape_layout(cdfs)
    table = cdfs.cdf.tolist()
    index = None if cdfs.index is None else np.asarray(cdfs.index).tolist()
    dec = _Decoder(data, strict)
    out = [0] * count
    for i in range(count):
        row = table[i if index is None else index[i]]
        r, v = dec.target()
        s = bisect.bisect_right(row, v) - 1
        dec.consume(r, row[s], row[s + 1] - row[s])
        if offset is not None:
            if s == esc:
                r, v = dec.target()
                dec.consume(r, v, 1)
                out[i] = v - _RAW_OFFSET
            else:
                out[i] = s - offset
        else:
            out[i] = s
    if strict and dec.pos > len(data) + 5:
        raise RangeCoderError(f"stream exhausted at byte {len(data)} while decoding")
    result = np.asarray(out, dtype=np.int64)
    if verify:
        again = range_encode(result, cdfs)
        if again != data:
            n = min(len(again), len(data))
            pos = next((k for k in range(n) if again[k] != data[k]), n)
            raise RangeCoderError(f"payload mismatch at byte {pos}: stream corrupted")
    return result


def payload_bits(data: bytes) -> int:
    return 8 * len(data)
