"""Range coding of quantized latent symbols under per-channel Laplacian models.

The coder is the carry-propagating 32-bit design used by LZMA: ``low`` holds
33 bits, pending 0xFF bytes are buffered in ``cache``/``cache_size`` until a
carry either resolves or cannot happen. Frequencies are 16-bit so one
``range >> 16`` replaces the division.
"""

from __future__ import annotations

import json
import math
import struct
from bisect import bisect_right
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

MAGIC = 0xEC
VERSION = 1
HEADER = struct.Struct("<BBI")

FREQ_BITS = 16
TOTAL = 1 << FREQ_BITS
TOP = 1 << 24
MAX_DIRECT = 255  # |s| <= MAX_DIRECT is coded by the model directly
ESCAPE = 2 * MAX_DIRECT + 1  # model index of the escape bucket
ESCAPE_BITS = 16
MAX_SYMBOL = MAX_DIRECT + 1 + (1 << ESCAPE_BITS) - 1
SCALE_FLOOR = 1e-3
SIDE_INFO_BITS_PER_CHANNEL = 16


class DecodeError(ValueError):
    pass


class AlphabetError(ValueError):
    pass


@dataclass(frozen=True)
class ScaleTable:
    """Per-channel symbol scale (std of quantized symbols) and quantizer step."""

    scales: np.ndarray
    steps: np.ndarray

    def __post_init__(self):
        scales = np.asarray(self.scales, dtype=np.float64)
        steps = np.asarray(self.steps, dtype=np.float64)
        if scales.shape != steps.shape or scales.ndim != 1:
            raise ValueError("scales and steps must be 1-D arrays of equal length")
        if np.any(~(scales > 0)) or np.any(~(steps > 0)):
            raise ValueError("scales and steps must be positive")
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "steps", steps)

    def __len__(self):
        return len(self.scales)

    def side_info_bits(self, n_channels: int | None = None) -> int:
        return SIDE_INFO_BITS_PER_CHANNEL * (len(self) if n_channels is None else n_channels)

    def to_json(self) -> str:
        return json.dumps({"scales": self.scales.tolist(), "steps": self.steps.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "ScaleTable":
        obj = json.loads(text)
        return cls(np.array(obj["scales"]), np.array(obj["steps"]))


@dataclass(frozen=True)
class Bitstream:
    data: bytes
    symbol_count: int

    def to_bytes(self) -> bytes:
        return HEADER.pack(MAGIC, VERSION, self.symbol_count) + self.data

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Bitstream":
        if len(raw) < HEADER.size:
            raise DecodeError(f"bitstream too short for header ({len(raw)} bytes)")
        magic, version, count = HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise DecodeError(f"bad bitstream magic 0x{magic:02x}")
        if version != VERSION:
            raise DecodeError(f"unsupported bitstream version {version}")
        return cls(bytes(raw[HEADER.size:]), count)

    @property
    def n_bits(self) -> int:
        return 8 * (HEADER.size + len(self.data))


# -- probability model -------------------------------------------------------

def _laplace_cdf(x: np.ndarray, b: float) -> np.ndarray:
    tail = 0.5 * np.exp(-np.abs(x) / b)
    return np.where(x < 0, tail, 1.0 - tail)


def laplacian_pmf(scale: float) -> np.ndarray:
    """Model probabilities for symbols -255..255 followed by the escape bucket.

    ``scale`` is the standard deviation of the continuous zero-mean Laplacian
    that is integrated over unit bins.
    """
    b = max(float(scale), SCALE_FLOOR) / math.sqrt(2.0)
    edges = np.arange(-MAX_DIRECT - 0.5, MAX_DIRECT + 1.5)
    cdf = _laplace_cdf(edges, b)
    pmf = np.empty(ESCAPE + 1)
    pmf[:ESCAPE] = np.diff(cdf)
    pmf[ESCAPE] = cdf[0] + (1.0 - cdf[-1])
    return pmf


@lru_cache(maxsize=4096)
def _model(scale: float) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Integer frequencies (each >= 1, summing to TOTAL) and their cumulative table."""
    pmf = laplacian_pmf(scale)
    n = len(pmf)
    freq = 1 + np.floor(pmf * (TOTAL - n)).astype(np.int64)
    freq[int(np.argmax(pmf))] += TOTAL - int(freq.sum())
    cum = np.concatenate([[0], np.cumsum(freq)])
    return tuple(int(f) for f in freq), tuple(int(c) for c in cum)


def model_tables(scale: float):
    return _model(float(scale))


# -- coder -------------------------------------------------------------------

class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = 0xFFFFFFFF
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        low = self.low
        if low < 0xFF000000 or low >= 0x100000000:
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

    def encode(self, start: int, size: int, total_bits: int):
        r = self.range >> total_bits
        self.low += r * start
        self.range = r * size
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_symbol(self, symbol: int, freq: Sequence[int], cum: Sequence[int]):
        s = int(symbol)
        a = -s if s < 0 else s
        if a <= MAX_DIRECT:
            i = s + MAX_DIRECT
            self.encode(cum[i], freq[i], FREQ_BITS)
            return
        if a > MAX_SYMBOL:
            raise AlphabetError(f"symbol {s} outside representable range +-{MAX_SYMBOL}")
        self.encode(cum[ESCAPE], freq[ESCAPE], FREQ_BITS)
        self.encode(1 if s < 0 else 0, 1, 1)
        self.encode(a - MAX_DIRECT - 1, 1, ESCAPE_BITS)

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = 0xFFFFFFFF
        self.code = 0
        for _ in range(5):
            self.code = (self.code << 8) | self._byte()
        if self.code > 0xFFFFFFFF:
            raise DecodeError("corrupt stream: first byte must be zero")

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise DecodeError("truncated stream")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def _normalize(self):
        while self.range < TOP:
            self.code = ((self.code << 8) | self._byte()) & 0xFFFFFFFF
            self.range <<= 8

    def decode_uniform(self, total_bits: int) -> int:
        r = self.range >> total_bits
        v = self.code // r
        if v >> total_bits:
            raise DecodeError("corrupt stream: value outside model range")
        self.code -= r * v
        self.range = r
        self._normalize()
        return v

    def decode_symbol(self, freq: Sequence[int], cum: Sequence[int]) -> int:
        r = self.range >> FREQ_BITS
        target = self.code // r
        if target >= TOTAL:
            raise DecodeError("corrupt stream: value outside model range")
        i = bisect_right(cum, target) - 1
        self.code -= r * cum[i]
        self.range = r * freq[i]
        self._normalize()
        if i != ESCAPE:
            return i - MAX_DIRECT
        negative = self.decode_uniform(1)
        a = self.decode_uniform(ESCAPE_BITS) + MAX_DIRECT + 1
        return -a if negative else a

    def check_exhausted(self):
        if self.pos != len(self.data):
            raise DecodeError(f"{len(self.data) - self.pos} trailing bytes after last symbol")


# -- public operations -------------------------------------------------------

def estimate_scales(latents: Iterable, quality: float = 0.5) -> ScaleTable:
    """Fit a ScaleTable from a corpus of channelized latents.

    The step of channel ``c`` is ``quality`` times the coefficient standard
    deviation; the coded scale is the standard deviation of the resulting
    integer symbols. Both are floored at 1e-3.
    """
    arrays = [np.asarray(getattr(lat, "channels", lat), dtype=np.float64) for lat in latents]
    if not arrays:
        raise ValueError("estimate_scales needs a non-empty corpus")
    n_ch = arrays[0].shape[0]
    if any(a.shape[0] != n_ch for a in arrays):
        raise ValueError("latents disagree on channel count")
    coeffs = np.concatenate([a.reshape(n_ch, -1) for a in arrays], axis=1)
    steps = quality * np.maximum(coeffs.std(axis=1), SCALE_FLOOR)
    symbols = np.rint(coeffs / steps[:, None])
    scales = np.maximum(symbols.std(axis=1), SCALE_FLOOR)
    return ScaleTable(scales, steps)


def encode_symbols(symbols, channel_id: int, table: ScaleTable) -> Bitstream:
    freq, cum = model_tables(table.scales[channel_id])
    enc = RangeEncoder()
    seq = np.asarray(symbols, dtype=np.int64).ravel().tolist()
    for s in seq:
        enc.encode_symbol(s, freq, cum)
    return Bitstream(enc.finish(), len(seq))


def decode_symbols(stream: Bitstream, channel_id: int, table: ScaleTable) -> np.ndarray:
    freq, cum = model_tables(table.scales[channel_id])
    dec = RangeDecoder(stream.data)
    out = [dec.decode_symbol(freq, cum) for _ in range(stream.symbol_count)]
    dec.check_exhausted()
    return np.array(out, dtype=np.int64)


def encode_channels(planes: Sequence[np.ndarray], channel_ids: Sequence[int],
                    table: ScaleTable) -> Bitstream:
    """One stream carrying several channels back to back, each under its own model."""
    enc = RangeEncoder()
    count = 0
    for c, plane in zip(channel_ids, planes):
        freq, cum = model_tables(table.scales[c])
        seq = np.asarray(plane, dtype=np.int64).ravel().tolist()
        for s in seq:
            enc.encode_symbol(s, freq, cum)
        count += len(seq)
    return Bitstream(enc.finish(), count)


def decode_channels(stream: Bitstream, channel_ids: Sequence[int], per_channel: int,
                    table: ScaleTable) -> list[np.ndarray]:
    if stream.symbol_count != per_channel * len(channel_ids):
        raise DecodeError(
            f"stream holds {stream.symbol_count} symbols, expected "
            f"{per_channel} x {len(channel_ids)} channels")
    dec = RangeDecoder(stream.data)
    out = []
    for c in channel_ids:
        freq, cum = model_tables(table.scales[c])
        out.append(np.array([dec.decode_symbol(freq, cum) for _ in range(per_channel)],
                            dtype=np.int64))
    dec.check_exhausted()
    return out


def cross_entropy_bits(symbols, scale: float) -> float:
    """Ideal code length of ``symbols`` under the model pmf, escapes included.

    Infinite when a symbol has zero model probability.
    """
    pmf = laplacian_pmf(scale)
    s = np.asarray(symbols, dtype=np.int64).ravel()
    direct = np.abs(s) <= MAX_DIRECT
    n_esc = int((~direct).sum())
    p = pmf[s[direct] + MAX_DIRECT]
    if np.any(p <= 0) or (n_esc and pmf[ESCAPE] <= 0):
        return math.inf
    bits = -np.log2(p).sum()
    if n_esc:
        bits += n_esc * (-math.log2(pmf[ESCAPE]) + 1 + ESCAPE_BITS)
    return float(bits)
