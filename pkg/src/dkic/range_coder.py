"""Integer range coder, CDF tables and the ``.dkic`` container format.

The coder is a carry-propagating byte-oriented range coder (32-bit range,
33-bit low register) driven by integer CDF tables with ``precision_bits``
of probability resolution. Termination writes the shortest byte suffix that
still identifies the final interval; the decoder reads zeros past the end
of the buffer, up to four bytes.
"""

from __future__ import annotations

import math
import struct
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

__all__ = [
    "MAGIC",
    "VERSION",
    "Bitstream",
    "BitstreamError",
    "CdfTable",
    "RangeDecoder",
    "RangeEncoder",
    "decode_symbols",
    "decode_with_escape",
    "encode_symbols",
    "encode_with_escape",
    "gaussian_cdf_table",
    "gaussian_cdf_tables",
    "pack_bitstream",
    "table_from_pmf",
    "unpack_bitstream",
]

SIGMA_MIN = 0.11
TAIL_MASS = 1e-9

_TOP = 1 << 24
_MASK32 = (1 << 32) - 1

MAGIC = b"DKIC"
VERSION = 1


class BitstreamError(ValueError):
    """Malformed, truncated or corrupted coded data."""


@dataclass(frozen=True)
class CdfTable:
    offset: int
    cumulative: tuple[int, ...]
    precision_bits: int = 16

    def __post_init__(self):
        cum = self.cumulative
        if len(cum) < 2 or cum[0] != 0 or cum[-1] != 1 << self.precision_bits:
            raise ValueError("cumulative table must run from 0 to 2**precision_bits")
        if any(b <= a for a, b in zip(cum, cum[1:])):
            raise ValueError("cumulative table must be strictly increasing")

    @property
    def num_symbols(self) -> int:
        return len(self.cumulative) - 1

    @property
    def support(self) -> tuple[int, int]:
        return self.offset, self.offset + self.num_symbols - 1

    def count(self, symbol: int) -> int:
        i = symbol - self.offset
        return self.cumulative[i + 1] - self.cumulative[i]

    def probability(self, symbol: int) -> float:
        return self.count(symbol) / (1 << self.precision_bits)


def table_from_pmf(pmf, offset: int, precision_bits: int = 16) -> CdfTable:
    """Quantise a probability vector to integer counts summing to ``2**precision_bits``.

    Every bin receives at least one count. Bins below one count are set to
    exactly one and the remaining budget is split over the others; any
    rounding surplus or deficit is absorbed by the largest bin.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    total = 1 << precision_bits
    if pmf.ndim != 1 or pmf.size == 0 or not np.all(np.isfinite(pmf)) or np.any(pmf < 0):
        raise ValueError("pmf must be a finite nonnegative vector")
    if pmf.size > total // 2:
        raise ValueError("support too wide for the table precision")
    mass = pmf.sum()
    if mass <= 0:
        raise ValueError("pmf has no mass")
    # bins that would round below one count get exactly one; the rest share
    # what is left so the floor does not drain the mode
    tiny = pmf / mass * total < 1
    rest = pmf[~tiny].sum()
    budget = total - int(tiny.sum())
    counts = np.ones(pmf.size, dtype=np.int64)
    if rest > 0:
        counts[~tiny] = np.maximum(np.rint(pmf[~tiny] / rest * budget).astype(np.int64), 1)
    counts[int(np.argmax(counts))] += total - int(counts.sum())
    if counts.min() < 1:
        raise ValueError("cannot quantise pmf with minimum bin width 1")
    cum = np.concatenate([[0], np.cumsum(counts)])
    return CdfTable(int(offset), tuple(int(c) for c in cum), precision_bits)


def _gaussian_support(mu: float, sigma: float, tail_mass: float) -> tuple[int, int]:
    radius = -ndtri(tail_mass) * sigma
    return math.floor(mu - radius), math.ceil(mu + radius)


def gaussian_cdf_table(
    mu: float, sigma: float, precision_bits: int = 16, tail_mass: float = TAIL_MASS
) -> CdfTable:
    """Table for integer symbols ``v`` with mass ``Phi((v-mu+1/2)/sigma) - Phi((v-mu-1/2)/sigma)``."""
    mu = float(mu)
    sigma = float(sigma)
    if not (math.isfinite(mu) and math.isfinite(sigma)):
        raise ValueError("non-finite Gaussian parameters")
    if sigma < SIGMA_MIN * (1 - 1e-6):
        raise ValueError(f"sigma {sigma} is below the clamp {SIGMA_MIN}")
    lo, hi = _gaussian_support(mu, sigma, tail_mass)
    v = np.arange(lo, hi + 1, dtype=np.float64) - mu
    pmf = ndtr((v + 0.5) / sigma) - ndtr((v - 0.5) / sigma)
    return table_from_pmf(pmf, lo, precision_bits)


def gaussian_cdf_tables(mu, sigma, precision_bits: int = 16) -> list[CdfTable]:
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), np.shape(sigma)).ravel()
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    cache: dict[tuple[float, float], CdfTable] = {}
    tables = []
    for m, s in zip(mu.tolist(), sigma.tolist()):
        key = (m, s)
        table = cache.get(key)
        if table is None:
            table = cache[key] = gaussian_cdf_table(m, s, precision_bits)
        tables.append(table)
    return tables


class RangeEncoder:
    def __init__(self, precision_bits: int = 16):
        self.precision_bits = precision_bits
        self.low = 0
        self.range = _MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            temp = self._cache
            while True:
                self._out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self._cache_size -= 1
                if not self._cache_size:
                    break
            self._cache = (self.low >> 24) & 0xFF
        self._cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def encode(self, start: int, size: int) -> None:
        r = self.range >> self.precision_bits
        self.low += r * start
        self.range = r * size
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_symbol(self, symbol: int, table: CdfTable) -> None:
        i = symbol - table.offset
        if not 0 <= i < table.num_symbols:
            raise ValueError("symbol outside table support")
        cum = table.cumulative
        self.encode(cum[i], cum[i + 1] - cum[i])

    def finish(self) -> bytes:
        # shortest suffix: the value in [low, low + range) with most zero low bytes
        for keep in range(5):
            step = 1 << (32 - 8 * keep)
            value = -(-self.low // step) * step
            if value < self.low + self.range:
                break
        self.low = value
        for _ in range(5):
            self._shift_low()
        data = bytes(self._out)
        assert data[0] == 0
        return data[1 : len(data) - (4 - keep)]


class RangeDecoder:
    def __init__(self, data: bytes, precision_bits: int = 16):
        self.data = bytes(data)
        self.precision_bits = precision_bits
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        pos = self.pos
        self.pos += 1
        if pos < len(self.data):
            return self.data[pos]
        if pos >= len(self.data) + 4:
            raise BitstreamError("bitstream underrun")
        return 0

    def decode_symbol(self, table: CdfTable) -> int:
        if table.precision_bits != self.precision_bits:
            raise ValueError("table precision does not match the decoder")
        cum = table.cumulative
        r = self.range >> self.precision_bits
        target = min(self.code // r, cum[-1] - 1)
        i = bisect_right(cum, target) - 1
        self.code -= r * cum[i]
        self.range = r * (cum[i + 1] - cum[i])
        while self.range < _TOP:
            self.range <<= 8
            self.code = (self.code << 8) | self._next_byte()
        return table.offset + i


def _precision(tables: Sequence[CdfTable]) -> int:
    bits = {t.precision_bits for t in tables}
    if len(bits) > 1:
        raise ValueError("all tables of one stream must share a precision")
    return bits.pop() if bits else 16


def encode_symbols(symbols: Iterable[int], tables: Sequence[CdfTable]) -> bytes:
    symbols = [int(s) for s in symbols]
    if len(symbols) != len(tables):
        raise ValueError("one table per symbol is required")
    enc = RangeEncoder(_precision(tables))
    for s, t in zip(symbols, tables):
        enc.encode_symbol(s, t)
    return enc.finish()


_ESCAPE_MAX_PREFIX = 40


def _bit_table(precision_bits: int) -> CdfTable:
    half = 1 << (precision_bits - 1)
    return CdfTable(0, (0, half, 2 * half), precision_bits)


def _escape_excess(symbol: int, table: CdfTable) -> tuple[int, int | None]:
    """Split a symbol into the coded in-support value and the excess past the edge."""
    lo, hi = table.support
    if lo <= symbol <= hi and lo != hi:
        return symbol, None if lo < symbol < hi else 0
    if lo == hi:
        d = symbol - lo  # single-bin table: the excess is signed, zigzag mapped
        return lo, 2 * d if d >= 0 else -2 * d - 1
    return (lo, lo - symbol) if symbol < lo else (hi, symbol - hi)


def encode_with_escape(symbols: Iterable[int], tables: Sequence[CdfTable]) -> bytes:
    """Like :func:`encode_symbols` but lossless for symbols past the table support.

    A symbol on or beyond an edge bin is coded as that edge bin followed by
    the distance past the edge as an order-0 Exp-Golomb code, one
    equiprobable binary decision per bit. The edge bins only carry the
    quantised tail mass, so in-support streams pay next to nothing for this.
    """
    symbols = [int(s) for s in symbols]
    if len(symbols) != len(tables):
        raise ValueError("one table per symbol is required")
    bits = _precision(tables)
    enc = RangeEncoder(bits)
    bit = _bit_table(bits)
    for s, t in zip(symbols, tables):
        coded, excess = _escape_excess(s, t)
        enc.encode_symbol(coded, t)
        if excess is not None:
            m = excess + 1
            n = m.bit_length() - 1
            for _ in range(n):
                enc.encode_symbol(0, bit)
            for k in range(n, -1, -1):
                enc.encode_symbol((m >> k) & 1, bit)
    return enc.finish()


def decode_with_escape(data: bytes, tables: Sequence[CdfTable], verify: bool = True) -> list[int]:
    """Inverse of :func:`encode_with_escape`, with the same verification as :func:`decode_symbols`."""
    bits = _precision(tables)
    dec = RangeDecoder(data, bits)
    bit = _bit_table(bits)
    symbols = []
    for t in tables:
        s = dec.decode_symbol(t)
        lo, hi = t.support
        if s == lo or s == hi:
            n = 0
            while dec.decode_symbol(bit) == 0:
                n += 1
                if n > _ESCAPE_MAX_PREFIX:
                    raise BitstreamError("bitstream corrupted")
            m = 1
            for _ in range(n):
                m = (m << 1) | dec.decode_symbol(bit)
            excess = m - 1
            if lo == hi:
                s = lo + (excess // 2 if excess % 2 == 0 else -(excess + 1) // 2)
            else:
                s = lo - excess if s == lo else hi + excess
        symbols.append(s)
    if verify:
        again = encode_with_escape(symbols, tables)
        if again != bytes(data):
            if len(again) > len(data) and again.startswith(bytes(data)):
                raise BitstreamError("bitstream underrun")
            raise BitstreamError("bitstream corrupted")
    return symbols


def decode_symbols(data: bytes, tables: Sequence[CdfTable], verify: bool = True) -> list[int]:
    """Decode one symbol per table.

    With ``verify`` the symbols are re-encoded and compared with ``data``, so
    any altered stream either fails here or decodes to different symbols.
    """
    dec = RangeDecoder(data, _precision(tables))
    symbols = [dec.decode_symbol(t) for t in tables]
    if verify:
        again = encode_symbols(symbols, tables)
        if again != bytes(data):
            if len(again) > len(data) and again.startswith(bytes(data)):
                raise BitstreamError("bitstream underrun")
            raise BitstreamError("bitstream corrupted")
    return symbols


@dataclass
class Bitstream:
    width: int
    height: int
    lambda_index: int
    group_sizes: list[int]
    stage_counts: list[int]
    z_stream: bytes = b""
    y_streams: list[bytes] = field(default_factory=list)
    version: int = VERSION

    @property
    def header_bytes(self) -> int:
        n = len(self.group_sizes)
        return 4 + 1 + 2 + 2 + 1 + 1 + 2 * n + n + 4

    @property
    def payload_bytes(self) -> int:
        return len(self.z_stream) + sum(len(s) for s in self.y_streams)

    def __len__(self) -> int:
        return self.header_bytes + 4 * len(self.y_streams) + self.payload_bytes


def pack_bitstream(b: Bitstream) -> bytes:
    """Serialise a :class:`Bitstream`; all integers little-endian.

    Layout: magic ``DKIC``, version u8, width u16, height u16, lambda index u8,
    N u8, N x u16 group sizes, N x u8 stage counts, u32 z length, z bytes, then
    per AR step a u32 length followed by its bytes.
    """
    n = len(b.group_sizes)
    if n != len(b.stage_counts) or not 0 < n < 256:
        raise ValueError("invalid schedule in header")
    if len(b.y_streams) != sum(b.stage_counts):
        raise ValueError("one y substream per AR step is required")
    if not (0 < b.width < 1 << 16 and 0 < b.height < 1 << 16):
        raise ValueError("image dimensions out of range")
    if not 0 <= b.lambda_index < 256 or not 0 <= b.version < 256:
        raise ValueError("lambda index or version out of range")
    parts = [
        MAGIC,
        struct.pack("<BHHBB", b.version, b.width, b.height, b.lambda_index, n),
        struct.pack(f"<{n}H", *b.group_sizes),
        struct.pack(f"<{n}B", *b.stage_counts),
        struct.pack("<I", len(b.z_stream)),
        bytes(b.z_stream),
    ]
    for s in b.y_streams:
        parts.append(struct.pack("<I", len(s)))
        parts.append(bytes(s))
    return b"".join(parts)


def unpack_bitstream(data: bytes) -> Bitstream:
    data = bytes(data)
    pos = 0

    def take(count: int) -> bytes:
        nonlocal pos
        if pos + count > len(data):
            raise BitstreamError("length overrun")
        chunk = data[pos : pos + count]
        pos += count
        return chunk

    if take(4) != MAGIC:
        raise BitstreamError("bad magic")
    version, width, height, lambda_index, n = struct.unpack("<BHHBB", take(7))
    if version != VERSION:
        raise BitstreamError(f"unsupported version {version}")
    group_sizes = list(struct.unpack(f"<{n}H", take(2 * n)))
    stage_counts = list(struct.unpack(f"<{n}B", take(n)))
    (z_len,) = struct.unpack("<I", take(4))
    z_stream = take(z_len)
    y_streams = []
    for _ in range(sum(stage_counts)):
        (length,) = struct.unpack("<I", take(4))
        y_streams.append(take(length))
    if pos != len(data):
        raise BitstreamError("trailing bytes after the last substream")
    return Bitstream(width, height, lambda_index, group_sizes, stage_counts, z_stream, y_streams, version)
