"""32-bit range coder with 16-bit symbol frequencies (carry-propagating, LZMA style)."""

from bisect import bisect_right

import numpy as np

from .cdf import PRECISION, TOTAL

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
_HALF = TOTAL >> 1


class DecodeError(ValueError):
    """Corrupt or truncated payload."""


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()

    def encode(self, start: int, freq: int):
        if freq <= 0:
            raise ValueError("symbol has zero frequency; models must reserve at least 1")
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_symbol(self, symbol: int, cdf):
        self.encode(cdf[symbol], cdf[symbol + 1] - cdf[symbol])

    def encode_bit(self, bit: int):
        self.encode(_HALF if bit else 0, _HALF)

    def encode_expgolomb(self, value: int):
        """Order-0 Exp-Golomb with equiprobable bits, for escape suffixes."""
        if value < 0:
            raise ValueError("Exp-Golomb value must be non-negative")
        v = value + 1
        n = v.bit_length() - 1
        for _ in range(n):
            self.encode_bit(0)
        self.encode_bit(1)
        for b in range(n - 1, -1, -1):
            self.encode_bit((v >> b) & 1)

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            temp = self._cache
            while True:
                self._out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self._cache_size -= 1
                if self._cache_size == 0:
                    break
            self._cache = (self.low >> 24) & 0xFF
        self._cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        # the leading byte is always zero since the coded value stays below 1
        assert self._out[0] == 0
        return bytes(self._out[1:])


class RangeDecoder:
    def __init__(self, payload: bytes):
        self._data = bytes(payload)
        self._pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        if self._pos >= len(self._data):
            raise DecodeError("payload truncated")
        b = self._data[self._pos]
        self._pos += 1
        return b

    def decode_symbol(self, cdf) -> int:
        r = self.range >> PRECISION
        value = self.code // r
        if value >= cdf[-1]:
            raise DecodeError("code value outside the model's range")
        s = bisect_right(cdf, value) - 1
        # skip zero-width entries produced by repeated CDF values
        while cdf[s + 1] == cdf[s]:
            s += 1
        self.code -= r * cdf[s]
        self.range = r * (cdf[s + 1] - cdf[s])
        self._normalize()
        return s

    def decode_bit(self) -> int:
        r = self.range >> PRECISION
        bit = 1 if self.code // r >= _HALF else 0
        if self.code // r >= TOTAL:
            raise DecodeError("code value outside the model's range")
        self.code -= r * (_HALF if bit else 0)
        self.range = r * _HALF
        self._normalize()
        return bit

    def decode_expgolomb(self) -> int:
        n = 0
        while self.decode_bit() == 0:
            n += 1
            if n > 62:
                raise DecodeError("runaway Exp-Golomb prefix")
        v = 1
        for _ in range(n):
            v = (v << 1) | self.decode_bit()
        return v - 1

    def _normalize(self):
        while self.range < _TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._next()) & _MASK32

    def finish(self):
        if self._pos != len(self._data):
            raise DecodeError(f"{len(self._data) - self._pos} trailing bytes after the last symbol")


def _rows(cdfs, n):
    cdfs = np.asarray(cdfs, dtype=np.int64)
    if cdfs.ndim == 1:
        row = cdfs.tolist()
        return [row] * n
    if len(cdfs) != n:
        raise ValueError(f"{n} symbols but {len(cdfs)} CDFs")
    return cdfs.tolist()


def range_encode(symbols, cdfs) -> bytes:
    """Encode ``symbols`` (indices into each CDF row) to bytes."""
    symbols = [int(s) for s in np.asarray(symbols, dtype=np.int64).ravel()]
    rows = _rows(cdfs, len(symbols))
    enc = RangeEncoder()
    for s, cdf in zip(symbols, rows):
        if not 0 <= s < len(cdf) - 1:
            raise ValueError(f"symbol {s} outside alphabet of size {len(cdf) - 1}")
        enc.encode_symbol(s, cdf)
    return enc.finish()


def range_decode(payload: bytes, cdfs, count: int | None = None) -> np.ndarray:
    cdfs = np.asarray(cdfs, dtype=np.int64)
    if count is None:
        if cdfs.ndim == 1:
            raise ValueError("count is required with a shared CDF")
        count = len(cdfs)
    rows = _rows(cdfs, count)
    dec = RangeDecoder(payload)
    out = [dec.decode_symbol(cdf) for cdf in rows]
    dec.finish()
    return np.asarray(out, dtype=np.int64)
