"""Adaptive run-length / Golomb-Rice (RLGR) coder after Malvar (DCC 2006).

Two backward-adapted parameters, both kept scaled by ``2**LSGR``:

* ``k``: run mode when k > 0; a ``0`` bit stands for a full run of ``2**k``
  zeros, a ``1`` bit is followed by the partial run length in k bits and the
  terminating nonzero value (sign bit + GR code of ``|x| - 1``).
* ``kr``: Golomb-Rice parameter for the values themselves.

In no-run mode (k == 0) each value is interleaved to non-negative and GR
coded directly.
"""

import struct

import numpy as np

from .rangecoder import DecodeError

LSGR = 3
KPMAX = 80
UP_GR = 4  # kp increase after a full zero run
DN_GR = 6  # kp decrease after a run ends in a nonzero value
UQ_GR = 3  # kp increase after a zero in no-run mode
DQ_GR = 3  # kp decrease after a nonzero in no-run mode
GR_ESCAPE = 32  # unary prefixes this long switch to a 6-bit length + raw value


class _BitWriter:
    def __init__(self):
        self.bits = []

    def write(self, value, nbits):
        for b in range(nbits - 1, -1, -1):
            self.bits.append((value >> b) & 1)

    def unary(self, count):
        # count ones then a zero
        self.bits.extend([1] * count)
        self.bits.append(0)

    def getvalue(self):
        if not self.bits:
            return b""
        return np.packbits(np.asarray(self.bits, dtype=np.uint8)).tobytes()


class _BitReader:
    def __init__(self, data):
        self.bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8)).tolist()
        self.pos = 0

    def read(self, nbits):
        if self.pos + nbits > len(self.bits):
            raise DecodeError("RLGR payload truncated")
        v = 0
        for _ in range(nbits):
            v = (v << 1) | self.bits[self.pos]
            self.pos += 1
        return v

    def unary_capped(self, cap):
        """Count ones up to a terminating zero, or stop after ``cap`` ones."""
        n = 0
        while n < cap:
            if self.pos >= len(self.bits):
                raise DecodeError("RLGR payload truncated")
            bit = self.bits[self.pos]
            self.pos += 1
            if bit == 0:
                return n
            n += 1
        return n


def _interleave(x):
    return 2 * x if x >= 0 else -2 * x - 1


def _deinterleave(u):
    return u >> 1 if u % 2 == 0 else -((u + 1) >> 1)


class _State:
    def __init__(self):
        self.kp = 1 << LSGR  # k = 1
        self.krp = 1 << LSGR  # kr = 1

    @property
    def k(self):
        return self.kp >> LSGR

    @property
    def kr(self):
        return self.krp >> LSGR

    def adapt_k(self, delta):
        self.kp = min(KPMAX, max(0, self.kp + delta))

    def adapt_kr(self, vk):
        if vk == 0:
            self.krp = max(0, self.krp - 2)
        elif vk > 1:
            self.krp = min(KPMAX, self.krp + vk)


def _gr_encode(w, st, value):
    kr = st.kr
    vk = value >> kr
    if vk < GR_ESCAPE:
        w.unary(vk)
        w.write(value & ((1 << kr) - 1), kr)
    else:
        w.bits.extend([1] * GR_ESCAPE)
        nbits = value.bit_length()
        w.write(nbits, 6)
        w.write(value, nbits)
    st.adapt_kr(vk)


def _gr_decode(r, st):
    kr = st.kr
    vk = r.unary_capped(GR_ESCAPE)
    if vk < GR_ESCAPE:
        value = (vk << kr) | r.read(kr)
    else:
        value = r.read(r.read(6))
        vk = value >> kr
    st.adapt_kr(vk)
    return value


def rlgr_encode(symbols) -> bytes:
    """Self-contained payload: u32 symbol count followed by the RLGR bits."""
    data = [int(s) for s in np.asarray(symbols, dtype=np.int64).ravel()]
    n = len(data)
    w = _BitWriter()
    st = _State()
    i = 0
    while i < n:
        if st.k:
            run = 0
            while i + run < n and data[i + run] == 0:
                run += 1
            i += run
            while run >= (1 << st.k):
                w.write(0, 1)
                run -= 1 << st.k
                st.adapt_k(UP_GR)
            w.write(1, 1)
            w.write(run, st.k)
            if i == n:
                break  # stream ended inside a run
            x = data[i]
            i += 1
            w.write(1 if x < 0 else 0, 1)
            _gr_encode(w, st, abs(x) - 1)
            st.adapt_k(-DN_GR)
        else:
            x = data[i]
            i += 1
            _gr_encode(w, st, _interleave(x))
            st.adapt_k(UQ_GR if x == 0 else -DQ_GR)
    return struct.pack("<I", n) + w.getvalue()


def rlgr_decode(payload: bytes) -> np.ndarray:
    if len(payload) < 4:
        raise DecodeError("RLGR payload truncated")
    (n,) = struct.unpack_from("<I", payload)
    r = _BitReader(payload[4:])
    st = _State()
    out = []
    while len(out) < n:
        if st.k:
            while r.read(1) == 0:
                out.extend([0] * (1 << st.k))
                st.adapt_k(UP_GR)
                if len(out) > n:
                    raise DecodeError("RLGR run overflows the symbol count")
            out.extend([0] * r.read(st.k))
            if len(out) > n:
                raise DecodeError("RLGR run overflows the symbol count")
            if len(out) == n:
                break
            negative = r.read(1)
            mag = _gr_decode(r, st) + 1
            out.append(-mag if negative else mag)
            st.adapt_k(-DN_GR)
        else:
            x = _deinterleave(_gr_decode(r, st))
            out.append(x)
            st.adapt_k(UQ_GR if x == 0 else -DQ_GR)
    return np.asarray(out, dtype=np.int64)
