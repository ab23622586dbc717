# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled range coder; bit-compatible with ``_rc_py``."""

from libc.stdint cimport int64_t, uint8_t, uint32_t, uint64_t

from .errors import RangeCoderError

NAME = "cython"

cdef enum:
    PRECISION = 16
    TOP = 16777216


cdef inline Py_ssize_t _shift_low(uint64_t* low, uint8_t* cache, uint64_t* cache_size,
                                  uint8_t* out, Py_ssize_t n) noexcept nogil:
    cdef uint8_t temp
    cdef uint8_t carry
    if <uint32_t>low[0] < <uint32_t>0xFF000000 or (low[0] >> 32) != 0:
        carry = <uint8_t>(low[0] >> 32)
        temp = cache[0]
        while True:
            out[n] = <uint8_t>(temp + carry)
            n += 1
            temp = 0xFF
            cache_size[0] -= 1
            if cache_size[0] == 0:
                break
        cache[0] = <uint8_t>((low[0] >> 24) & 0xFF)
    cache_size[0] += 1
    low[0] = (low[0] & 0x00FFFFFF) << 8
    return n


def encode(const int64_t[::1] symbols, const int64_t[:, ::1] cdf,
           const int64_t[::1] sizes, const int64_t[::1] index):
    cdef Py_ssize_t count = symbols.shape[0]
    cdef Py_ssize_t k, n = 0
    cdef int64_t s, t, lo, freq
    cdef uint64_t low = 0
    cdef uint64_t rng = 0xFFFFFFFF
    cdef uint64_t r
    cdef uint8_t cache = 0
    cdef uint64_t cache_size = 1
    # each symbol costs at most 3 renormalization bytes (range >= 2**8 after a step)
    cdef bytearray buf = bytearray(3 * count + 16)
    cdef uint8_t* out = buf

    if index.shape[0] < count:
        raise RangeCoderError(f"table index covers {index.shape[0]} symbols, {count} given")
    for k in range(count):
        t = index[k]
        s = symbols[k]
        if t < 0 or t >= sizes.shape[0]:
            raise RangeCoderError(f"table index {t} out of range", k)
        if s < 0 or s >= sizes[t]:
            raise RangeCoderError(f"symbol {s} outside alphabet of size {sizes[t]}", k)
        lo = cdf[t, s]
        freq = cdf[t, s + 1] - lo
        if freq <= 0:
            raise RangeCoderError(f"symbol {s} has zero frequency", k)
        r = rng >> PRECISION
        low += r * <uint64_t>lo
        rng = r * <uint64_t>freq
        while rng < TOP:
            rng <<= 8
            n = _shift_low(&low, &cache, &cache_size, out, n)
    for k in range(5):
        n = _shift_low(&low, &cache, &cache_size, out, n)
    return bytes(buf[:n])


def decode(const uint8_t[::1] data, const int64_t[:, ::1] cdf,
           const int64_t[::1] sizes, const int64_t[::1] index, Py_ssize_t count):
    cdef Py_ssize_t n = data.shape[0]
    cdef Py_ssize_t pos, k
    cdef uint64_t code = 0
    cdef uint64_t rng = 0xFFFFFFFF
    cdef uint64_t r, v
    cdef int64_t t, lo_i, hi_i, mid, s
    import numpy as np
    out_arr = np.empty(count, dtype=np.int64)
    cdef int64_t[::1] out = out_arr

    if index.shape[0] < count:
        raise RangeCoderError(f"table index covers {index.shape[0]} symbols, {count} requested")
    if n < 5:
        raise RangeCoderError(f"stream truncated: need at least 5 bytes, got {n}", n)
    if data[0] != 0:
        raise RangeCoderError("stream does not start with a zero byte", 0)
    for pos in range(1, 5):
        code = (code << 8) | data[pos]
    pos = 5

    for k in range(count):
        t = index[k]
        if t < 0 or t >= sizes.shape[0]:
            raise RangeCoderError(f"table index {t} out of range", pos)
        r = rng >> PRECISION
        v = code // r
        if v >= (1 << PRECISION):
            raise RangeCoderError(f"code value out of range at symbol {k}", pos)
        lo_i = 0
        hi_i = sizes[t]
        while hi_i - lo_i > 1:
            mid = (lo_i + hi_i) >> 1
            if <uint64_t>cdf[t, mid] <= v:
                lo_i = mid
            else:
                hi_i = mid
        s = lo_i
        code -= r * <uint64_t>cdf[t, s]
        rng = r * <uint64_t>(cdf[t, s + 1] - cdf[t, s])
        while rng < TOP:
            if pos >= n:
                raise RangeCoderError(f"stream truncated at byte {pos} while decoding symbol {k}", pos)
            code = ((code << 8) | data[pos]) & 0xFFFFFFFF
            pos += 1
            rng <<= 8
        out[k] = s
    if pos != n:
        raise RangeCoderError(f"{n - pos} trailing bytes after {count} symbols", pos)
    return out_arr
