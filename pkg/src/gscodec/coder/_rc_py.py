"""Pure-Python range coder, bit-compatible with ``_rc_ext``.

Carry-propagating range coder: 64-bit ``low`` (33 significant bits),
32-bit ``range``, 16-bit cumulative frequencies, byte-wise renormalization
whenever ``range`` drops below 2**24. The encoder always emits exactly
``renormalizations + 5`` bytes and the decoder reads exactly as many.
"""

from .errors import RangeCoderError

NAME = "python"

PRECISION = 16
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


def _as_lists(*arrays):
    return [a.tolist() if hasattr(a, "tolist") else list(a) for a in arrays]


def encode(symbols, cdf, sizes, index):
    """Encode ``symbols[k]`` with cumulative table ``cdf[index[k]]``.

    ``cdf`` is a 2-D integer array, one row per table, row ``t`` holding
    ``sizes[t] + 1`` valid cumulative counts ending in ``2**16``.
    """
    symbols, index, rows, sizes = _as_lists(symbols, index, cdf, sizes)

    low = 0
    rng = _MASK32
    cache = 0
    cache_size = 1
    out = bytearray()

    for k, s in enumerate(symbols):
        t = index[k]
        if s < 0 or s >= sizes[t]:
            raise RangeCoderError(f"symbol {s} outside alphabet of size {sizes[t]}", k)
        row = rows[t]
        lo = row[s]
        freq = row[s + 1] - lo
        if freq <= 0:
            raise RangeCoderError(f"symbol {s} has zero frequency", k)
        r = rng >> PRECISION
        low += r * lo
        rng = r * freq
        while rng < _TOP:
            rng <<= 8
            if (low & _MASK32) < 0xFF000000 or (low >> 32):
                carry = low >> 32
                temp = cache
                while True:
                    out.append((temp + carry) & 0xFF)
                    temp = 0xFF
                    cache_size -= 1
                    if not cache_size:
                        break
                cache = (low >> 24) & 0xFF
            cache_size += 1
            low = (low & 0x00FFFFFF) << 8

    for _ in range(5):
        if (low & _MASK32) < 0xFF000000 or (low >> 32):
            carry = low >> 32
            temp = cache
            while True:
                out.append((temp + carry) & 0xFF)
                temp = 0xFF
                cache_size -= 1
                if not cache_size:
                    break
            cache = (low >> 24) & 0xFF
        cache_size += 1
        low = (low & 0x00FFFFFF) << 8
    return bytes(out)


def decode(data, cdf, sizes, index, count):
    """Inverse of :func:`encode`; ``index`` must cover ``count`` symbols."""
    data = bytes(data)
    n = len(data)
    _, index, rows, sizes = _as_lists((), index, cdf, sizes)
    if count > len(index):
        raise RangeCoderError(f"table index covers {len(index)} symbols, {count} requested")
    if n < 5:
        raise RangeCoderError(f"stream truncated: need at least 5 bytes, got {n}", n)
    if data[0] != 0:
        raise RangeCoderError("stream does not start with a zero byte", 0)

    code = 0
    for i in range(1, 5):
        code = (code << 8) | data[i]
    pos = 5
    rng = _MASK32
    total = 1 << PRECISION
    out = [0] * count

    for k in range(count):
        row = rows[index[k]]
        size = sizes[index[k]]
        r = rng >> PRECISION
        v = code // r
        if v >= total:
            raise RangeCoderError(f"code value out of range at symbol {k}", pos)
        lo_i, hi_i = 0, size
        while hi_i - lo_i > 1:
            mid = (lo_i + hi_i) >> 1
            if row[mid] <= v:
                lo_i = mid
            else:
                hi_i = mid
        s = lo_i
        code -= r * row[s]
        rng = r * (row[s + 1] - row[s])
        while rng < _TOP:
            if pos >= n:
                raise RangeCoderError(f"stream truncated at byte {pos} while decoding symbol {k}", pos)
            code = ((code << 8) | data[pos]) & _MASK32
            pos += 1
            rng <<= 8
        out[k] = s
    if pos != n:
        raise RangeCoderError(f"{n - pos} trailing bytes after {count} symbols", pos)
    return out
