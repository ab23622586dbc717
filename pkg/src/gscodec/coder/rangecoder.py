"""Range coding front end: CDF tables, quantization, backend selection.

The compiled backend (``_rc_ext``) is used when it imports; setting
``GSCODEC_PURE_PYTHON=1`` forces the bit-compatible Python twin.
"""

import os
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import _rc_py
from .errors import RangeCoderError

PRECISION = 16
TOTAL = 1 << PRECISION


def _load_backends():
    found = {"python": _rc_py}
    try:
        from . import _rc_ext
    except ImportError:
        pass
    else:
        found["cython"] = _rc_ext
    return found


BACKENDS = _load_backends()
if os.environ.get("GSCODEC_PURE_PYTHON") or "cython" not in BACKENDS:
    backend = BACKENDS["python"]
else:
    backend = BACKENDS["cython"]


@dataclass(frozen=True)
class CdfTable:
    """Cumulative counts ``cum[0..A]`` with ``cum[0] == 0`` and ``cum[A] == 2**16``."""

    cum: np.ndarray

    def __post_init__(self):
        cum = np.asarray(self.cum, dtype=np.int64)
        if cum.ndim != 1 or cum.size < 2:
            raise ValueError("CDF table needs at least one symbol")
        if cum[0] != 0 or cum[-1] != TOTAL:
            raise ValueError(f"CDF table must run from 0 to {TOTAL}, got {cum[0]}..{cum[-1]}")
        if np.any(np.diff(cum) < 1):
            raise ValueError("CDF table must be strictly increasing")
        object.__setattr__(self, "cum", cum)

    @property
    def size(self):
        return self.cum.size - 1

    @property
    def counts(self):
        return np.diff(self.cum)

    @classmethod
    def from_pmf(cls, pmf):
        return cls(quantize_pmf(np.asarray(pmf, dtype=np.float64)))


def quantize_pmf(pmf):
    """Turn probability rows ``(..., A)`` into cumulative 16-bit count tables.

    Every symbol receives one count, the remaining ``2**16 - A`` counts are
    handed out by flooring ``p * (2**16 - A)``, and whatever the flooring
    leaves over goes to the most probable symbol (first one on ties).
    """
    pmf = np.clip(np.asarray(pmf, dtype=np.float64), 0.0, None)
    size = pmf.shape[-1]
    spare = TOTAL - size
    if spare < 0:
        raise ValueError(f"alphabet of {size} symbols exceeds {TOTAL} counts")
    pmf = pmf / pmf.sum(axis=-1, keepdims=True)
    counts = 1 + np.floor(pmf * spare).astype(np.int64)
    deficit = TOTAL - counts.sum(axis=-1)
    top = np.argmax(pmf, axis=-1)
    np.put_along_axis(counts, top[..., None],
                      np.take_along_axis(counts, top[..., None], -1) + deficit[..., None], -1)
    cum = np.zeros(pmf.shape[:-1] + (size + 1,), dtype=np.int64)
    np.cumsum(counts, axis=-1, out=cum[..., 1:])
    return cum


def gaussian_pmf(mean, scale, bound):
    """Discretized Gaussian over the integers ``[-bound, bound]``, tails folded in."""
    mean = np.asarray(mean, dtype=np.float64)[..., None]
    scale = np.asarray(scale, dtype=np.float64)[..., None]
    edges = np.arange(-bound, bound, dtype=np.float64) + 0.5
    upper = ndtr((edges - mean) / scale)
    cdf = np.concatenate([np.zeros_like(upper[..., :1]), upper, np.ones_like(upper[..., :1])], axis=-1)
    return np.diff(cdf, axis=-1)


TAIL_SIGMAS = 8.0


def quantize_cdf(mean, scale, bound):
    """CDF tables (``(..., 2*bound + 2)`` int64) for discretized Gaussians.

    Same tables as ``quantize_pmf(gaussian_pmf(...))``, built faster: a symbol
    whose mass is below one spare count only ever receives its guaranteed single
    count, so the Gaussian is evaluated on a window of ``TAIL_SIGMAS`` scales
    around each mean and every symbol outside it gets exactly one count.
    """
    mean = np.asarray(mean, dtype=np.float64)
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), mean.shape)
    shape, mean, scale = mean.shape, mean.reshape(-1), scale.reshape(-1)
    size = 2 * bound + 1
    spare = TOTAL - size
    reach = TAIL_SIGMAS * scale + 1.0
    lo = np.clip(np.floor(mean - reach), -bound, bound).astype(np.int64)
    hi = np.clip(np.ceil(mean + reach), -bound, bound).astype(np.int64)
    width = int((hi - lo).max(initial=0)) + 1
    start = np.minimum(lo, bound - width + 1)
    sym = start[:, None] + np.arange(width)
    upper = ndtr((sym + 0.5 - mean[:, None]) / scale[:, None])
    lower = ndtr((sym - 0.5 - mean[:, None]) / scale[:, None])
    upper[sym == bound] = 1.0
    lower[sym == -bound] = 0.0
    pmf = np.clip(upper - lower, 0.0, None)
    counts = np.ones((mean.size, size), dtype=np.int64)
    win = 1 + np.floor(pmf * spare).astype(np.int64)
    top = np.argmax(pmf, axis=-1)
    rows = np.arange(mean.size)
    col = sym + bound
    counts[rows[:, None], col] = win
    counts[rows, col[rows, top]] += TOTAL - counts.sum(axis=-1)
    cum = np.zeros((mean.size, size + 1), dtype=np.int64)
    np.cumsum(counts, axis=-1, out=cum[:, 1:])
    return cum.reshape(shape + (size + 1,))


def _stack(tables, sizes=None):
    if isinstance(tables, CdfTable):
        tables = [tables]
    if isinstance(tables, np.ndarray):
        cdf = np.ascontiguousarray(tables.reshape(-1, tables.shape[-1]), dtype=np.int64)
        if sizes is None:
            sizes = np.full(cdf.shape[0], cdf.shape[1] - 1, dtype=np.int64)
        return cdf, np.ascontiguousarray(sizes, dtype=np.int64)
    tables = [t if isinstance(t, CdfTable) else CdfTable(t) for t in tables]
    width = max(t.cum.size for t in tables)
    cdf = np.full((len(tables), width), TOTAL, dtype=np.int64)
    for i, t in enumerate(tables):
        cdf[i, : t.cum.size] = t.cum
    return cdf, np.array([t.size for t in tables], dtype=np.int64)


def _index(index, n_tables, count):
    if index is None:
        if n_tables == 1:
            return np.zeros(count, dtype=np.int64)
        if n_tables == count:
            return np.arange(count, dtype=np.int64)
        raise ValueError(f"{n_tables} tables for {count} symbols needs an explicit index")
    return np.ascontiguousarray(np.asarray(index).reshape(-1), dtype=np.int64)


def rc_encode(symbols, tables, index=None, sizes=None):
    """Range-code ``symbols`` (alphabet indices, not signed values).

    ``tables`` is a :class:`CdfTable`, a list of them, or a ``(T, A+1)``
    array of cumulative counts. With one table it is shared; with one table
    per symbol they pair up in order; otherwise ``index`` picks the table.
    """
    symbols = np.ascontiguousarray(np.asarray(symbols).reshape(-1), dtype=np.int64)
    cdf, sizes = _stack(tables, sizes)
    return backend.encode(symbols, cdf, sizes, _index(index, cdf.shape[0], symbols.size))


def rc_decode(data, tables, count, index=None, sizes=None):
    """Decode exactly ``count`` symbols; raises :class:`RangeCoderError` on corruption."""
    cdf, sizes = _stack(tables, sizes)
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    out = backend.decode(buf, cdf, sizes, _index(index, cdf.shape[0], count), int(count))
    return np.asarray(out, dtype=np.int64)


def ideal_bits(symbols, tables, index=None, sizes=None):
    """Shannon code length of ``symbols`` under the quantized tables, in bits."""
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    cdf, sizes = _stack(tables, sizes)
    idx = _index(index, cdf.shape[0], symbols.size)
    freq = cdf[idx, symbols + 1] - cdf[idx, symbols]
    return float(np.sum(PRECISION - np.log2(freq)))


__all__ = [
    "BACKENDS", "CdfTable", "PRECISION", "RangeCoderError", "TOTAL", "backend",
    "gaussian_pmf", "ideal_bits", "quantize_cdf", "quantize_pmf", "rc_decode", "rc_encode",
]
