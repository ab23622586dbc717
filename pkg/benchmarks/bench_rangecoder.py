"""Throughput of the compiled range coder against the pure-Python fallback.

    python benchmarks/bench_rangecoder.py [--symbols N] [--repeat R]
"""

import argparse
import statistics
import time

import numpy as np

from gscodec.coder import BACKENDS, quantize_cdf


def workload(n, seed=0, bound=64):
    """Latent-like source: Gaussian tables with varied means and scales, one per symbol."""
    rng = np.random.default_rng(seed)
    mean = rng.normal(0, 2, n)
    scale = np.exp(rng.uniform(np.log(0.2), np.log(8.0), n))
    cum = quantize_cdf(mean, scale, bound)
    sym = np.clip(np.rint(rng.normal(mean, scale)), -bound, bound).astype(np.int64) + bound
    sizes = np.full(n, cum.shape[1] - 1, dtype=np.int64)
    return sym, cum, sizes, np.arange(n, dtype=np.int64)


def bench(backend, sym, cum, sizes, idx, repeat):
    enc, dec = [], []
    for _ in range(repeat):
        t0 = time.perf_counter()
        data = backend.encode(sym, cum, sizes, idx)
        t1 = time.perf_counter()
        out = backend.decode(data, cum, sizes, idx, sym.size)
        t2 = time.perf_counter()
        enc.append(t1 - t0)
        dec.append(t2 - t1)
    assert list(out) == sym.tolist()
    return data, statistics.median(enc), statistics.median(dec)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--symbols", type=int, default=200_000)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args()
    sym, cum, sizes, idx = workload(args.symbols)
    print(f"{args.symbols} symbols, {cum.shape[1] - 1}-symbol alphabet, median of {args.repeat}")
    results = {}
    for name in sorted(BACKENDS):
        data, te, td = bench(BACKENDS[name], sym, cum, sizes, idx, args.repeat)
        results[name] = (data, te, td)
        print(f"{name:>8}: encode {te * 1e3:8.1f} ms ({args.symbols / te / 1e6:6.2f} Msym/s)  "
              f"decode {td * 1e3:8.1f} ms ({args.symbols / td / 1e6:6.2f} Msym/s)  {len(data)} bytes")
    if len(results) == 2:
        (a, ea, da), (b, eb, db) = results["cython"], results["python"]
        assert a == b, "backends disagree"
        print(f"speedup: encode {eb / ea:.1f}x, decode {db / da:.1f}x (byte-identical output)")
    else:
        print("compiled backend unavailable; only the fallback was measured")


if __name__ == "__main__":
    main()
