"""Timing comparison of the two Hamming-distance backends.

Runs the same query-vs-database distance matrix through the compiled
kernel and the pure-numpy fallback, checks they agree, and prints a
small table.  The numpy path is selected by reimporting the kernels
module with TSHASH_NUMBA=0, which is the same switch users have.

Usage:
    python3 benchmarks/bench_hamming.py [--bits 64] [--db 20000]
            [--queries 200] [--repeats 5]
"""

import argparse
import importlib
import os
import statistics
import sys
import time

import numpy as np


def load_backends():
    """Return (numba_fn or None, numpy_fn) hamming_matrix callables."""
    os.environ["TSHASH_NUMBA"] = "0"
    import tshash.kernels as kernels

    kernels = importlib.reload(kernels)
    numpy_fn = kernels.hamming_matrix
    assert not kernels.USING_NUMBA

    os.environ["TSHASH_NUMBA"] = "1"
    kernels = importlib.reload(kernels)
    numba_fn = kernels.hamming_matrix if kernels.USING_NUMBA else None
    return numba_fn, numpy_fn


def bench(fn, queries, database, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn(queries, database)
        times.append(time.perf_counter() - t0)
    return out, times


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bits", type=int, default=64)
    ap.add_argument("--db", type=int, default=20000, help="database size")
    ap.add_argument("--queries", type=int, default=200)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    numba_fn, numpy_fn = load_backends()
    from tshash.retrieval import pack_codes

    rng = np.random.default_rng(args.seed)
    q = pack_codes(rng.choice((-1, 1), size=(args.queries, args.bits)).astype(np.int8))
    db = pack_codes(rng.choice((-1, 1), size=(args.db, args.bits)).astype(np.int8))
    pairs = args.queries * args.db

    print(
        "hamming_matrix: %d queries x %d database codes, %d bits (%d words)"
        % (args.queries, args.db, args.bits, q.shape[1])
    )

    ref, numpy_times = bench(numpy_fn, q, db, args.repeats)
    rows = [("numpy", numpy_times)]

    if numba_fn is None:
        print("numba backend unavailable; timing the numpy path only")
    else:
        numba_fn(q[:2], db[:2])  # compile outside the timed region
        out, numba_times = bench(numba_fn, q, db, args.repeats)
        if not np.array_equal(out, ref):
            print("BACKENDS DISAGREE", file=sys.stderr)
            return 1
        rows.append(("numba", numba_times))

    print("%-8s %12s %12s %16s" % ("backend", "best (ms)", "median (ms)", "pairs/s (best)"))
    best = {}
    for name, times in rows:
        best[name] = min(times)
        print(
            "%-8s %12.2f %12.2f %16.3g"
            % (name, 1e3 * min(times), 1e3 * statistics.median(times), pairs / min(times))
        )
    if len(best) == 2:
        print("speedup (numpy best / numba best): %.2fx" % (best["numpy"] / best["numba"]))
    return 0


if __name__ == "__main__":
    sys.exit(main())
