"""Compare the numba and numpy kernel backends on the hot per-byte kernels.

Times digest64 and sum_sqrt over a range of block sizes and prints one CSV
row per (backend, op, size). The numba rows are skipped when numba is not
importable, so the benchmark runs anywhere the package does.

Usage:
    python benchmarks/kernel_bench.py
    python benchmarks/kernel_bench.py --sizes 64K,1M,8M --repeats 7 --out k.csv
"""

import argparse
import csv
import sys
import time

import numpy as np

from pipebroker._kernels import implementations
from pipebroker.cli import parse_size_list

FIELDS = ["backend", "op", "block_size", "per_call_seconds"]

# aim each timed repetition at roughly this many bytes so small blocks are
# looped enough to rise above timer resolution
TARGET_BYTES = 1 << 22


def _time_call(fn, args, size, repeats):
    calls = max(1, TARGET_BYTES // size)
    best = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(calls):
            fn(*args)
        per_call = (time.perf_counter() - t0) / calls
        # min over repeats: preemption only ever inflates a sample
        if best is None or per_call < best:
            best = per_call
    return best


def run(sizes, repeats, iters, seed):
    rng = np.random.default_rng(seed)
    rows = []
    for size in sizes:
        payload = rng.integers(0, 256, size=size, dtype=np.uint8)
        for backend, (digest_fn, sum_sqrt_fn) in sorted(implementations().items()):
            digest_fn(payload[:16])  # JIT warmup outside the timed region
            sum_sqrt_fn(payload[:16], 1)
            rows.append({"backend": backend, "op": "digest64",
                         "block_size": size,
                         "per_call_seconds": _time_call(digest_fn, (payload,),
                                                        size, repeats)})
            rows.append({"backend": backend, "op": "sum_sqrt",
                         "block_size": size,
                         "per_call_seconds": _time_call(sum_sqrt_fn,
                                                        (payload, iters),
                                                        size, repeats)})
    return rows


def main(argv=None):
    parser = argparse.ArgumentParser(
        description="benchmark the digest and analysis kernels on both backends")
    parser.add_argument("--sizes", type=parse_size_list, default="64K,256K,1M,4M",
                        help="comma list or doubling range, e.g. 64K..4M")
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--iters", type=int, default=4,
                        help="sum_sqrt sweeps per block")
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--out", help="write CSV here instead of stdout")
    args = parser.parse_args(argv)
    sizes = parse_size_list(args.sizes) if isinstance(args.sizes, str) else args.sizes

    rows = run(sizes, args.repeats, args.iters, args.seed)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(out, fieldnames=FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if args.out:
            out.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
