#!/usr/bin/env python3
"""Compare the compiled geometry kernels against the pure-numpy fallback.

Runs farthest point sampling, ball query and 3-NN over a seeded random
cloud on every available backend, verifies the outputs are identical, and
prints median timings. Usage:

    python benchmarks/kernel_backends.py [--n 20000] [--n-out 2048]
"""

import argparse

from pointformer import kernels
from pointformer.bench import kernel_backend_bench


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n", type=int, default=20000)
    parser.add_argument("--n-out", type=int, default=2048)
    parser.add_argument("--k", type=int, default=32)
    parser.add_argument("--radius", type=float, default=0.2)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()

    print(f"active backend: {kernels.backend_name()}")
    rows = kernel_backend_bench(
        n=args.n, n_out=args.n_out, k=args.k, radius=args.radius, repeat=args.repeat
    )
    print(f"{'kernel':<12} {'backend':<10} {'median (s)':>12} {'matches':>8}")
    for row in rows:
        print(f"{row.kernel:<12} {row.backend:<10} {row.median_seconds:>12.6f} {str(row.matches_reference):>8}")
    mismatched = [r for r in rows if not r.matches_reference]
    if mismatched:
        print("BACKEND MISMATCH:", ", ".join(f"{r.kernel}/{r.backend}" for r in mismatched))
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
