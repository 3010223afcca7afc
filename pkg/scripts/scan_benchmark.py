#!/usr/bin/env python3
"""Time the scan kernels across state sizes and fit their scaling exponents.

Measures median wall time of the diagonal, sparse-routed (pd) and dense scan
variants over a grid of state sizes at fixed sequence length, writes the raw
table to CSV, and prints the log-log slope of runtime versus state size per
variant along with the dense/pd ratio at the largest state.

Example:
    python3 scripts/scan_benchmark.py --n-grid 32 128 512 1024 --reps 5
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from pdssm import bench


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-grid", type=int, nargs="+", default=[32, 128, 512, 1024])
    ap.add_argument("--length", type=int, default=1024)
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--structures", nargs="+",
                    default=["diagonal", "pd", "dense"])
    ap.add_argument("--out", default="runs/bench.csv")
    args = ap.parse_args()

    cfg = bench.BenchConfig(structure=tuple(args.structures),
                            n_grid=tuple(args.n_grid),
                            l_grid=(args.length,), reps=args.reps)
    rows = bench.bench_scan(cfg)
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    bench.write_bench_csv(rows, args.out)

    print(f"{'structure':<10} {'N':>6} {'median s':>12} {'iqr s':>12}")
    for r in rows:
        if r.skipped:
            print(f"{r.structure:<10} {r.n:>6} {'skipped':>12}  ({r.note})")
        else:
            print(f"{r.structure:<10} {r.n:>6} {r.median_s:>12.6f} {r.iqr_s:>12.6f}")

    try:
        slopes = bench.bench_fit_scaling(rows)
    except ValueError as e:
        print(f"\nno scaling fit: {e}")
        return
    print("\nlog-log slope of median runtime vs N:")
    for name, slope in slopes.items():
        print(f"  {name:<10} {slope:.2f}")
    med = {(r.structure, r.n): r.median_s for r in rows if not r.skipped}
    nmax = max(args.n_grid)
    if ("dense", nmax) in med and ("pd", nmax) in med:
        print(f"dense/pd at N={nmax}: {med[('dense', nmax)] / med[('pd', nmax)]:.1f}x")
    print(f"table -> {args.out}")


if __name__ == "__main__":
    main()
