"""Compare the numba and pure-numpy BorderAlign kernels over a pooling-size sweep.

Usage: python3 benchmarks/bench_backends.py [--batch 8] [--channels 32] [--size 8] [--csv out.csv]

The same comparison applies to a whole process run with BORDERDET_DISABLE_NUMBA=1,
which makes the numpy kernels the default everywhere.
"""
import argparse

from borderdet import bench


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--size", type=int, default=8)
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--csv")
    args = ap.parse_args()
    rows = bench.bench(["border_align_forward", "border_align_backward"], (args.batch,), args.channels,
                       args.size, bench.DEFAULT_POOL_SIZES, args.repeats)
    if args.csv:
        bench.write_csv(rows, args.csv)
    table = {(r.op, r.pool_size, r.backend): r.median_ms for r in rows}
    print(f"{'op':22s} {'N':>3s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for op in ("border_align_forward", "border_align_backward"):
        for n in bench.DEFAULT_POOL_SIZES:
            fast, slow = table.get((op, n, "numba")), table.get((op, n, "numpy"))
            if fast is None:
                print(f"{op:22s} {n:3d} {'-':>10s} {table[op, n, 'default']:10.3f}")
                continue
            print(f"{op:22s} {n:3d} {fast:10.3f} {slow:10.3f} {slow / fast:7.1f}x")


if __name__ == "__main__":
    main()
