"""
Timing the two forward paths
============================

The covariance route costs about n c^2 + p c^2 multiply-adds, the
projection route about n c p. With p much smaller than c the second one
wins.
"""

from smso import bench

print(f"{'n':>4} {'c':>4} {'p':>4} {'flop ratio':>10} {'time ratio':>10}")
for n, c, p in [(196, 256, 64), (196, 256, 8), (64, 64, 64), (128, 128, 128)]:
    rows = {r.path: r for r in bench.bench_paths(n, c, p, reps=30, warmup=5)}
    flops = rows["direct"].flop_estimate / rows["alternative"].flop_estimate
    speed = rows["direct"].wall_ns / rows["alternative"].wall_ns
    print(f"{n:4d} {c:4d} {p:4d} {flops:10.2f} {speed:10.2f}")
