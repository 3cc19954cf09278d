"""Timing of the two equivalent SMSO forward paths."""

import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import layers
from .numerics import RngStream

PATHS = ("direct", "alternative")


class EquivalenceError(RuntimeError):
    """The two paths disagree; timings would be meaningless."""


def flop_estimate(path, n, c, p):
    """Multiply-add count of one forward pass.

    direct:      X~^T X~ (n c^2) + quadratic forms (p c^2) + centering (n c) + dots (p c)
    alternative: projection (n c p) + centering (n c) + squared sums (n p)
    """
    if path == "direct":
        return n * c * c + p * c * c + n * c + p * c
    if path == "alternative":
        return n * c * p + n * c + n * p
    raise ValueError(f"unknown path {path!r}")


@dataclass
class BenchReport:
    path: str
    n: int
    c: int
    p: int
    wall_ns: int
    flop_estimate: int
    reps: int
    max_rel_diff: float

    def to_row(self):
        return asdict(self)


def _max_rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-300))


def bench_paths(n, c, p, reps=30, warmup=5, seed=0, dtype=np.float64, rtol=1e-9):
    """Median wall time of each path on identical inputs, after an equivalence check."""
    stream = RngStream(seed, 0)
    X = stream.gaussian((n, c))
    W = layers.SmsoHead.init(c, p, stream).W
    ref_d = layers.smso_direct_fwd(X, W, 1.0, center=False)
    ref_a = layers.smso_alternative_fwd(X, W, 1.0, center=False)
    diff = _max_rel(ref_d, ref_a)
    if not diff <= rtol:
        raise EquivalenceError(f"paths disagree at (n={n}, c={c}, p={p}): max rel diff {diff:.3e}")
    Xt, Wt = X.astype(dtype), W.astype(dtype)
    fns = {"direct": lambda: layers.pv_fwd(layers.covariance_pool_fwd(Xt), Wt),
           "alternative": lambda: layers.l2_pool_fwd(Xt, Wt)}
    if dtype != np.float64:
        # the layer helpers promote to float64; time the raw kernels instead
        fns = {"direct": lambda: _direct_raw(Xt, Wt), "alternative": lambda: _alt_raw(Xt, Wt)}
    out = []
    for path in PATHS:
        fn = fns[path]
        for _ in range(warmup):
            fn()
        times = []
        for _ in range(reps):
            t0 = time.perf_counter_ns()
            z = fn()
            np.sqrt(z)
            times.append(time.perf_counter_ns() - t0)
        out.append(BenchReport(path, n, c, p, int(statistics.median(times)), flop_estimate(path, n, c, p),
                               reps, diff))
    return out


def _direct_raw(X, W):
    Xc = X - X.mean(axis=0)
    Y = Xc.T @ Xc / (X.shape[0] - 1)
    return np.sum(W * (Y @ W), axis=0)


def _alt_raw(X, W):
    U = (X - X.mean(axis=0)) @ W
    return np.sum(U * U, axis=0) / (X.shape[0] - 1)
