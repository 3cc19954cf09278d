"""Central-difference verification of hand-written backward passes.

An :class:`Op` bundles a forward function, its backward, a random input
sampler and the names of the inputs to differentiate. :func:`check_op`
contracts the output with a random cotangent ``R`` so the scalar under test
is ``sum(R * fwd(inputs))`` and compares ``bwd(inputs, R)`` against finite
differences on a random subset of coordinates.
"""

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, DomainError
from .numerics import RngStream


class EvaluationError(RuntimeError):
    """The function under test returned a non-finite value at a probe point."""


@dataclass
class Op:
    name: str
    fwd: Callable
    bwd: Callable
    sample: Callable
    wrt: tuple


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    max_abs_error: float
    worst_index: tuple
    n_probes: int
    tolerance: float
    absolute_floor: float
    passed: bool

    def to_dict(self):
        d = asdict(self)
        d["worst_index"] = list(self.worst_index)
        return d


def central_difference(f, x, h=1e-5, indices=None):
    """Numeric gradient of scalar ``f`` at ``x``.

    ``indices`` selects flat coordinates to probe; unprobed entries are NaN.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.full(x.shape, np.nan)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    probes = range(flat.size) if indices is None else indices
    for i in probes:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            where = tuple(int(k) for k in np.unravel_index(i, x.shape))
            raise EvaluationError(f"non-finite function value probing index {where}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_op(op, n_instances=50, tol=1e-4, seed=0, h=1e-5, max_probes=200, absolute_floor=1e-8):
    """Worst-case analytic vs numeric gradient error over random instances.

    Relative error per coordinate uses max(|analytic|, |numeric|, 1e-8) as
    denominator. The op passes if the worst relative error is within ``tol``
    or the worst absolute error is within ``absolute_floor``.
    """
    worst_rel, worst_abs, worst_idx, probes = 0.0, 0.0, (), 0
    for inst in range(n_instances):
        stream = RngStream(seed, inst)
        inputs = op.sample(stream)
        out = np.asarray(op.fwd(inputs), dtype=np.float64)
        R = stream.gaussian(out.shape)
        analytic = op.bwd(inputs, R)
        for name in op.wrt:
            x = np.asarray(inputs[name], dtype=np.float64)
            a = np.asarray(analytic[name], dtype=np.float64)
            if a.shape != x.shape:
                raise ContractError(f"{op.name}: analytic gradient for {name} has shape {a.shape}, "
                                    f"input has shape {x.shape}")

            def f(v, name=name):
                return np.sum(R * op.fwd({**inputs, name: v}))

            idx = stream.permutation(x.size)[:max_probes] if x.size > max_probes else np.arange(x.size)
            try:
                num = central_difference(f, x, h, idx).reshape(-1)[idx]
            except (EvaluationError, DomainError) as exc:
                # a probe left the domain (stiff region): report it as a failure instead of aborting
                if not math.isinf(worst_rel):
                    worst_idx = (inst, name, str(exc))
                worst_rel = worst_abs = math.inf
                probes += idx.size
                continue
            ana = a.reshape(-1)[idx]
            err = np.abs(ana - num)
            rel = err / np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
            probes += idx.size
            k = int(np.argmax(rel))
            if rel[k] > worst_rel:
                worst_rel = float(rel[k])
                worst_idx = (inst, name) + tuple(int(i) for i in np.unravel_index(idx[k], x.shape))
            worst_abs = max(worst_abs, float(err.max()))
    passed = worst_rel <= tol or worst_abs <= absolute_floor
    return GradCheckReport(op.name, worst_rel, worst_abs, worst_idx, probes, tol, absolute_floor, passed)


# --------------------------------------------------------------------------
# Registry
# --------------------------------------------------------------------------

def _dims(stream, n=(3, 10), c=(2, 6), p=(1, 5)):
    g = stream.generator
    return (int(g.integers(*n, endpoint=True)), int(g.integers(*c, endpoint=True)),
            int(g.integers(*p, endpoint=True)))


def _spd(stream, c):
    A = stream.gaussian((c, c))
    return A @ A.T / c + 0.5 * np.eye(c)


def default_registry():
    """Every differentiable operation, keyed by name, plus the composed model."""
    from . import layers as L
    from . import trainer as T

    ops = {}

    def add(name, fwd, bwd, sample, wrt):
        ops[name] = Op(name, fwd, bwd, sample, tuple(wrt))

    def sample_X(s):
        n, c, _ = _dims(s)
        return {"X": s.gaussian((n, c))}

    def sample_XW(s):
        n, c, p = _dims(s)
        return {"X": s.gaussian((n, c)), "W": s.gaussian((c, p))}

    add("covariance_pool", lambda d: L.covariance_pool_fwd(d["X"]),
        lambda d, g: {"X": L.covariance_pool_bwd(d["X"], g)}, sample_X, ["X"])

    def sample_pv(s):
        _, c, p = _dims(s)
        return {"Y": _spd(s, c), "W": s.gaussian((c, p))}

    def pv_bwd(d, g):
        dY, dW = L.pv_bwd(d["Y"], d["W"], g)
        return {"Y": dY, "W": dW}

    add("pv", lambda d: L.pv_fwd(d["Y"], d["W"]), pv_bwd, sample_pv, ["Y", "W"])

    def l2_bwd(d, g):
        dX, dW = L.l2_pool_bwd(d["X"], d["W"], g)
        return {"X": dX, "W": dW}

    add("l2_pool", lambda d: L.l2_pool_fwd(d["X"], d["W"]), l2_bwd, sample_XW, ["X", "W"])

    for kind in L.TRANSFORMS:
        def sample_z(s):
            p = int(s.generator.integers(1, 8, endpoint=True))
            return {"z": 0.5 + 4.5 * s.uniform(p), "alpha": 0.5 + 2.5 * s.uniform(p),
                    "n_ref": int(s.generator.integers(2, 200))}

        add(f"transform_{kind}",
            lambda d, kind=kind: L.transform_fwd(d["z"], kind, d["alpha"], d["n_ref"]),
            lambda d, g, kind=kind: {"z": L.transform_bwd(d["z"], g, kind, d["alpha"], d["n_ref"])},
            sample_z, ["z"])

    def sample_sb(s):
        p = int(s.generator.integers(1, 8, endpoint=True))
        return {"zp": s.gaussian(p), "rho": 0.5 * s.gaussian(p), "beta": s.gaussian(p)}

    def sb_bwd(d, g):
        dzp, drho, dbeta = L.scale_bias_bwd(d["zp"], d["rho"], g)
        return {"zp": dzp, "rho": drho, "beta": dbeta}

    add("scale_bias", lambda d: L.scale_bias_fwd(d["zp"], d["rho"], d["beta"]), sb_bwd, sample_sb,
        ["zp", "rho", "beta"])

    def sample_path(s):
        d = sample_XW(s)
        d["alpha"] = 0.5 + 2.5 * s.uniform(d["W"].shape[1])
        return d

    for mode, fwd, bwd in (("direct", L.smso_direct_fwd, L.smso_direct_bwd),
                           ("alternative", L.smso_alternative_fwd, L.smso_alternative_bwd)):
        def path_bwd(d, g, bwd=bwd):
            dX, dW = bwd(d["X"], d["W"], g, d["alpha"])
            return {"X": dX, "W": dW}

        add(f"smso_{mode}", lambda d, fwd=fwd: fwd(d["X"], d["W"], d["alpha"]), path_bwd, sample_path,
            ["X", "W"])

    add("bp_baseline", lambda d: L.bp_baseline_fwd(d["X"]),
        lambda d, g: {"X": L.bp_baseline_bwd(d["X"], g)}, sample_X, ["X"])
    add("gap_baseline", lambda d: L.gap_baseline_fwd(d["X"]),
        lambda d, g: {"X": L.gap_baseline_bwd(d["X"], g)}, sample_X, ["X"])

    def sample_logits(s):
        b = int(s.generator.integers(1, 6, endpoint=True))
        k = int(s.generator.integers(2, 5, endpoint=True))
        return {"logits": 2.0 * s.gaussian((b, k)), "labels": s.generator.integers(0, k, size=b)}

    add("softmax_xent", lambda d: np.asarray(T.softmax_xent_fwd_bwd(d["logits"], d["labels"])[0]),
        lambda d, g: {"logits": g * T.softmax_xent_fwd_bwd(d["logits"], d["labels"])[1]},
        sample_logits, ["logits"])

    for head in ("smso", "bp", "gap"):
        _add_model_op(ops, head)
    return ops


def _add_model_op(ops, head):
    from . import trainer as T

    base = T.Config(k_classes=2, n_locations=8, c_channels=4, projection_dim=4, head=head, p=3)

    def build(d):
        model = T.Model(base.replace(seed=0))
        model.set_params({k: d[k] for k in model.params()})
        if head == "smso":
            model.head.alpha_ema = d["alpha_ema"]
        return model

    def sample(s):
        model = T.Model(base, s.child(1))
        d = {k: v.copy() for k, v in model.params().items()}
        d["X"] = s.gaussian((2, base.n_locations, base.c_channels))
        d["y"] = np.array([0, 1])
        if head == "smso":
            d["head.rho"] = 0.3 * s.gaussian(base.p)
            d["head.beta"] = s.gaussian(base.p)
            d["alpha_ema"] = 0.5 + s.uniform(base.p)
        return d

    def fwd(d):
        loss, _ = build(d).forward(d["X"], d["y"])
        return np.asarray(loss)

    def bwd(d, g):
        model = build(d)
        _, tape = model.forward(d["X"], d["y"])
        grads = model.backward(tape)
        return {k: g * v for k, v in grads.items()} | {"X": g * grads["dX"]}

    sample_keys = list(T.Model(base).params()) + ["X"]
    ops[f"model_{head}"] = Op(f"model_{head}", fwd, bwd, sample, tuple(sample_keys))
