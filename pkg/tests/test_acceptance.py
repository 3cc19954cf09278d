"""Acceptance criteria, one test each. Every test prints a PASS/FAIL line."""

import csv
import io
import json
import os
import time

import numpy as np
import pytest

from smso import bench, cli, gradcheck
from smso import layers as L
from smso import statcheck as S
from smso import trainer as T
from smso.numerics import RngStream


def report(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {title} -- {detail}")
    assert ok, detail


def normwise(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-300))


def test_1_path_equivalence(capsys):
    t0 = time.perf_counter()
    worst_out = worst_grad = 0.0
    for i in range(200):
        s = RngStream(2024, i)
        g = s.generator
        n, c, p = int(g.integers(4, 256, endpoint=True)), int(g.integers(2, 128, endpoint=True)), \
            int(g.integers(1, 64, endpoint=True))
        X, W = s.gaussian((n, c)), s.gaussian((c, p))
        alpha = float(0.5 + 1.5 * g.random())
        d = L.smso_direct_fwd(X, W, alpha, center=False)
        a = L.smso_alternative_fwd(X, W, alpha, center=False)
        worst_out = max(worst_out, float(np.max(np.abs(d - a) / np.abs(d))))
        dzp = s.gaussian(p)
        dXd, dWd = L.smso_direct_bwd(X, W, dzp, alpha)
        dXa, dWa = L.smso_alternative_bwd(X, W, dzp, alpha)
        worst_grad = max(worst_grad, normwise(dXd, dXa), normwise(dWd, dWa))
    elapsed = time.perf_counter() - t0
    ok = worst_out <= 1e-9 and worst_grad <= 1e-8 and elapsed < 30
    report(capsys, 1, "direct vs alternative path", ok,
           f"max rel output diff {worst_out:.2e}, max rel grad diff {worst_grad:.2e}, {elapsed:.1f}s")


def test_2_gradcheck_suite(capsys):
    t0 = time.perf_counter()
    reports = [gradcheck.check_op(op, n_instances=50, tol=1e-4) for op in gradcheck.default_registry().values()]
    elapsed = time.perf_counter() - t0
    failed = [r.op_name for r in reports if not r.passed]
    worst = max(reports, key=lambda r: r.max_rel_error)
    via_floor = [f"{r.op_name} (abs {r.max_abs_error:.1e})" for r in reports if r.passed and r.max_rel_error > 1e-4]
    ok = not failed and elapsed < 60
    report(capsys, 2, "finite-difference gradcheck", ok,
           f"{len(reports)} ops, failed={failed}, worst rel {worst.max_rel_error:.2e} ({worst.op_name}), "
           f"passed via absolute floor: {via_floor or 'none'}, {elapsed:.1f}s")


def test_3_chi2_law(capsys):
    t0 = time.perf_counter()
    n, c, passes = 196, 4, 0
    for seed in range(100):
        s = RngStream(seed, 30)
        Sigma = S.random_spd(c, s.child(31))
        w = s.child(32).gaussian(c)
        z = S.quadratic_form_samples(Sigma, w, n, 10**4, s.child(33), centered=False)
        passes += S.chi2_ks_test(z, n, alpha_level=0.01).passed
    elapsed = time.perf_counter() - t0
    ok = passes >= 97 and elapsed < 60
    report(capsys, 3, "quadratic form follows chi2_n", ok, f"KS passes {passes}/100 at 0.01, {elapsed:.1f}s")


def test_4_sqrt_law(capsys):
    z = RngStream(4).generator.chisquare(196, 10**5)
    x = L.transform_fwd(z, "sqrt", alpha=2.0, n_ref=196, center=False)
    mean, var, _, _ = S.moments(x)
    ok = abs(mean - np.sqrt(391)) <= 0.02 and abs(var - 1.0) <= 0.05
    report(capsys, 4, "sqrt(2 chi2_196) moments", ok,
           f"mean {mean:.4f} (target {np.sqrt(391):.4f}), variance {var:.4f}")


def test_5_pipeline_normality(capsys):
    t0 = time.perf_counter()
    rates = S.normality_pass_rate(S.DistcheckConfig(), range(100), ("sqrt", "none"))
    elapsed = time.perf_counter() - t0
    ok = rates["sqrt"] >= 0.90 and rates["none"] <= 0.10 and elapsed < 120
    report(capsys, 5, "z'' Shapiro-Wilk pass rate", ok,
           f"sqrt {rates['sqrt']:.2f}, none {rates['none']:.2f} over 100 seeds, {elapsed:.1f}s")


def test_6_transform_ablation(capsys):
    variants = {"sqrt+affine": dict(transform="sqrt", scale_bias=True),
                "sqrt": dict(transform="sqrt", scale_bias=False),
                "none": dict(transform="none", scale_bias=True)}
    acc = {k: [] for k in variants}
    for seed in range(5):
        base = T.Config(seed=seed)
        ds = T.gen_dataset(T.SyntheticDatasetSpec.from_config(base))
        for name, kw in variants.items():
            metrics, _ = T.train(base.replace(**kw), ds)
            acc[name].append(metrics.val_acc[-1])
    mean = {k: float(np.mean(v)) for k, v in acc.items()}
    ordered = mean["sqrt+affine"] >= mean["sqrt"] - 0.01 and mean["sqrt"] >= mean["none"] - 0.01
    skew_ok = {}
    for transform in ("sqrt", "log", "cbrt"):
        res = S.pipeline_distcheck(S.DistcheckConfig(transform=transform), RngStream(6))
        z, zpp = res.stages["z"], res.stages["z''"]
        skew_ok[transform] = all(S.moments(zpp[:, j])[2] < S.moments(z[:, j])[2] for j in range(z.shape[1]))
    ok = ordered and all(skew_ok.values())
    detail = ", ".join(f"{k} {v:.4f}" for k, v in mean.items())
    report(capsys, 6, "transform ablation ordering", ok, f"mean final val acc: {detail}; skew reduced: {skew_ok}")


def test_7_second_vs_first_order(capsys):
    t0 = time.perf_counter()
    config = T.Config()
    assert (config.k_classes, config.c_channels, config.n_locations, config.train_per_class) == (4, 16, 64, 500)
    ds = T.gen_dataset(T.SyntheticDatasetSpec.from_config(config))
    smso, _ = T.train(config, ds)
    gap, _ = T.train(config.replace(head="gap"), ds)
    elapsed = time.perf_counter() - t0
    ok = max(smso.val_acc) >= 0.90 and gap.val_acc[-1] <= 0.35 and len(smso.val_acc) <= 50 and elapsed < 300
    report(capsys, 7, "SMSO vs GAP on equal-mean data", ok,
           f"SMSO best val {max(smso.val_acc):.4f}, GAP final val {gap.val_acc[-1]:.4f}, {elapsed:.1f}s")


def test_8_benchmark(capsys):
    rows = {r.path: r for r in bench.bench_paths(196, 256, 64, reps=30, warmup=5)}
    speedup = rows["direct"].wall_ns / rows["alternative"].wall_ns
    flop = rows["direct"].flop_estimate / rows["alternative"].flop_estimate
    ok = speedup >= 2.0 and rows["direct"].max_rel_diff <= 1e-9
    report(capsys, 8, "alternative path speedup", ok,
           f"measured {speedup:.2f}x (FLOP model {flop:.2f}x), equivalence diff {rows['direct'].max_rel_diff:.1e}")


def _mask_wall(text):
    rows = list(csv.reader(io.StringIO(text)))
    col = rows[0].index("wall_ns")
    for r in rows[1:]:
        r[col] = "*"
    return rows


def _snapshot(directory):
    # timing.jsonl holds wall-clock seconds and is excluded by design
    out = {}
    for root, _, files in os.walk(directory):
        for f in files:
            if f != "timing.jsonl":
                path = os.path.join(root, f)
                with open(path, "rb") as fh:
                    out[os.path.relpath(path, directory)] = fh.read()
    return out


def test_9_cli_determinism(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"k_classes": 3, "n_locations": 16, "c_channels": 6, "train_per_class": 30,
                               "val_per_class": 15, "test_per_class": 15, "p": 4, "epochs": 4}))
    snaps = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        seed = ["--seed", "7", "--threads", "1"]
        codes = [
            cli.main(["gen-data", "--config", str(cfg), "--out", str(d / "data")] + seed),
            cli.main(["train", "--config", str(cfg), "--data", str(d / "data"), "--out", str(d / "run")] + seed),
            cli.main(["eval", "--config", str(cfg), "--data", str(d / "data"), "--ckpt", str(d / "run" / "best.smck"),
                      "--out", str(d / "eval.json")] + seed),
            cli.main(["gradcheck", "--instances", "5", "--out", str(d / "grad.jsonl")] + seed),
            cli.main(["distcheck", "--n-samples", "300", "--out", str(d / "dist.jsonl"),
                      "--hist-out", str(d / "dist_hist.csv")] + seed),
            cli.main(["histogram", "--n-samples", "300", "--out", str(d / "hist.csv")] + seed),
            cli.main(["bench", "--n", "32", "--c", "16", "--p", "4", "--reps", "3", "--warmup", "1",
                      "--out", str(d / "bench.csv")] + seed),
        ]
        assert all(code in (0, 1) for code in codes), codes
        snap = _snapshot(d)
        snap["bench.csv"] = _mask_wall(snap["bench.csv"].decode())
        snaps.append(snap)
    differing = sorted(k for k in snaps[0] if snaps[0][k] != snaps[1].get(k))
    ok = not differing and snaps[0].keys() == snaps[1].keys()
    report(capsys, 9, "CLI byte-identical reruns", ok,
           f"{len(snaps[0])} output files compared (bench wall_ns masked), differing={differing}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
