"""``smso`` command-line entry point.

Exit codes: 0 success, 1 a check or criterion failed, 2 usage error.
Verbosity comes from the SMSO_LOG environment variable (error, warn, info, debug).
"""

import argparse
import csv
import io
import json
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench, gradcheck, statcheck, trainer
from .errors import ContractError, TrainingError
from .fileio import atomic_write_text
from .numerics import RngStream

logger = logging.getLogger("smso")

_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _emit(text, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        atomic_write_text(out, text)


def _jsonl(rows):
    return "".join(json.dumps(r) + "\n" for r in rows)


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _load_config(args):
    config = trainer.Config.load(args.config)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return config


def _distcheck_config(args):
    d = {}
    if args.config:
        with open(args.config) as fh:
            d = json.load(fh)
    cfg = statcheck.DistcheckConfig.from_dict(d)
    if args.transform:
        cfg.transform = args.transform
    if args.n_samples:
        cfg.n_samples = args.n_samples
    return cfg


def _hist_csv(histograms):
    rows = [r for h in histograms for r in h.rows()]
    return _csv(["bin_left", "bin_right", "count", "stage", "dim"], rows)


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_gen_data(args):
    config = _load_config(args)
    spec = trainer.SyntheticDatasetSpec.from_config(config)
    ds = trainer.gen_dataset(spec, args.out)
    logger.info("wrote dataset to %s: %s", args.out, ds.manifest["counts"])
    return 0


def cmd_train(args):
    config = _load_config(args)
    dataset = trainer.load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    try:
        metrics, _ = trainer.train(config, dataset, args.out, resume=args.resume)
    except TrainingError as exc:
        logger.error("%s", exc)
        return 1
    atomic_write_text(os.path.join(args.out, "metrics.jsonl"), _jsonl(metrics.rows()))
    atomic_write_text(os.path.join(args.out, "timing.jsonl"),
                      _jsonl({"epoch": i + 1, "seconds": s} for i, s in enumerate(metrics.seconds)))
    atomic_write_text(os.path.join(args.out, "config.json"), config.to_json())
    return 0


def cmd_eval(args):
    config = _load_config(args)
    dataset = trainer.load_dataset(args.data)
    result = trainer.evaluate(config, args.ckpt, dataset, args.split)
    _emit(json.dumps(result) + "\n", args.out)
    return 0


def cmd_gradcheck(args):
    registry = gradcheck.default_registry()
    names = list(registry) if args.op == "all" else [args.op]
    unknown = [n for n in names if n not in registry]
    if unknown:
        print(f"unknown op {unknown[0]!r}; choose from: all, {', '.join(registry)}", file=sys.stderr)
        return 2
    reports = [gradcheck.check_op(registry[n], args.instances, args.tol, args.seed) for n in names]
    for r in reports:
        logger.info("%s passed=%s max_rel=%.3e", r.op_name, r.passed, r.max_rel_error)
    _emit(_jsonl(r.to_dict() for r in reports), args.out)
    return 0 if all(r.passed for r in reports) else 1


def cmd_distcheck(args):
    cfg = _distcheck_config(args)
    result = statcheck.pipeline_distcheck(cfg, RngStream(args.seed))
    _emit(_jsonl(r.to_dict() for r in result.reports), args.out)
    if args.hist_out:
        _emit(_hist_csv(result.histograms), args.hist_out)
    logger.info("z'' normality pass fraction %.3f", result.pass_fraction)
    return 0 if result.passed else 1


def cmd_histogram(args):
    cfg = _distcheck_config(args)
    result = statcheck.pipeline_distcheck(cfg, RngStream(args.seed))
    _emit(_hist_csv(result.histograms), args.out)
    return 0


def _int_list(text):
    return [int(v) for v in text.split(",") if v]


def cmd_bench(args):
    dtype = np.float32 if args.dtype == "f32" else np.float64
    rows = []
    try:
        for n in args.n:
            for c in args.c:
                for p in args.p:
                    rows.extend(bench.bench_paths(n, c, p, args.reps, args.warmup, args.seed, dtype))
    except bench.EquivalenceError as exc:
        logger.error("%s", exc)
        return 1
    header = ["path", "n", "c", "p", "wall_ns", "flop_estimate", "reps", "max_rel_diff"]
    _emit(_csv(header, [[getattr(r, h) for h in header] for r in rows]), args.out)
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="smso", description="Statistically-motivated second-order pooling toolkit.",
                                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=None):
        p.add_argument("--seed", type=int, default=seed_default,
                       help="random seed" + (" (overrides the config value)" if seed_default is None else ""))
        p.add_argument("--threads", type=int, default=1, help="maximum BLAS worker threads")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset", formatter_class=fmt)
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--out", required=True, help="output dataset directory")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="run directory for metrics and checkpoints")
    p.add_argument("--resume", default=None, help="checkpoint (last.smck) to resume from")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    p.add_argument("--config", required=True, help="JSON config file the checkpoint was trained with")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--split", default="test", choices=trainer.SPLITS, help="dataset split")
    p.add_argument("--out", default=None, help="output JSON file (stdout if omitted)")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification", formatter_class=fmt)
    p.add_argument("--op", default="all", help="operation name or 'all'")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error")
    p.add_argument("--instances", type=int, default=50, help="random instances per op")
    p.add_argument("--out", default=None, help="output JSONL file (stdout if omitted)")
    common(p, 0)
    p.set_defaults(func=cmd_gradcheck)

    for name, func, help_text in (("distcheck", cmd_distcheck, "test the distribution chain"),
                                  ("histogram", cmd_histogram, "export per-stage histograms")):
        p = sub.add_parser(name, help=help_text, formatter_class=fmt)
        p.add_argument("--config", default=None, help="JSON distcheck config (defaults if omitted)")
        p.add_argument("--transform", default=None, choices=("sqrt", "log", "cbrt", "none"),
                       help="override the config transform")
        p.add_argument("--n-samples", type=int, default=None, help="override the number of feature maps")
        p.add_argument("--out", default=None,
                       help=("JSONL reports" if name == "distcheck" else "CSV histograms") + " (stdout if omitted)")
        if name == "distcheck":
            p.add_argument("--hist-out", default=None, help="optional CSV histogram file")
        common(p, 0)
        p.set_defaults(func=func)

    p = sub.add_parser("bench", help="time direct vs alternative SMSO paths", formatter_class=fmt)
    p.add_argument("--n", type=_int_list, default="196", help="comma-separated spatial sizes")
    p.add_argument("--c", type=_int_list, default="256", help="comma-separated channel counts")
    p.add_argument("--p", type=_int_list, default="64", help="comma-separated output dims")
    p.add_argument("--reps", type=int, default=30, help="timed repetitions (median reported)")
    p.add_argument("--warmup", type=int, default=5, help="untimed warm-up runs")
    p.add_argument("--dtype", default="f64", choices=("f64", "f32"), help="floating-point precision")
    p.add_argument("--out", default=None, help="output CSV file (stdout if omitted)")
    common(p, 0)
    p.set_defaults(func=cmd_bench)
    for p in sub.choices.values():
        p.set_defaults(subparser=p)
    return parser


def main(argv=None):
    level = _LEVELS.get(os.environ.get("SMSO_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (FileNotFoundError, ContractError, ValueError) as exc:
        args.subparser.print_usage(sys.stderr)
        print(f"smso {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
