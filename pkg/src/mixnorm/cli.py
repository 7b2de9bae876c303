"""Command-line interface: ``python -m mixnorm <command> ...``.

Exit codes: 0 success, 2 usage error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from itertools import product
from pathlib import Path

from .bench import build_stream, generate_source_dataset, load_dataset, save_dataset
from .config import format_config, load_config
from .exceptions import NumericError, UsageError
from .harness import METHODS, Method, ProtocolConfig, run_adaptation, sweep
from .model import NetSpec, load_network, save_network, train_source
from .report import collect_rows, format_csv, format_table, render_svg, write_results

TUNE_M = (0.01, 0.05, 0.1, 0.2)
TUNE_TAU = (1e-6, 1e-3)
TUNE_TAU_MAX = (0.5, 0.75, 0.9, 1.1)
TUNE_STREAM = "single:gaussian_noise:5"


def _u64(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must lie in [0, 2**64), got {v}")
    return v


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _list(conv):
    def parse(text: str):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if not items:
            raise argparse.ArgumentTypeError("empty list")
        return tuple(conv(t) for t in items)
    return parse


def _held_out(net, dataset_path, split: str):
    """The evaluation images: an exported dataset file, or the split recorded in the model."""
    if dataset_path is not None:
        return load_dataset(dataset_path)
    meta = net.meta
    if "data_seed" not in meta:
        raise UsageError("model records no data seed; pass --dataset")
    return generate_source_dataset(int(meta["data_seed"]), int(meta[f"{split}_per_class"]),
                                   n_classes=net.n_classes, split=split)


def _method_from_args(args, name=None) -> Method:
    return Method(name or args.method, tau=args.tau, m=args.m, tau_max=args.tau_max,
                  learning_rate=args.lr, optimizer=args.optimizer, n_views=args.n_views)


def cmd_train(args):
    cfg = load_config(args.config)
    train = generate_source_dataset(args.seed, cfg.n_per_class, split="train")
    test = generate_source_dataset(args.seed, cfg.test_per_class, split="test")
    spec = NetSpec(widths=cfg.widths, eps=cfg.eps)
    net = train_source(spec, train.images, train.labels, cfg.epochs, args.seed,
                       batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                       momentum=cfg.momentum, val_images=test.images, val_labels=test.labels)
    net.meta.update(data_seed=args.seed, n_per_class=cfg.n_per_class,
                    test_per_class=cfg.test_per_class, tune_per_class=cfg.tune_per_class,
                    config=format_config(cfg))
    save_network(net, args.out)
    if "clean_error" in net.meta:
        print(f"clean test error {net.meta['clean_error']:.4f}")


def cmd_adapt(args):
    net = load_network(args.model)
    data = _held_out(net, args.dataset, "test")
    stream = build_stream(data, args.stream, args.seed)
    result = run_adaptation(net, _method_from_args(args), stream, args.batch_size, args.seed)
    write_results([result], args.out)
    print(f"{result.method} {result.stream} B={result.batch_size} error {result.error_rate:.4f}")


def cmd_sweep(args):
    net = load_network(args.model)
    data = _held_out(net, args.dataset, "test")
    methods = [_method_from_args(args, name) for name in args.methods]
    protocol = ProtocolConfig(batch_sizes=args.batch_sizes, streams=args.streams,
                              seeds=args.seeds)
    results = sweep(net, methods, protocol, data, n_jobs=args.n_jobs)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_results(results, out / "results.csv")
    print(f"{len(results)} runs written to {out / 'results.csv'}")


def cmd_report(args):
    rows = collect_rows(args.input)
    if args.format == "csv":
        Path(args.out).write_text(format_csv(rows))
    elif args.format == "table":
        Path(args.out).write_text(format_table(rows))
    else:
        render_svg(rows, args.out)


def cmd_tune(args):
    net = load_network(args.model)
    data = _held_out(net, args.dataset, "tune")
    stream = build_stream(data, TUNE_STREAM, args.seed)
    base = _method_from_args(args)
    if base.norm_kind == "mixnormbn":
        grid, second = list(product(TUNE_M, TUNE_TAU_MAX)), "tau_max"
    elif base.norm_kind == "mixnorm":
        grid, second = list(product(TUNE_M, TUNE_TAU)), "tau"
    else:
        raise UsageError(f"method {base.name!r} has no m/tau hyperparameters to tune")
    rows = []
    for m, t in grid:
        method = Method(base.name, m=m, learning_rate=base.learning_rate,
                        optimizer=base.optimizer, n_views=base.n_views, **{second: t})
        r = run_adaptation(net, method, stream, args.batch_size, args.seed)
        rows.append((m, t, r.error_rate))
    best = min(range(len(rows)), key=lambda i: rows[i][2])  # first minimum in grid order
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "stream", "m", second, "error_rate", "selected"])
        for i, (m, t, e) in enumerate(rows):
            w.writerow([base.name, TUNE_STREAM, m, t, f"{e:.6f}", int(i == best)])
    m, t, e = rows[best]
    print(f"selected m={m} {second}={t} (error {e:.4f})")


def cmd_dataset(args):
    save_dataset(generate_source_dataset(args.seed, args.n_per_class, split=args.split), args.out)


def _add_method_options(p):
    p.add_argument("--m", type=float, help="mixing scale (default: per-protocol default)")
    p.add_argument("--tau", type=float, help="EMA moving speed")
    p.add_argument("--tau-max", dest="tau_max", type=float, help="MixNormBN max moving speed")
    p.add_argument("--lr", type=float, help="learning rate at batch size 200")
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--n-views", dest="n_views", type=_positive, default=1)
    p.add_argument("--dataset", help="exported dataset file to evaluate on")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixnorm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the source model")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=_u64, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="run one method on one stream")
    p.add_argument("--model", required=True)
    p.add_argument("--method", required=True, choices=sorted(METHODS))
    p.add_argument("--stream", required=True, help="single:<kind>:<sev> | mixed:<sev> | clean")
    p.add_argument("--batch-size", dest="batch_size", type=_positive, required=True)
    p.add_argument("--seed", type=_u64, required=True)
    p.add_argument("--out", required=True)
    _add_method_options(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("sweep", help="methods x batch sizes x streams x seeds")
    p.add_argument("--model", required=True)
    p.add_argument("--methods", type=_list(str), required=True)
    p.add_argument("--batch-sizes", dest="batch_sizes", type=_list(_positive), required=True)
    p.add_argument("--streams", type=_list(str), required=True)
    p.add_argument("--seeds", type=_list(_u64), required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--n-jobs", dest="n_jobs", type=int, default=1)
    _add_method_options(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="merge and render results")
    p.add_argument("--in", dest="input", required=True, help="results directory or CSV file")
    p.add_argument("--format", choices=("csv", "table", "svg"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("tune", help="grid-search m and tau on the reserved tuning split")
    p.add_argument("--model", required=True)
    p.add_argument("--method", required=True, choices=sorted(METHODS))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--batch-size", dest="batch_size", type=_positive, default=64)
    _add_method_options(p)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("dataset", help="export a rendered dataset split")
    p.add_argument("--seed", type=_u64, required=True)
    p.add_argument("--n-per-class", dest="n_per_class", type=_positive, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
