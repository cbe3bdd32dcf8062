"""Command line entry points.

Subcommands: synth-gen, train, evaluate, dump-predictions, convert.
Every flag overrides the corresponding config-file key; failures exit
nonzero with a machine-readable error JSON on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import data as data_mod
from . import harness, topology


def _add_config_overrides(parser):
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--dataset", help="canonical dataset directory")
    parser.add_argument("--variant", choices=["knn", "local", "todense"])
    parser.add_argument("--epsilon", type=float)
    parser.add_argument("--window", type=int)
    parser.add_argument("--bins", type=int)
    parser.add_argument("--hidden", type=int)
    parser.add_argument("--batch-size", type=int, dest="batch_size")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--learning-rate", type=float, dest="learning_rate")
    parser.add_argument("--split-scheme", choices=["holdout", "kfold"], dest="split_scheme")
    parser.add_argument("--train-fraction", type=float, dest="train_fraction")
    parser.add_argument("--folds", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--metric-channel", dest="metric_channel")
    parser.add_argument("--output-dir", dest="output_dir")


def _config_from_args(args) -> harness.ExperimentConfig:
    keys = [
        "dataset", "variant", "epsilon", "window", "bins", "hidden",
        "batch_size", "epochs", "learning_rate", "split_scheme",
        "train_fraction", "folds", "seed", "metric_channel", "output_dir",
    ]
    overrides = {k: getattr(args, k, None) for k in keys}
    if args.config:
        return harness.ExperimentConfig.from_json(args.config, **overrides)
    return harness.ExperimentConfig(
        **{k: v for k, v in overrides.items() if v is not None}
    )


def cmd_synth_gen(args):
    ds = data_mod.synth_generate(
        nodes=args.nodes, steps=args.steps, seed=args.seed, coupling=args.coupling
    )
    data_mod.save_dataset(ds, args.out)
    print(f"wrote synthetic dataset ({args.nodes} nodes, {args.steps} steps) to {args.out}")


def cmd_train(args):
    config = _config_from_args(args)
    report = harness.run_experiment(config)
    print(
        json.dumps(
            {
                "aggregate_mse": report.aggregate_mse,
                "per_fold_mse": report.per_fold_mse,
                "traffic_bytes": report.traffic["total_bytes"],
                "wall_clock_seconds": report.wall_clock_seconds,
            },
            indent=2,
        )
    )


def cmd_evaluate(args):
    report = harness.RunReport.from_json(args.report)
    folds = sorted({rec["fold"] for rec in report.records})
    fold_mses = []
    for fold in folds:
        recs = [r for r in report.records if r["fold"] == fold]
        fold_mses.append(
            harness.distributed_mse(
                [r["predicted"] for r in recs], [r["actual"] for r in recs]
            )
        )
    recomputed = float(np.mean(fold_mses))
    ok = abs(recomputed - report.aggregate_mse) < 1e-9
    print(
        json.dumps(
            {
                "reported_mse": report.aggregate_mse,
                "recomputed_mse": recomputed,
                "consistent": ok,
            },
            indent=2,
        )
    )
    if not ok:
        raise ValueError("report aggregate MSE does not match its records")


def cmd_dump_predictions(args):
    reports = [harness.RunReport.from_json(p) for p in args.report]
    harness.dump_predictions(
        reports, args.out, node=args.node, start=args.start, stop=args.stop
    )
    print(f"wrote {args.out}")


def cmd_convert(args):
    """Convert wide per-channel CSVs (time x node) plus an adjacency matrix
    into the canonical dataset layout."""
    channels = []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for spec in args.series:
        channel, _, path = spec.partition("=")
        if not path:
            raise ValueError(f"--series expects channel=path, got {spec!r}")
        channels.append(channel)
        frame = pd.read_csv(path)
        frame.columns = [str(c) for c in frame.columns]
        frame.to_csv(out / f"{channel}.csv", index=False)
    graph = topology.load_adjacency_csv(args.adjacency, args.threshold)
    topology.save_adjacency_csv(graph, out / "adjacency.csv")
    (out / "meta.json").write_text(
        json.dumps(
            {"channels": channels, "interval_minutes": args.interval}, indent=2
        )
    )
    data_mod.load_dataset(out)  # validate the result end to end
    print(f"wrote canonical dataset to {out}")


def build_parser():
    parser = argparse.ArgumentParser(prog="llptraffic")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic dataset")
    p.add_argument("--nodes", type=int, default=10)
    p.add_argument("--steps", type=int, default=2880)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coupling", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", help="run a full train + evaluate experiment")
    _add_config_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="recompute metrics from a report.json")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("dump-predictions", help="write a plot-ready prediction CSV")
    p.add_argument("--report", action="append", required=True)
    p.add_argument("--node")
    p.add_argument("--start", type=int)
    p.add_argument("--stop", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_predictions)

    p = sub.add_parser("convert", help="convert raw CSVs to the canonical layout")
    p.add_argument("--series", action="append", required=True, metavar="CHANNEL=CSV")
    p.add_argument("--adjacency", required=True)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--interval", type=float, default=5.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
