"""Experiment driver: train/evaluate per the evaluation protocol.

A run is fully determined by its config and master seed. The master seed
fans out through numpy SeedSequence spawning, in this order per fold:
model-init, batch-order and noise streams, each spawned once more per
node. Reports carry every per-(node, time) prediction so the aggregate
metric can be recomputed independently.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import exchange as exchange_mod
from . import models as models_mod
from . import privacy as privacy_mod
from .data import SeriesDataset, SplitPlan

DEFAULT_EPOCHS = {"holdout": 5, "kfold": 15}


@dataclass
class ExperimentConfig:
    dataset: str | None = None
    variant: str = "local"  # knn | local | todense
    epsilon: float | None = None
    window: int = 12
    bins: int = 10
    hidden: int = 32
    batch_size: int = 32
    epochs: int | None = None
    learning_rate: float = 0.01
    split_scheme: str = "holdout"
    train_fraction: float = 0.8
    folds: int = 5
    seed: int = 0
    metric_channel: str | None = None
    adjacency_threshold: float = 0.0
    reuse_noise: bool = False
    share_lstm: bool = False
    output_dir: str | None = None

    def __post_init__(self):
        if self.variant not in ("knn", "local", "todense"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.epsilon is not None and self.variant != "todense":
            raise ValueError("epsilon is only meaningful for the todense variant")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.split_scheme]

    @classmethod
    def from_json(cls, path, **overrides):
        blob = json.loads(Path(path).read_text())
        blob.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**blob)


@dataclass
class RunReport:
    config: dict
    aggregate_mse: float
    per_fold_mse: list
    per_node_mse: dict
    records: list  # {"fold", "node", "time", "actual", "predicted"}
    traffic: dict
    wall_clock_seconds: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path):
        blob = json.loads(Path(path).read_text())
        return cls(**blob)


def distributed_mse(predictions, truths) -> float:
    """Squared errors over all (node, test point, window) records / count."""
    predictions = np.asarray(predictions, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if predictions.shape != truths.shape:
        raise ValueError(
            f"misaligned records: {predictions.shape} vs {truths.shape}"
        )
    if predictions.size == 0:
        raise ValueError("no prediction records")
    return float(np.sum((predictions - truths) ** 2) / predictions.size)


def _bin_specs(ds: SeriesDataset, train_segments, bins: int):
    """Per-channel bin edges frozen from the training split of all nodes."""
    specs = {}
    for ci, channel in enumerate(ds.channels):
        chunks = [ds.values[:, ci, a:b] for a, b in train_segments]
        lo = min(float(c.min()) for c in chunks)
        hi = max(float(c.max()) for c in chunks)
        if hi <= lo:
            hi = lo + 1.0
        specs[channel] = privacy_mod.BinSpec(lo, hi, bins)
    return specs


def _own_histograms(ds, node, window_starts, specs, w):
    """Raw per-(window, channel) histograms of the node's own labels."""
    node_vals = ds.values[ds.graph.index_of(node)]
    out = {}
    for t in window_starts:
        for ci, channel in enumerate(ds.channels):
            out[(t, channel)] = privacy_mod.build_histogram(
                node_vals[ci, t : t + w],
                specs[channel],
                window_index=t,
                channel=channel,
                origin=node,
            )
    return out


def _publish_all(bus, ds, window_starts, specs, w, epsilon, own_hists, noise_rngs):
    """One publish phase: every node sends every window's histograms."""
    for node in ds.node_ids:
        rng = noise_rngs[node]
        for t in window_starts:
            per_channel = {}
            for channel in ds.channels:
                hist = own_hists[node][(t, channel)]
                if epsilon is not None:
                    hist = privacy_mod.privatize(hist, epsilon, rng)
                per_channel[channel] = hist
            bus.publish_window(node, t, per_channel)


def _centralized_baseline_bytes(ds, window_count) -> int:
    """What shipping raw windows to a single sink would cost: one message of
    w raw points per node, channel and window."""
    w_bytes = 12 * exchange_mod.BIN_BYTES + exchange_mod.HEADER_BYTES
    return len(ds.node_ids) * len(ds.channels) * window_count * w_bytes


def run_experiment(config: ExperimentConfig, dataset: SeriesDataset | None = None) -> RunReport:
    start_time = time.perf_counter()
    if dataset is None:
        if config.dataset is None:
            raise ValueError("config.dataset is unset and no dataset was passed")
        dataset = data_mod.load_dataset(
            config.dataset, adjacency_threshold=config.adjacency_threshold
        )
    ds = dataset
    metric_channel = config.metric_channel or ds.channels[0]
    metric_ci = ds.channels.index(metric_channel)
    plan = data_mod.make_split(
        ds.num_steps,
        config.split_scheme,
        train_fraction=config.train_fraction,
        k=config.folds,
    )
    root_ss = np.random.SeedSequence(config.seed)
    fold_seeds = root_ss.spawn(len(plan.folds))
    fold_mses = []
    records = []
    node_sq = {node: [0.0, 0] for node in ds.node_ids}
    total_traffic = exchange_mod.TrafficLedger()
    train_window_count = 0
    for fold_idx, (train_segments, test_segment) in enumerate(plan.folds):
        if config.variant == "knn":
            fold_records = _run_knn_fold(
                config, ds, train_segments, test_segment, metric_ci
            )
            ledger = exchange_mod.TrafficLedger()
        else:
            fold_records, ledger, n_train = _run_lstm_fold(
                config, ds, train_segments, test_segment, metric_ci,
                fold_seeds[fold_idx],
            )
            train_window_count += n_train
            for (s, r), (m, b) in ledger.counts.items():
                msgs, total = total_traffic.counts.get((s, r), (0, 0))
                total_traffic.counts[(s, r)] = (msgs + m, total + b)
        preds = [rec["predicted"] for rec in fold_records]
        actuals = [rec["actual"] for rec in fold_records]
        fold_mses.append(distributed_mse(preds, actuals))
        for rec in fold_records:
            rec["fold"] = fold_idx
            acc = node_sq[rec["node"]]
            acc[0] += (rec["predicted"] - rec["actual"]) ** 2
            acc[1] += 1
        records.extend(fold_records)
    aggregate = float(np.mean(fold_mses))
    per_node = {
        node: (sq / n if n else float("nan")) for node, (sq, n) in node_sq.items()
    }
    test_window_total = sum(
        test[1] - test[0] - config.window for _, test in plan.folds
    )
    report = RunReport(
        config=asdict(config),
        aggregate_mse=aggregate,
        per_fold_mse=fold_mses,
        per_node_mse=per_node,
        records=records,
        traffic={
            "total_messages": total_traffic.total_messages,
            "total_bytes": total_traffic.total_bytes,
            "per_edge": [list(r) for r in total_traffic.rows()],
            "centralized_baseline_bytes": _centralized_baseline_bytes(
                ds, train_window_count + test_window_total
            ),
        },
    )
    report.wall_clock_seconds = time.perf_counter() - start_time
    if config.output_dir:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        _write_predictions_csv(out / "predictions.csv", [report])
        with open(out / "traffic.csv", "w") as fh:
            fh.write("sender,receiver,messages,bytes\n")
            for s, r, m, b in total_traffic.rows():
                fh.write(f"{s},{r},{m},{b}\n")
    return report


def _run_knn_fold(config, ds, train_segments, test_segment, metric_ci):
    store = models_mod.KnnStore(window=config.window)
    models_mod.knn_fit(store, ds.values, train_segments)
    a, b = test_segment
    fold_records = []
    for t in range(a, b - config.window):
        labels = models_mod.knn_predict(store, ds.values[:, :, t : t + config.window])
        for ni, node in enumerate(ds.node_ids):
            fold_records.append(
                {
                    "node": node,
                    "time": t + config.window,
                    "actual": float(ds.values[ni, metric_ci, t + config.window]),
                    "predicted": float(labels[ni, metric_ci]),
                }
            )
    return fold_records


def _run_lstm_fold(config, ds, train_segments, test_segment, metric_ci, fold_ss):
    w = config.window
    init_ss, batch_ss, noise_ss = fold_ss.spawn(3)
    n = len(ds.node_ids)
    init_rngs = {
        node: np.random.default_rng(s)
        for node, s in zip(ds.node_ids, init_ss.spawn(n))
    }
    batch_rngs = {
        node: np.random.default_rng(s)
        for node, s in zip(ds.node_ids, batch_ss.spawn(n))
    }
    noise_rngs = {
        node: np.random.default_rng(s)
        for node, s in zip(ds.node_ids, noise_ss.spawn(n))
    }
    specs = _bin_specs(ds, train_segments, config.bins)
    train_windows = {
        node: [
            win
            for a, b in train_segments
            if b - a > w
            for win in data_mod.make_windows(ds, node, w, a, b)
        ]
        for node in ds.node_ids
    }
    train_starts = sorted({t for wins in train_windows.values() for t, _, _ in wins})
    a, b = test_segment
    test_starts = list(range(a, b - w))
    models = {
        node: models_mod.build_model(
            config.variant if config.variant != "knn" else "local",
            w,
            config.bins,
            len(ds.channels),
            config.hidden,
            init_rngs[node],
            learning_rate=config.learning_rate,
            share_lstm=config.share_lstm,
        )
        for node in ds.node_ids
    }
    todense = config.variant == "todense"
    bus = exchange_mod.MessageBus(ds.graph, require_epsilon=config.epsilon is not None)
    own_hists = {}
    if todense:
        own_hists = {
            node: _own_histograms(ds, node, train_starts + test_starts, specs, w)
            for node in ds.node_ids
        }

    def provider(node):
        if not todense:
            return None

        def get(window_index):
            cols = [
                bus.resolve_input_histogram(
                    node, window_index, channel, own_hists[node], w
                )
                for channel in ds.channels
            ]
            return np.stack(cols, axis=1)  # bins x C

        return get

    for epoch in range(config.epochs):
        if todense and (epoch == 0 or not config.reuse_noise):
            if epoch > 0:
                bus.clear()
            _publish_all(
                bus, ds, train_starts, specs, w, config.epsilon, own_hists, noise_rngs
            )
        for node in ds.node_ids:
            models_mod.train_epoch(
                models[node],
                train_windows[node],
                provider(node),
                config.batch_size,
                batch_rngs[node],
            )
    if todense:
        _publish_all(
            bus, ds, test_starts, specs, w, config.epsilon, own_hists, noise_rngs
        )
    fold_records = []
    for node in ds.node_ids:
        ni = ds.graph.index_of(node)
        node_vals = ds.values[ni]
        batch_windows = np.stack(
            [node_vals[:, t : t + w].T for t in test_starts]
        )
        if todense:
            get = provider(node)
            hist = np.stack([get(t) for t in test_starts])
        else:
            hist = None
        preds = models_mod.predict(models[node], batch_windows, hist)
        for k, t in enumerate(test_starts):
            fold_records.append(
                {
                    "node": node,
                    "time": t + w,
                    "actual": float(node_vals[metric_ci, t + w]),
                    "predicted": float(preds[k, metric_ci]),
                }
            )
    n_train_published = len(train_starts) * (
        config.epochs if (todense and not config.reuse_noise) else (1 if todense else 0)
    )
    return fold_records, bus.ledger, n_train_published


def _write_predictions_csv(path, reports, node=None, start=None, stop=None):
    """CSV with columns: index, actual, one prediction column per variant."""
    variants = []
    by_variant = {}
    actuals = {}
    for report in reports:
        name = report.config["variant"]
        if report.config.get("epsilon") is not None:
            name = f"{name}-{report.config['epsilon']}"
        variants.append(name)
        series = {}
        for rec in report.records:
            if node is not None and rec["node"] != node:
                continue
            series[rec["time"]] = rec["predicted"]
            actuals[rec["time"]] = rec["actual"]
        by_variant[name] = series
    if node is not None and not actuals:
        raise ValueError(f"no prediction records for node {node!r}")
    times = sorted(actuals)
    if start is not None or stop is not None:
        times = [t for t in times if (start is None or t >= start) and (stop is None or t < stop)]
        want = None if (start is None or stop is None) else stop - start
        if want is not None and len(times) != want:
            raise ValueError(
                f"requested range [{start}, {stop}) but only {len(times)} "
                "records are available"
            )
    with open(path, "w") as fh:
        fh.write("index,actual," + ",".join(variants) + "\n")
        for t in times:
            row = [str(t), repr(actuals[t])]
            for name in variants:
                value = by_variant[name].get(t)
                row.append("" if value is None else repr(value))
            fh.write(",".join(row) + "\n")


def dump_predictions(reports, path, node=None, start=None, stop=None):
    """Write the plot-ready prediction CSV for one node and index range."""
    if not isinstance(reports, (list, tuple)):
        reports = [reports]
    _write_predictions_csv(path, reports, node=node, start=start, stop=stop)
