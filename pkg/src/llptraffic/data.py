"""Dataset ingestion, windowing, splits and the synthetic generator.

Canonical on-disk format (one directory per dataset):
  meta.json        {"channels": [...], "interval_minutes": 5}
  <channel>.csv    rows = time, columns = node ids, header row
  adjacency.csv    first row/column node ids, numeric cells

Real datasets ship in assorted shapes; converters produce this layout
once and the core loader stays bit-exact and dependency-light.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import topology
from .topology import SensorGraph

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SeriesDataset:
    """node x channel x time array plus graph and metadata."""

    values: np.ndarray
    node_ids: tuple
    channels: tuple
    interval_minutes: float
    graph: SensorGraph

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        n, c, t = vals.shape
        if n != len(self.node_ids):
            raise ValueError(f"{n} value rows but {len(self.node_ids)} node ids")
        if c != len(self.channels):
            raise ValueError(f"{c} channels in values but {len(self.channels)} names")
        if np.isnan(vals).any():
            raise ValueError("dataset contains NaN after load")
        if tuple(self.graph.node_ids) != tuple(self.node_ids):
            raise ValueError("graph node ids do not match dataset node ids")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "node_ids", tuple(self.node_ids))
        object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def num_steps(self) -> int:
        return self.values.shape[2]

    def series(self, node, channel) -> np.ndarray:
        return self.values[
            self.graph.index_of(node), self.channels.index(channel), :
        ]


@dataclass(frozen=True)
class SplitPlan:
    """Contiguous-in-time split: one (train_segments, test_segment) per fold."""

    scheme: str
    folds: tuple  # of (train_segments: tuple[(start, stop)], test: (start, stop))
    total_steps: int


def _impute(frame: pd.DataFrame, label: str) -> pd.DataFrame:
    """Forward-fill gaps (NaN or exact zero), back-fill leading ones."""
    masked = frame.mask(frame == 0.0)
    missing = int(masked.isna().sum().sum())
    if missing:
        log.info("%s: imputing %d missing/zero readings", label, missing)
    filled = masked.ffill().bfill()
    if filled.isna().any().any():
        raise ValueError(f"{label}: a column contains no usable readings")
    return filled


def load_dataset(path, adjacency_threshold: float = 0.0, impute: bool = True) -> SeriesDataset:
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"missing {meta_path}")
    meta = json.loads(meta_path.read_text())
    channels = tuple(meta["channels"])
    graph = topology.load_adjacency_csv(root / "adjacency.csv", adjacency_threshold)
    per_channel = []
    for channel in channels:
        frame = pd.read_csv(root / f"{channel}.csv")
        frame.columns = [str(c) for c in frame.columns]
        cols = tuple(frame.columns)
        if cols != tuple(graph.node_ids):
            raise ValueError(
                f"{channel}.csv columns do not match adjacency node ids "
                f"(first mismatch near {next((a for a, b in zip(cols, graph.node_ids) if a != b), cols[:3])!r})"
            )
        if impute:
            frame = _impute(frame, f"{channel}.csv")
        per_channel.append(frame.to_numpy(dtype=float).T)  # node x time
    values = np.stack(per_channel, axis=1)  # node x channel x time
    return SeriesDataset(
        values=values,
        node_ids=graph.node_ids,
        channels=channels,
        interval_minutes=float(meta.get("interval_minutes", 5)),
        graph=graph,
    )


def save_dataset(ds: SeriesDataset, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "meta.json").write_text(
        json.dumps(
            {"channels": list(ds.channels), "interval_minutes": ds.interval_minutes},
            indent=2,
        )
    )
    topology.save_adjacency_csv(ds.graph, root / "adjacency.csv")
    for ci, channel in enumerate(ds.channels):
        frame = pd.DataFrame(ds.values[:, ci, :].T, columns=list(ds.node_ids))
        frame.to_csv(root / f"{channel}.csv", index=False)


def make_windows(ds: SeriesDataset, node, w: int, start: int = 0, stop=None):
    """Sliding stride-1 (w x C input, C target) pairs within [start, stop).

    The target of the window starting at t is the value at t + w; window
    starts run up to stop - w - 1 inclusive, so count = length - w.
    """
    if stop is None:
        stop = ds.num_steps
    length = stop - start
    if length <= w:
        raise ValueError(f"segment length {length} must exceed window size {w}")
    node_vals = ds.values[ds.graph.index_of(node)]  # channel x time
    windows = []
    for t in range(start, stop - w):
        windows.append(
            (t, node_vals[:, t : t + w].T.copy(), node_vals[:, t + w].copy())
        )
    return windows


def make_split(total_steps: int, scheme: str, train_fraction: float = 0.8, k: int = 5) -> SplitPlan:
    """holdout -> contiguous prefix/suffix; kfold -> k contiguous test blocks."""
    if scheme == "holdout":
        cut = int(round(total_steps * train_fraction))
        if cut < 1 or cut >= total_steps:
            raise ValueError(f"T={total_steps} too small for holdout split")
        folds = ((((0, cut),), (cut, total_steps)),)
    elif scheme == "kfold":
        if total_steps < k:
            raise ValueError(f"T={total_steps} too small for {k} folds")
        edges = [round(i * total_steps / k) for i in range(k + 1)]
        folds = []
        for i in range(k):
            test = (edges[i], edges[i + 1])
            train = []
            if test[0] > 0:
                train.append((0, test[0]))
            if test[1] < total_steps:
                train.append((test[1], total_steps))
            folds.append((tuple(train), test))
        folds = tuple(folds)
    else:
        raise ValueError(f"unknown split scheme {scheme!r}")
    return SplitPlan(scheme=scheme, folds=folds, total_steps=total_steps)


DAY_STEPS = 288  # 5-minute intervals


def synth_generate(
    nodes: int,
    steps: int,
    seed: int,
    coupling: float = 1.0,
    obs_noise: float = 4.0,
    channels=("speed",),
) -> SeriesDataset:
    """Deterministic synthetic traffic on a ring graph.

    Each node observes ``coupling`` parts of a shared regional signal
    (daily sinusoid, rush-hour dips, slow AR(1) drift) plus
    ``1 - coupling`` parts of a private AR(1) series, plus independent
    observation noise. With coupling > 0 the neighbors' label histograms
    carry signal about a node's next value; with coupling = 0 the nodes
    are pairwise unrelated.
    """
    if nodes < 1:
        raise ValueError("need at least one node")
    if steps <= 24:
        raise ValueError("need more than 24 time steps")
    rng = np.random.default_rng(seed)
    t = np.arange(steps)
    day = t % DAY_STEPS
    base = 60.0 + 10.0 * np.sin(2 * np.pi * t / DAY_STEPS)
    for center, depth in ((96, 25.0), (216, 20.0)):  # morning / evening rush
        base = base - depth * np.exp(-((day - center) ** 2) / (2 * 12.0**2))

    def ar1(rho, sigma):
        innov = rng.normal(0.0, sigma, size=steps)
        out = np.empty(steps)
        out[0] = innov[0] / np.sqrt(1 - rho**2)
        for s in range(1, steps):
            out[s] = rho * out[s - 1] + innov[s]
        return out

    shared = base + ar1(0.98, 1.0)
    values = np.empty((nodes, len(channels), steps))
    if nodes == 1:
        edges = []
    elif nodes == 2:
        edges = [(0, 1)]
    else:
        edges = [(i, (i + 1) % nodes) for i in range(nodes)]
    for i in range(nodes):
        # short memory keeps spurious cross-correlations between
        # independent nodes small over a few thousand steps
        private = 60.0 + ar1(0.9, 1.0)
        signal = coupling * shared + (1.0 - coupling) * private
        for ci, _ in enumerate(channels):
            noise = rng.normal(0.0, obs_noise, size=steps)
            scale = 1.0 if ci == 0 else 0.5  # secondary channels shrunk, same shape
            values[i, ci] = scale * signal + noise
    node_ids = tuple(f"n{i}" for i in range(nodes))
    graph = topology.from_edges(
        node_ids, [(node_ids[a], node_ids[b]) for a, b in edges]
    )
    return SeriesDataset(
        values=values,
        node_ids=node_ids,
        channels=tuple(channels),
        interval_minutes=5.0,
        graph=graph,
    )
