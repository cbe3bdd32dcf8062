"""The evaluated predictors: LabelProportion Local / ToDense and the kNN baseline.

The two LSTM variants share one code path: "local" is "todense" with a
zero histogram input, which makes the reduction property (zeroed
histogram weights == local) directly testable and keeps gradients for
the histogram weight block exactly zero in local runs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import neuralnet as nn

VARIANTS = ("local", "todense")


class VariantUsageError(ValueError):
    """Histogram input supplied to (or missing from) the wrong variant."""


def _sub(params: dict, prefix: str) -> dict:
    p = prefix + "/"
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def _merge(grads: dict, prefix: str, block: dict) -> None:
    for k, v in block.items():
        key = f"{prefix}/{k}"
        if key in grads:
            grads[key] = grads[key] + v
        else:
            grads[key] = v


@dataclass
class NodeModel:
    """One node's LSTM -> ReLU -> LocalLinear -> Dense stack plus optimizer state."""

    variant: str
    window: int
    bins: int
    channels: int
    hidden: int
    share_lstm: bool
    params: dict
    adam: nn.AdamState

    @property
    def epsilon_checked(self):
        return self.variant == "todense"


def build_model(
    variant: str,
    window: int,
    bins: int,
    channels: int,
    hidden: int,
    rng: np.random.Generator,
    learning_rate: float = 0.01,
    share_lstm: bool = False,
) -> NodeModel:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    params: dict = {}
    n_lstm = 1 if share_lstm else channels
    for i in range(n_lstm):
        _merge(params, f"lstm{i}", nn.init_lstm(hidden, rng))
    _merge(params, "ll", nn.init_local_linear(window, channels))
    _merge(params, "dense", nn.init_dense(window, bins, channels, rng))
    return NodeModel(
        variant=variant,
        window=window,
        bins=bins,
        channels=channels,
        hidden=hidden,
        share_lstm=share_lstm,
        params=params,
        adam=nn.AdamState(learning_rate=learning_rate),
    )


def forward(model: NodeModel, windows: np.ndarray, hist: np.ndarray | None):
    """Predict (batch, C) from normalized (batch, w, C) windows.

    ``hist`` is (batch, bins, C) neighbor proportions for the todense
    variant and must be absent for local.
    """
    x = np.asarray(windows, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (model.window, model.channels):
        raise ValueError(
            f"expected window shape ({model.window}, {model.channels}), got {x.shape[1:]}"
        )
    if model.variant == "local":
        if hist is not None:
            raise VariantUsageError("local variant takes no histogram input")
        hist = np.zeros((x.shape[0], model.bins, model.channels))
    else:
        if hist is None:
            raise VariantUsageError("todense variant requires a histogram input")
        hist = np.asarray(hist, dtype=float)
        if hist.ndim == 2:
            hist = hist[None]
        if hist.shape != (x.shape[0], model.bins, model.channels):
            raise ValueError(
                f"expected histogram shape ({x.shape[0]}, {model.bins}, "
                f"{model.channels}), got {hist.shape}"
            )
    batch = x.shape[0]
    proj = np.empty((batch, model.window, model.channels))
    lstm_caches = []
    for c in range(model.channels):
        li = 0 if model.share_lstm else c
        out, cache = nn.lstm_forward(_sub(model.params, f"lstm{li}"), x[:, :, c])
        proj[:, :, c] = out
        lstm_caches.append(cache)
    activated = nn.relu(proj)
    ll_out, ll_feats = nn.local_linear_forward(_sub(model.params, "ll"), activated)
    preds, dense_inputs = nn.dense_forward(_sub(model.params, "dense"), ll_out, hist)
    cache = {
        "proj": proj,
        "lstm": lstm_caches,
        "ll_feats": ll_feats,
        "dense_inputs": dense_inputs,
    }
    return preds, cache


def backward(model: NodeModel, cache: dict, d_preds: np.ndarray) -> dict:
    """Gradients of all parameter blocks for a given output gradient."""
    grads: dict = {}
    dense_grads, d_time, _d_hist = nn.dense_backward(
        _sub(model.params, "dense"), cache["dense_inputs"], d_preds, model.window
    )
    _merge(grads, "dense", dense_grads)
    ll_grads, d_activated = nn.local_linear_backward(
        _sub(model.params, "ll"), cache["ll_feats"], d_time
    )
    _merge(grads, "ll", ll_grads)
    d_proj = nn.relu_backward(cache["proj"], d_activated)
    for c in range(model.channels):
        li = 0 if model.share_lstm else c
        block = nn.lstm_backward(
            _sub(model.params, f"lstm{li}"), cache["lstm"][c], d_proj[:, :, c]
        )
        _merge(grads, f"lstm{li}", block)
    return grads


def _normalize_batch(windows: np.ndarray, targets: np.ndarray | None):
    """Instance-normalize each window per channel over its own time axis."""
    normed, mean, std = nn.instance_norm(windows, axis=1)
    if targets is None:
        return normed, mean, std, None
    safe = np.where(std[:, 0, :] == 0.0, 1.0, std[:, 0, :])
    norm_targets = (targets - mean[:, 0, :]) / safe
    return normed, mean, std, norm_targets


def train_epoch(model: NodeModel, node_windows, hist_provider, batch_size: int, rng):
    """One pass over the node's windows in shuffled mini-batches.

    ``node_windows`` is a list of (window_index, raw w x C window, raw C
    target). ``hist_provider(window_index)`` returns (bins, C) neighbor
    proportions, or None for the local variant. Inputs and targets are
    instance-normalized per window; returns the mean batch loss.
    """
    if not node_windows:
        raise ValueError("need at least one complete window to train")
    order = rng.permutation(len(node_windows))
    losses = []
    for start in range(0, len(order), batch_size):
        batch = [node_windows[i] for i in order[start : start + batch_size]]
        raw = np.stack([w for _, w, _ in batch])
        targets = np.stack([t for _, _, t in batch])
        normed, _, _, norm_targets = _normalize_batch(raw, targets)
        if model.variant == "todense":
            hist = np.stack([hist_provider(idx) for idx, _, _ in batch])
        else:
            hist = None
        preds, cache = forward(model, normed, hist)
        loss, d_preds = nn.mse_loss(preds, norm_targets)
        grads = backward(model, cache, d_preds)
        nn.adam_step(model.adam, model.params, grads)
        for key, value in model.params.items():
            if not np.all(np.isfinite(value)):
                raise nn.GradientError(f"non-finite parameters in block {key!r}")
        losses.append(loss)
    return float(np.mean(losses))


def predict(model: NodeModel, windows: np.ndarray, hist: np.ndarray | None):
    """Forward pass in original data space (normalize, predict, denormalize)."""
    x = np.asarray(windows, dtype=float)
    single = x.ndim == 2
    if single:
        x = x[None]
    normed, mean, std, _ = _normalize_batch(x, None)
    preds, _ = forward(model, normed, hist)
    out = nn.instance_denorm(preds, mean[:, 0, :], std[:, 0, :])
    return out[0] if single else out


# ------------------------------------------------------------- checkpoints


def save_checkpoint(model: NodeModel, path) -> None:
    blob = {
        "format": "llptraffic-checkpoint-v1",
        "meta": {
            "variant": model.variant,
            "window": model.window,
            "bins": model.bins,
            "channels": model.channels,
            "hidden": model.hidden,
            "share_lstm": model.share_lstm,
            "learning_rate": model.adam.learning_rate,
        },
        "params": nn.params_to_jsonable(model.params),
    }
    with open(path, "w") as fh:
        json.dump(blob, fh)


def load_checkpoint(path) -> NodeModel:
    with open(path) as fh:
        blob = json.load(fh)
    if blob.get("format") != "llptraffic-checkpoint-v1":
        raise ValueError(f"unrecognized checkpoint format in {path}")
    meta = blob["meta"]
    model = NodeModel(
        variant=meta["variant"],
        window=meta["window"],
        bins=meta["bins"],
        channels=meta["channels"],
        hidden=meta["hidden"],
        share_lstm=meta["share_lstm"],
        params=nn.params_from_jsonable(blob["params"]),
        adam=nn.AdamState(learning_rate=meta["learning_rate"]),
    )
    return model


# ------------------------------------------------------------- kNN baseline


@dataclass
class KnnStore:
    """Memorized whole-graph 12-step windows with their next-step labels."""

    window: int
    windows: list = field(default_factory=list)  # flattened (w * N * C,) arrays
    labels: list = field(default_factory=list)  # (N, C) arrays

    def __len__(self):
        return len(self.windows)


def knn_fit(store: KnnStore, values: np.ndarray, segments) -> KnnStore:
    """Memorize every sliding window inside the given (start, stop) segments.

    ``values`` is the full node x channel x time array; windows never
    cross segment boundaries.
    """
    store.windows.clear()
    store.labels.clear()
    w = store.window
    stored = 0
    for start, stop in segments:
        if stop - start <= w:
            continue
        for t in range(start, stop - w):
            snap = values[:, :, t : t + w]  # N x C x w
            store.windows.append(snap.reshape(-1).astype(float))
            store.labels.append(values[:, :, t + w].astype(float))
            stored += 1
    if stored == 0:
        raise ValueError("training series too short: no complete window fits")
    return store


def knn_predict(store: KnnStore, query: np.ndarray) -> np.ndarray:
    """Next-step labels of the closest stored window (k=1, Euclidean).

    Ties resolve to the lowest stored index.
    """
    if not store.windows:
        raise ValueError("empty kNN store")
    flat = np.asarray(query, dtype=float).reshape(-1)
    stacked = np.stack(store.windows)
    dists = np.sum((stacked - flat) ** 2, axis=1)
    return store.labels[int(np.argmin(dists))].copy()
