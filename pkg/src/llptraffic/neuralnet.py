"""Minimal dense-tensor neural stack with hand-derived gradients.

Layers: LSTM cell (scalar input per timestep) with an h->1 output
projection, ReLU, a per-timestep channel-mixing linear layer initialized
to identity, a channelwise dense head, instance normalization, batch MSE
and ADAM. Everything is plain numpy in double precision; every backward
pass is checked against central finite differences in the test suite.

Parameters travel as flat ``dict[str, np.ndarray]`` blocks so one ADAM
state can own an arbitrary composition of layers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GradientError(ValueError):
    """Raised when a gradient block contains NaN."""


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------- LSTM

LSTM_GATES = ("i", "f", "o", "c")


def init_lstm(hidden: int, rng: np.random.Generator) -> dict:
    """Canonical LSTM parameters for scalar per-timestep input.

    Forget-gate bias starts at 1, everything else uniform in
    [-1/sqrt(h), 1/sqrt(h)].
    """
    bound = 1.0 / np.sqrt(hidden)
    p = {}
    for g in LSTM_GATES:
        p[f"w_{g}"] = rng.uniform(-bound, bound, size=hidden)
        p[f"u_{g}"] = rng.uniform(-bound, bound, size=(hidden, hidden))
        p[f"b_{g}"] = rng.uniform(-bound, bound, size=hidden)
    p["b_f"] = np.ones(hidden)
    p["proj"] = rng.uniform(-bound, bound, size=hidden)
    # positive projection bias keeps the downstream ReLU in its active
    # region at the start; a negative draw here can dead-zero the whole
    # time-feature path before training begins
    p["proj_b"] = np.array(1.0)
    return p


def lstm_forward(params: dict, series: np.ndarray):
    """Run the recurrence over a (batch, w) series of scalars.

    Returns the (batch, w) per-timestep projected outputs and a cache for
    backprop. Initial hidden and cell state are zero.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] == 0:
        raise ValueError("series must contain at least one timestep")
    bad = np.argwhere(np.isnan(x))
    if bad.size:
        raise ValueError(f"NaN input at timestep {int(bad[0][1])}")
    batch, w = x.shape
    hidden = params["proj"].shape[0]
    h = np.zeros((batch, hidden))
    c = np.zeros((batch, hidden))
    out = np.zeros((batch, w))
    cache = {"x": x, "h": [h], "c": [c], "gates": []}
    for t in range(w):
        xt = x[:, t : t + 1]
        i = sigmoid(xt * params["w_i"] + h @ params["u_i"].T + params["b_i"])
        f = sigmoid(xt * params["w_f"] + h @ params["u_f"].T + params["b_f"])
        o = sigmoid(xt * params["w_o"] + h @ params["u_o"].T + params["b_o"])
        g = np.tanh(xt * params["w_c"] + h @ params["u_c"].T + params["b_c"])
        c = f * cache["c"][-1] + i * g
        h = o * np.tanh(c)
        out[:, t] = h @ params["proj"] + params["proj_b"]
        cache["gates"].append((i, f, o, g))
        cache["h"].append(h)
        cache["c"].append(c)
    return out, cache


def lstm_backward(params: dict, cache: dict, d_out: np.ndarray) -> dict:
    """Backpropagate through time; returns gradients keyed like the params."""
    x = cache["x"]
    batch, w = x.shape
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dh_next = np.zeros_like(cache["h"][0])
    dc_next = np.zeros_like(cache["c"][0])
    for t in range(w - 1, -1, -1):
        i, f, o, g = cache["gates"][t]
        h_prev = cache["h"][t]
        c_prev = cache["c"][t]
        c_t = cache["c"][t + 1]
        h_t = cache["h"][t + 1]
        dyt = d_out[:, t]
        grads["proj"] += dyt @ h_t
        grads["proj_b"] += dyt.sum()
        dh = dyt[:, None] * params["proj"] + dh_next
        tanh_c = np.tanh(c_t)
        do = dh * tanh_c
        dc = dh * o * (1.0 - tanh_c**2) + dc_next
        df = dc * c_prev
        di = dc * g
        dg = dc * i
        da = {
            "i": di * i * (1.0 - i),
            "f": df * f * (1.0 - f),
            "o": do * o * (1.0 - o),
            "c": dg * (1.0 - g**2),
        }
        xt = x[:, t : t + 1]
        dh_next = np.zeros_like(dh)
        for gate, dag in da.items():
            grads[f"w_{gate}"] += (dag * xt).sum(axis=0)
            grads[f"u_{gate}"] += dag.T @ h_prev
            grads[f"b_{gate}"] += dag.sum(axis=0)
            dh_next += dag @ params[f"u_{gate}"]
        dc_next = dc * f
    return grads


# ---------------------------------------------------------------- ReLU


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, x)


def relu_backward(x: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0, d_out, 0.0)


# ------------------------------------------------- local linear layer


def init_local_linear(w: int, channels: int) -> dict:
    """Per-timestep CxC mixing matrices, identity at construction."""
    return {
        "mix": np.tile(np.eye(channels), (w, 1, 1)),
        "bias": np.zeros((w, channels)),
    }


def local_linear_forward(params: dict, features: np.ndarray):
    """features: (batch, w, C) -> (batch, w, C); one matrix per timestep."""
    feats = np.asarray(features, dtype=float)
    w, channels, _ = params["mix"].shape
    if feats.shape[-2:] != (w, channels):
        raise ValueError(
            f"expected trailing shape ({w}, {channels}), got {feats.shape[-2:]}"
        )
    out = np.einsum("tij,btj->bti", params["mix"], feats) + params["bias"]
    return out, feats


def local_linear_backward(params: dict, feats: np.ndarray, d_out: np.ndarray):
    grads = {
        "mix": np.einsum("bti,btj->tij", d_out, feats),
        "bias": d_out.sum(axis=0),
    }
    d_feats = np.einsum("tij,bti->btj", params["mix"], d_out)
    return grads, d_feats


# --------------------------------------------------------- dense head


def init_dense(w: int, bin_count: int, channels: int, rng: np.random.Generator) -> dict:
    """Per-channel weight vector over concat(time features, histogram)."""
    width = w + bin_count
    bound = 1.0 / np.sqrt(width)
    return {
        "weight": rng.uniform(-bound, bound, size=(channels, width)),
        "bias": np.zeros(channels),
    }


def dense_forward(params: dict, time_features: np.ndarray, hist_features: np.ndarray):
    """Channelwise affine head; channels never mix here.

    time_features: (batch, w, C), hist_features: (batch, bins, C).
    Returns (batch, C) predictions and the concatenated inputs.
    """
    channels, width = params["weight"].shape
    inputs = np.concatenate([time_features, hist_features], axis=1)
    if inputs.shape[1:] != (width, channels):
        raise ValueError(
            f"expected concatenated shape ({width}, {channels}), "
            f"got {inputs.shape[1:]}"
        )
    out = np.einsum("cw,bwc->bc", params["weight"], inputs) + params["bias"]
    return out, inputs


def dense_backward(params: dict, inputs: np.ndarray, d_out: np.ndarray, w: int):
    grads = {
        "weight": np.einsum("bc,bwc->cw", d_out, inputs),
        "bias": d_out.sum(axis=0),
    }
    d_inputs = np.einsum("cw,bc->bwc", params["weight"], d_out)
    return grads, d_inputs[:, :w, :], d_inputs[:, w:, :]


# ---------------------------------------------------- instance norm

STD_FLOOR = 1e-8


def instance_norm(series: np.ndarray, axis: int = -1):
    """Standardize over the time axis with population std.

    Returns (normalized, mean, std). A (near-)constant series maps to
    zeros and its std is reported as 0 so the inverse returns the
    constant.
    """
    x = np.asarray(series, dtype=float)
    mean = x.mean(axis=axis, keepdims=True)
    std = x.std(axis=axis, keepdims=True)
    degenerate = std < STD_FLOOR
    safe_std = np.where(degenerate, 1.0, std)
    normed = np.where(degenerate, 0.0, (x - mean) / safe_std)
    return normed, mean, np.where(degenerate, 0.0, std)


def instance_denorm(normed: np.ndarray, mean: np.ndarray, std: np.ndarray):
    """Inverse of :func:`instance_norm`; constants come back as the mean."""
    return np.where(std == 0.0, mean, normed * np.where(std == 0.0, 1.0, std) + mean)


# -------------------------------------------------------------- loss


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Batch-normalized squared error and its gradient w.r.t. pred."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("empty batch")
    diff = pred - target
    loss = float(np.mean(diff**2))
    grad = 2.0 * diff / diff.size
    return loss, grad


# -------------------------------------------------------------- ADAM


@dataclass
class AdamState:
    """Per-parameter moment accumulators for the ADAM update."""

    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> None:
    """One in-place ADAM update with bias correction."""
    state.step += 1
    t = state.step
    for key, g in grads.items():
        if np.any(np.isnan(g)):
            raise GradientError(f"NaN gradient in parameter block {key!r}")
        if key not in state.m:
            state.m[key] = np.zeros_like(params[key])
            state.v[key] = np.zeros_like(params[key])
        state.m[key] = state.beta1 * state.m[key] + (1 - state.beta1) * g
        state.v[key] = state.beta2 * state.v[key] + (1 - state.beta2) * g**2
        m_hat = state.m[key] / (1 - state.beta1**t)
        v_hat = state.v[key] / (1 - state.beta2**t)
        params[key] = params[key] - state.learning_rate * m_hat / (
            np.sqrt(v_hat) + state.eps
        )


# ------------------------------------------------------- checkpoints


def params_to_jsonable(params: dict) -> dict:
    return {
        k: {"shape": list(np.shape(v)), "data": np.asarray(v).ravel().tolist()}
        for k, v in params.items()
    }


def params_from_jsonable(blob: dict) -> dict:
    out = {}
    for k, entry in blob.items():
        arr = np.array(entry["data"], dtype=float).reshape(entry["shape"])
        out[k] = arr
    return out
