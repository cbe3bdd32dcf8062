import numpy as np
import pytest


def flatten_params(params):
    keys = sorted(params)
    vec = np.concatenate([np.ravel(params[k]) for k in keys]) if keys else np.array([])
    return vec, keys


def unflatten_params(vec, template, keys):
    out = {}
    i = 0
    for k in keys:
        size = np.size(template[k])
        out[k] = np.array(vec[i : i + size]).reshape(np.shape(template[k]))
        i += size
    return out


def finite_diff_check(loss_fn, params, analytic, step=1e-5, tol=1e-4):
    """Central finite differences against analytic grads; returns max rel error.

    Relative error uses max(1, |a|, |n|) as denominator so near-zero
    gradients do not blow up the ratio.
    """
    vec, keys = flatten_params(params)
    avec, _ = flatten_params(
        {k: analytic.get(k, np.zeros_like(v)) for k, v in params.items()}
    )
    num = np.zeros_like(vec)
    for i in range(len(vec)):
        up = vec.copy()
        up[i] += step
        down = vec.copy()
        down[i] -= step
        num[i] = (
            loss_fn(unflatten_params(up, params, keys))
            - loss_fn(unflatten_params(down, params, keys))
        ) / (2 * step)
    err = np.abs(avec - num) / np.maximum(1.0, np.maximum(np.abs(avec), np.abs(num)))
    worst = float(err.max())
    assert worst < tol, f"gradient mismatch: max relative error {worst:.2e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
