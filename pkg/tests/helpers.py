"""Shared builders for tests: randomised networks and fixed affine flows."""

import numpy as np

from hybridflow.flow import build_flow
from hybridflow.made import build_made


def randomize(params: dict, rng, scale=0.3):
    for t in params.values():
        t.data = rng.normal(scale=scale, size=t.shape)


def random_made(d, c, hidden=(16,), seed=0, scale=0.3):
    net = build_made(d, c, hidden, seed=seed)
    randomize(net.params, np.random.default_rng(seed + 100), scale)
    return net


def random_flow(d, c, n_layers=3, seed=0, scale=0.3):
    flow = build_flow(d, c, n_layers, hidden=(16,), base_hidden=8, seed=seed)
    rng = np.random.default_rng(seed + 200)
    for layer in flow.layers:
        randomize(layer.params, rng, scale)
    randomize(flow.base.params, rng, scale)
    return flow


def affine_flow(c=1, shift=1.0, log_scale=np.log(2.0)):
    """One-layer flow ``y = exp(log_scale) * z + shift`` over a standard normal base."""
    flow = build_flow(1, c, n_layers=1)
    flow.layers[0].params["bout"].data = np.array([shift, log_scale])
    return flow


def numerical_jacobian(fn, y, eps=1e-6):
    y = np.asarray(y, dtype=np.float64)
    cols = []
    for j in range(y.size):
        hi, lo = y.copy(), y.copy()
        hi[j] += eps
        lo[j] -= eps
        cols.append((fn(hi) - fn(lo)) / (2 * eps))
    return np.stack(cols, axis=1)
