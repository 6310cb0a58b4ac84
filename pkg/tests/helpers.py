"""Shared oracles for the test suite."""
from __future__ import annotations

import numpy as np

from metal.config import DESK, HyperConfig
from metal.ndmath import MLP


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def fd_check_net(sizes, rng: np.random.Generator, n_coords: int | None = None,
                 h: float = 1e-5, batch: int = 4) -> float:
    """Worst relative error between backprop and central differences of a
    squared-error loss, over all parameters or ``n_coords`` random ones."""
    net = MLP(sizes, rng)
    for b in net.biases:
        b[...] = rng.normal(scale=0.1, size=b.shape)
    x = rng.normal(size=(batch, sizes[0]))
    y = rng.normal(size=(batch, sizes[-1]))

    def loss(flat):
        net.set_flat(flat)
        return 0.5 * float(np.sum((net(x) - y) ** 2))

    flat = net.get_flat().copy()
    out, cache = net.forward_cache(x)
    grads, _ = net.backward(cache, out - y)
    g = np.concatenate([a.ravel() for a in grads])
    idx = np.arange(flat.size) if n_coords is None else rng.choice(flat.size, n_coords,
                                                                     replace=False)
    fd = np.empty(idx.size)
    for j, i in enumerate(idx):
        e = flat.copy()
        e[i] += h
        up = loss(e)
        e[i] -= 2 * h
        fd[j] = (up - loss(e)) / (2 * h)
    net.set_flat(flat)
    return float(rel_err(g[idx], fd).max())


def tiny_hyper(**kw) -> HyperConfig:
    """A configuration small enough for unit tests (seconds, not minutes)."""
    base = dict(n_tasks=2, n_warmup=2, n_slbo=1, n_collect=60, n_inner=2, n_model=3,
                n_policy=1, n_trpo=40, horizon=20, model_hidden=(16, 16),
                policy_hidden=(8, 8), n_eval=3, n_test=2, n_boot=50, adapt_n_slbo=2,
                model_batch=16)
    base.update(kw)
    return DESK.with_(**base)
