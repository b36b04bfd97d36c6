"""Central finite-difference oracle for checking analytic gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .diffcore import Graph, ParamStore, Tensor, backward


def analytic_grads(loss_fn: Callable[[ParamStore], Tensor], store: ParamStore) -> dict[str, np.ndarray]:
    with Graph() as g:
        loss = loss_fn(store)
    return backward(loss, g, store)


def numeric_grads(loss_fn: Callable[[ParamStore], Tensor], store: ParamStore, h: float = 1e-5) -> dict[str, np.ndarray]:
    out = {}
    for name in store.names():
        base = store[name].copy()
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            bumped = base.copy()
            bumped[idx] = base[idx] + h
            store.set(name, bumped)
            up = float(loss_fn(store).data)
            bumped[idx] = base[idx] - h
            store.set(name, bumped)
            down = float(loss_fn(store).data)
            grad[idx] = (up - down) / (2.0 * h)
        store.set(name, base)
        out[name] = grad
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / scale


def max_relative_error(loss_fn: Callable[[ParamStore], Tensor], store: ParamStore, h: float = 1e-5) -> tuple[float, str]:
    """Worst per-parameter relative error between analytic and numeric gradients."""
    ana = analytic_grads(loss_fn, store)
    num = numeric_grads(loss_fn, store, h)
    worst, worst_name = 0.0, ""
    for name in store.names():
        err = relative_error(ana[name], num[name])
        if err > worst:
            worst, worst_name = err, name
    return worst, worst_name
