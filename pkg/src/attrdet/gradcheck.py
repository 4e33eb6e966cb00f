"""Central-difference gradient checking for functions built on :mod:`attrdet.tensor`."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, active_tape, no_grad


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, step: float = 1e-6,
                   max_entries: int | None = None, rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``x``.

    Returns (flat indices probed, derivative estimates). With ``max_entries``
    a random subset of entries is probed.
    """
    # perturbations must land in x.data itself, so no copying reshape
    x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
    est = np.empty(len(idx))
    with no_grad():
        for n, i in enumerate(idx):
            orig = flat[i]
            h = step * max(1.0, abs(float(orig)))
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            est[n] = (fp - fm) / (2 * h)
    return idx, est


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the largest gradient magnitude involved."""
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-6,
                    max_entries: int | None = None, seed: int = 0) -> dict[int, float]:
    """Compare backprop against central differences for every input.

    Returns {input position: max relative error}.
    """
    for x in inputs:
        x.grad = None
    active_tape().clear()
    out = fn()
    out.backward()
    rng = np.random.default_rng(seed)
    errs = {}
    for n, x in enumerate(inputs):
        analytic = np.zeros(x.data.size) if x.grad is None else x.grad.reshape(-1).astype(np.float64)
        idx, num = numerical_grad(fn, x, step=step, max_entries=max_entries, rng=rng)
        errs[n] = max_relative_error(analytic[idx], num)
    return errs
