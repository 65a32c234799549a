"""Central finite differences against the analytic backward pass."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .layers import Param


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def grad_check(
    forward: Callable[[np.ndarray], tuple[np.ndarray, object]],
    backward: Callable[[np.ndarray, object], np.ndarray],
    params: list[Param],
    x: np.ndarray,
    eps: float = 1e-4,
    seed: int = 0,
) -> float:
    """Max relative error of gradients w.r.t. every parameter and input entry.

    The scalar probed is ``sum(R * forward(x))`` for a fixed random ``R``;
    ``forward`` may also return a scalar loss, in which case ``R`` is 1.

    The default step balances roundoff in the difference quotient, which
    grows like ``1/eps``, against the ``eps**2`` truncation error of the
    central scheme. Much smaller steps let roundoff swamp small entries.
    """
    x = np.array(x, dtype=np.float64)
    y, cache = forward(x)
    y = np.asarray(y, dtype=np.float64)
    proj = np.random.default_rng(seed).standard_normal(y.shape) if y.ndim else np.float64(1.0)

    def objective(inp):
        out, _ = forward(inp)
        return float(np.sum(proj * np.asarray(out)))

    for p in params:
        p.zero_grad()
    dx = backward(proj if y.ndim else 1.0, cache)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        num = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = objective(x)
            flat[i] = old - eps
            fm = objective(x)
            flat[i] = old
            num.reshape(-1)[i] = (fp - fm) / (2 * eps)
        worst = max(worst, relative_error(a, num))

    if dx is not None:
        num = np.zeros_like(x)
        flat = x.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = objective(x)
            flat[i] = old - eps
            fm = objective(x)
            flat[i] = old
            num.reshape(-1)[i] = (fp - fm) / (2 * eps)
        worst = max(worst, relative_error(dx, num))
    return worst
