"""Central finite-difference gradient checking.

Relative error is measured against the gradient's own scale:
``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)``.
Elementwise ratios blow up on near-zero entries and say nothing useful
about correctness there.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tape import Tape
from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_grad(
    loss_fn: Callable[[], Tensor],
    param: Tensor,
    h: float = 1e-5,
    coords: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. ``param`` (mutated and restored)."""
    flat = param.data.reshape(-1)
    coords = np.arange(flat.size) if coords is None else np.asarray(coords)
    out = np.empty(len(coords))
    for j, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        fp = float(loss_fn().data.reshape(-1)[0])
        flat[c] = orig - h
        fm = float(loss_fn().data.reshape(-1)[0])
        flat[c] = orig
        out[j] = (fp - fm) / (2.0 * h)
    return out


def analytic_grads(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    saved = [(p.requires_grad, p.grad) for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p, (rg, g) in zip(params, saved):
        p.requires_grad, p.grad = rg, g
    return grads


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Largest relative error over ``params``; samples coordinates when asked."""
    grads = analytic_grads(loss_fn, params)
    worst = 0.0
    rng = rng if rng is not None else np.random.default_rng(0)
    for p, g in zip(params, grads):
        n = p.data.size
        if max_coords is not None and n > max_coords:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        else:
            coords = np.arange(n)
        num = numeric_grad(loss_fn, p, h=h, coords=coords)
        worst = max(worst, relative_error(g.reshape(-1)[coords], num))
    return worst
