from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .config import TrainConfig
from .errors import NumericError


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def learning_rate_at(cfg: TrainConfig, step: int) -> float:
    """Constant rate with optional linear warm-up over ``warmup_steps``."""
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.learning_rate * step / cfg.warmup_steps
    return cfg.learning_rate


def adamw_step(
    params: dict[str, Tensor],
    state: AdamState,
    cfg: TrainConfig,
    frozen_rows: Optional[dict[str, Sequence[int]]] = None,
) -> None:
    """One decoupled-weight-decay Adam update of every param with ``requires_grad``.

    Parameters whose grad is ``None`` are treated as having a zero gradient.
    ``frozen_rows`` maps a param name to row indices that must stay bit-exact
    (weight decay included). All grads are validated before anything is
    modified.
    """
    live = {k: p for k, p in params.items() if p.requires_grad}
    bad = [k for k, p in live.items() if p.grad is not None and not np.all(np.isfinite(p.grad))]
    if bad:
        raise NumericError(f"non-finite gradient in {', '.join(sorted(bad))}; step skipped")
    state.step += 1
    t = state.step
    lr = learning_rate_at(cfg, t)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in live.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        rows = (frozen_rows or {}).get(name)
        keep = p.data[rows].copy() if rows is not None and len(rows) else None
        p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        if keep is not None:
            p.data[rows] = keep
