"""Contrastive objectives: symmetric InfoNCE plus queue-recycled hinge loss.

Total objective per step::

    L = L_batch + mean_over_batch(L_queue_i)

where ``L_queue_i`` sums ``l * exp(-beta * l)`` over every queued negative of
a different scene, with ``l = [margin - S(pos) + S(neg)]_+`` in both the
text-anchored (image queue) and image-anchored (text queue) directions.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, ops, scope
from .config import LossConfig
from .errors import ContractError, DegenerateInputError

_EXCLUDED = -1e30


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """``a . b / (|a| |b|)`` for two vectors; raises on a zero vector."""
    try:
        na = ops.l2_normalize(a, axis=-1)
        nb = ops.l2_normalize(b, axis=-1)
    except DegenerateInputError:
        raise DegenerateInputError("cosine similarity of a zero-norm vector") from None
    return ops.sum(ops.mul(na, nb), axis=-1)


@dataclass
class QueueEntry:
    embedding: np.ndarray
    scene_id: int
    age_counter: int


class NegativeQueue:
    """FIFO ring of detached embeddings tagged with their scene id."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ContractError("queue capacity must be >= 0")
        self.capacity = capacity
        self._entries: deque[QueueEntry] = deque(maxlen=capacity)
        self._pushes = 0

    @classmethod
    def for_batch(cls, batch_size: int, multiplier: int = 4) -> "NegativeQueue":
        return cls(batch_size * multiplier)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def push(self, embeddings, scene_ids: Sequence[int]) -> None:
        """Append a batch (oldest entries fall off the front)."""
        if isinstance(embeddings, Tensor):
            if embeddings.requires_grad or embeddings.node_id is not None:
                raise ContractError("queue_push needs detached embeddings; call .detach()")
            rows = embeddings.data
        else:
            if any(isinstance(e, Tensor) and (e.requires_grad or e.node_id is not None) for e in embeddings):
                raise ContractError("queue_push needs detached embeddings; call .detach()")
            rows = np.stack([e.data if isinstance(e, Tensor) else np.asarray(e, dtype=np.float64) for e in embeddings])
        rows = np.atleast_2d(rows)
        if len(rows) != len(scene_ids):
            raise ContractError("one scene id per embedding required")
        self._pushes += 1
        for row, sid in zip(rows, scene_ids):
            self._entries.append(QueueEntry(np.array(row, dtype=np.float64), int(sid), self._pushes))

    def negatives_for(self, positive_scene_id: int) -> list[np.ndarray]:
        return [e.embedding for e in self._entries if e.scene_id != positive_scene_id]

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """``(embeddings [Q, D], scene_ids [Q])``; Q may be 0."""
        if not self._entries:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        return (
            np.stack([e.embedding for e in self._entries]),
            np.array([e.scene_id for e in self._entries], dtype=np.int64),
        )

    def state(self) -> dict:
        emb, sid = self.arrays()
        ages = np.array([e.age_counter for e in self._entries], dtype=np.float64)
        return {"embeddings": emb, "scene_ids": sid.astype(np.float64), "ages": ages, "pushes": self._pushes}

    def load_state(self, emb: np.ndarray, scene_ids: np.ndarray, ages: np.ndarray, pushes: int) -> None:
        self._entries.clear()
        for row, sid, age in zip(np.atleast_2d(emb) if len(scene_ids) else [], scene_ids, ages):
            self._entries.append(QueueEntry(np.array(row), int(sid), int(age)))
        self._pushes = int(pushes)


def queue_push(queue: NegativeQueue, embeddings, scene_ids: Sequence[int]) -> None:
    queue.push(embeddings, scene_ids)


def queue_negatives_for(queue: NegativeQueue, positive_scene_id: int) -> list[np.ndarray]:
    return queue.negatives_for(positive_scene_id)


def difficulty_weight(l: Tensor, beta: float) -> Tensor:
    """``l * exp(-beta * l)``."""
    return ops.mul(l, ops.exp(ops.scalar_mul(l, -beta)))


def queue_loss(
    s_e: Tensor,
    v_e: Tensor,
    q_v: NegativeQueue,
    q_s: NegativeQueue,
    scene_id: int,
    cfg: LossConfig,
) -> Tensor:
    """Difficulty-weighted hinge loss of one positive pair against both queues."""
    total = Tensor(0.0)
    pos = cosine_similarity(s_e, v_e)
    for anchor, queue in ((s_e, q_v), (v_e, q_s)):
        negs = queue.negatives_for(scene_id)
        if not negs:
            continue
        neg_sim = cosine_similarity(ops.reshape(anchor, (1, -1)), Tensor(np.stack(negs)))
        hinge = ops.clamp_min(ops.add(ops.sub(neg_sim, pos), cfg.margin))
        total = ops.add(total, ops.sum(difficulty_weight(hinge, cfg.beta)))
    return total


@dataclass
class QueueTerms:
    loss: Tensor  # mean over batch of per-sample queue losses
    contributing: int  # number of (sample, negative) pairs passing the scene filter


def batch_queue_loss(
    s: Tensor,
    v: Tensor,
    q_v: NegativeQueue,
    q_s: NegativeQueue,
    scene_ids: Sequence[int],
    cfg: LossConfig,
) -> QueueTerms:
    """Vectorised :func:`queue_loss` over a batch of unit-norm rows, averaged.

    Same-scene negatives are shifted far below zero before the hinge so they
    contribute exactly 0 and receive no gradient.
    """
    scene_ids = np.asarray(scene_ids, dtype=np.int64)
    b = s.shape[0]
    total: Optional[Tensor] = None
    count = 0
    pos = ops.sum(ops.mul(s, v), axis=-1, keepdims=True)  # [B, 1]
    for anchor, queue in ((s, q_v), (v, q_s)):
        if len(queue) == 0:
            continue
        emb, qs = queue.arrays()
        keep = scene_ids[:, None] != qs[None, :]
        count += int(keep.sum())
        sims = ops.matmul(anchor, Tensor(emb.T))  # [B, Q]
        shift = np.where(keep, cfg.margin, _EXCLUDED)
        hinge = ops.clamp_min(ops.add(ops.sub(sims, pos), Tensor(shift)))
        term = ops.sum(difficulty_weight(hinge, cfg.beta))
        total = term if total is None else ops.add(total, term)
    if total is None:
        return QueueTerms(Tensor(0.0), 0)
    return QueueTerms(ops.scalar_mul(total, 1.0 / b), count)


def infonce_batch_loss(v: Tensor, s: Tensor, tau) -> Tensor:
    """Symmetric InfoNCE over a batch where row i of ``v`` matches row i of ``s``.

    ``tau`` is a float temperature or a scalar Tensor holding ``log(tau)``
    (learnable). Rows are assumed unit-norm so similarity is a dot product.
    """
    b = v.shape[0]
    sims = ops.matmul(s, ops.transpose(v, (1, 0)))  # [text, image]
    if isinstance(tau, Tensor):
        logits = ops.mul(sims, ops.exp(ops.scalar_mul(tau, -1.0)))
    else:
        logits = ops.scalar_mul(sims, 1.0 / float(tau))
    diag = np.arange(b) * b + np.arange(b)
    t2i = ops.log(ops.softmax(logits, axis=1))  # each text over images
    i2t = ops.log(ops.softmax(logits, axis=0))  # each image over texts
    both = ops.add(t2i, i2t)
    picked = ops.embedding_lookup(ops.reshape(both, (b * b, 1)), diag)
    return ops.scalar_mul(ops.sum(picked), -0.5 / b)


@dataclass
class LossBreakdown:
    total: Tensor
    batch: Tensor
    queue: Tensor
    queue_terms: int


def total_loss(
    v: Tensor,
    s: Tensor,
    q_v: NegativeQueue,
    q_s: NegativeQueue,
    scene_ids: Sequence[int],
    cfg: LossConfig,
    log_tau: Optional[Tensor] = None,
) -> LossBreakdown:
    """``L_batch + L_queue`` for one batch of embeddings ``v, s: [B, D]``."""
    with scope("loss"):
        tau = log_tau if log_tau is not None else cfg.temperature
        l_batch = infonce_batch_loss(v, s, tau)
        q = batch_queue_loss(s, v, q_v, q_s, scene_ids, cfg)
        return LossBreakdown(ops.add(l_batch, q.loss), l_batch, q.loss, q.contributing)


def init_log_tau(cfg: LossConfig) -> Tensor:
    return Tensor(math.log(cfg.temperature), requires_grad=cfg.learn_temperature)
