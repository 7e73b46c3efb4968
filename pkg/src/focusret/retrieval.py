"""Retrieval evaluation: rankings, R@k in both directions, and mR."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .data import ImageRecord, Vocab, augment_with_scene

KS = (1, 5, 10)


def rank_retrieval(query: np.ndarray, corpus: np.ndarray) -> np.ndarray:
    """Corpus ids per query by descending cosine; ties go to the lower id."""
    q = np.asarray(query, dtype=np.float64)
    c = np.asarray(corpus, dtype=np.float64)
    sims = q @ c.T
    return np.argsort(-sims, axis=1, kind="stable")


def first_hit_ranks(rankings: np.ndarray, ground_truth: Sequence[Sequence[int]]) -> np.ndarray:
    """1-based position of the first ground-truth item per query."""
    out = np.empty(len(rankings), dtype=np.int64)
    for i, (row, gt) in enumerate(zip(rankings, ground_truth)):
        hits = np.flatnonzero(np.isin(row, list(gt)))
        out[i] = hits[0] + 1 if hits.size else len(row) + 1
    return out


def recall_at_k(rankings: np.ndarray, ground_truth: Sequence[Sequence[int]], k: int) -> float:
    """Percentage of queries with at least one ground-truth id in the top ``k``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rankings = np.asarray(rankings)
    if rankings.shape[0] == 0:
        return 0.0
    corpus = rankings.shape[1]
    if k > corpus:
        warnings.warn(f"k={k} exceeds corpus size {corpus}; clamped", stacklevel=2)
        k = corpus
    hits = sum(bool(set(row[:k].tolist()) & set(gt)) for row, gt in zip(rankings, ground_truth))
    return 100.0 * hits / len(rankings)


def mean_recall(values: Sequence[float]) -> float:
    """Arithmetic mean of the six R@{1,5,10} values of both directions."""
    values = list(values)
    if len(values) != 6:
        raise ValueError(f"mean_recall expects 6 values, got {len(values)}")
    return sum(values) / 6.0


@dataclass
class RetrievalResult:
    iqt: dict[int, float]
    tqi: dict[int, float]
    mr: float
    config: dict[str, Any] = field(default_factory=dict)
    iqt_ranks: Optional[np.ndarray] = None
    tqi_ranks: Optional[np.ndarray] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "iqt": {f"r{k}": v for k, v in self.iqt.items()},
            "tqi": {f"r{k}": v for k, v in self.tqi.items()},
            "mr": self.mr,
            "config": self.config,
        }

    def summary(self) -> str:
        iqt = " ".join(f"R@{k}={v:.2f}" for k, v in self.iqt.items())
        tqi = " ".join(f"R@{k}={v:.2f}" for k, v in self.tqi.items())
        return f"IQT {iqt} | TQI {tqi} | mR={self.mr:.2f}"


def evaluate_embeddings(
    image_emb: np.ndarray,
    caption_emb: np.ndarray,
    caption_owner: np.ndarray,
    config: Optional[dict] = None,
) -> RetrievalResult:
    """Score both directions given image and caption embeddings.

    ``caption_owner[j]`` is the image index caption j belongs to.
    """
    caption_owner = np.asarray(caption_owner)
    n_img = len(image_emb)
    owned = [np.flatnonzero(caption_owner == i).tolist() for i in range(n_img)]
    iqt_rank = rank_retrieval(image_emb, caption_emb)
    tqi_rank = rank_retrieval(caption_emb, image_emb)
    tqi_gt = [[int(o)] for o in caption_owner]
    iqt = {k: recall_at_k(iqt_rank, owned, min(k, iqt_rank.shape[1])) for k in KS}
    tqi = {k: recall_at_k(tqi_rank, tqi_gt, min(k, tqi_rank.shape[1])) for k in KS}
    mr = mean_recall([*iqt.values(), *tqi.values()])
    return RetrievalResult(
        iqt, tqi, mr, dict(config or {}),
        iqt_ranks=first_hit_ranks(iqt_rank, owned),
        tqi_ranks=first_hit_ranks(tqi_rank, tqi_gt),
    )


def encode_records(
    model,
    records: Sequence[ImageRecord],
    vocab: Vocab,
    scene_prompt: bool = True,
    batch_size: int = 64,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Embed images and all their captions without a tape (inference)."""
    max_len = model.text_cfg.max_len
    imgs, caps, owner = [], [], []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        imgs.append(model.encode_images(np.stack([r.image for r in chunk])).data)
    seqs = []
    for i, r in enumerate(records):
        for c in r.captions:
            seqs.append(augment_with_scene(c, r.scene_id, vocab, max_len, scene_prompt))
            owner.append(i)
    for start in range(0, len(seqs), batch_size):
        caps.append(model.encode_texts(seqs[start : start + batch_size]).data)
    return np.concatenate(imgs), np.concatenate(caps), np.asarray(owner)


def evaluate_model(
    model,
    records: Sequence[ImageRecord],
    vocab: Vocab,
    scene_prompt: bool = True,
    config: Optional[dict] = None,
) -> RetrievalResult:
    img, cap, owner = encode_records(model, records, vocab, scene_prompt)
    return evaluate_embeddings(img, cap, owner, config)


def text_query_recall(
    model,
    queries: Sequence[ImageRecord],
    gallery: Sequence[ImageRecord],
    vocab: Vocab,
    scene_prompt: bool = True,
    ks: Sequence[int] = KS,
) -> dict[int, float]:
    """Text-query-image R@k with captions of ``queries`` ranked over ``gallery``.

    Every query record must also be in the gallery (matched by ``sample_id``).
    Chance level for R@k is ``100 * k / len(gallery)``.
    """
    pos = {r.sample_id: i for i, r in enumerate(gallery)}
    missing = [r.sample_id for r in queries if r.sample_id not in pos]
    if missing:
        raise KeyError(f"query records not in gallery: {missing[:3]}")
    img, _, _ = encode_records(model, gallery, vocab, scene_prompt)
    _, cap, owner = encode_records(model, queries, vocab, scene_prompt)
    gt = [[pos[queries[o].sample_id]] for o in owner]
    ranking = rank_retrieval(cap, img)
    return {k: recall_at_k(ranking, gt, min(k, len(gallery))) for k in ks}
