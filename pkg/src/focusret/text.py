"""Bidirectional transformer text encoder with LoRA on query/value projections."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, ops, scope
from .config import TextConfig
from .errors import ContractError, VocabularyError
from .nn import BlockParams, LoRAPair, param, set_trainable, transformer_block, trunc_normal

BOS, EOS, PAD, UNK = 0, 1, 2, 3
_MASKED = -1e30


@dataclass
class TextParams:
    token_embed: Tensor  # [vocab, width]
    pos_embed: Tensor  # [max_len, width]
    blocks: list[BlockParams]
    proj: Tensor  # [width, embed_dim]
    frozen_rows: Optional[np.ndarray] = None  # token ids whose embedding never trains

    def lora_pairs(self) -> list[LoRAPair]:
        pairs = []
        for blk in self.blocks:
            pairs += [lp for lp in (blk.attn.lora_q, blk.attn.lora_v) if lp is not None]
        return pairs


def init_text_params(
    cfg: TextConfig,
    rng: np.random.Generator,
    use_lora: bool = True,
    frozen_rows: Optional[Sequence[int]] = None,
) -> TextParams:
    """Frozen backbone plus trainable LoRA pairs and output projection."""
    p = TextParams(
        token_embed=param(trunc_normal(rng, (cfg.vocab_size, cfg.width))),
        pos_embed=param(trunc_normal(rng, (cfg.max_len, cfg.width))),
        blocks=[BlockParams.init(rng, cfg.width, cfg.mlp_ratio) for _ in range(cfg.depth)],
        proj=param(trunc_normal(rng, (cfg.width, cfg.embed_dim))),
        frozen_rows=None if frozen_rows is None else np.asarray(frozen_rows, dtype=np.int64),
    )
    set_trainable(p, False)
    p.proj.requires_grad = True
    if use_lora:
        for blk in p.blocks:
            blk.attn.lora_q = LoRAPair.init(rng, cfg.width, cfg.lora_rank)
            blk.attn.lora_v = LoRAPair.init(rng, cfg.width, cfg.lora_rank)
    return p


def _check_tokens(tokens: Sequence[int], cfg: TextConfig) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or len(ids) < 2:
        raise ContractError("token sequence must be 1-d with at least BOS and EOS")
    if len(ids) > cfg.max_len:
        raise ContractError(f"sequence length {len(ids)} exceeds max_len {cfg.max_len}")
    if ids[0] != BOS or ids[-1] != EOS:
        raise ContractError("token sequence must start with BOS and end with EOS")
    bad = (ids < 0) | (ids >= cfg.vocab_size)
    if bad.any():
        raise VocabularyError(f"token id {int(ids[bad][0])} outside vocabulary of {cfg.vocab_size}")
    return ids


def embed_tokens(tokens: Sequence[int], params: TextParams, cfg: TextConfig) -> Tensor:
    """Row j is ``M_E[tokens[j]] + pos[j]``."""
    ids = _check_tokens(tokens, cfg)
    emb = ops.embedding_lookup(params.token_embed, ids, params.frozen_rows)
    pos = ops.slice(params.pos_embed, (slice(0, len(ids)), slice(None)))
    return ops.add(emb, pos)


def pad_batch(batch: Sequence[Sequence[int]], cfg: TextConfig) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad with PAD; returns ``(ids [B, S], eos_positions [B])``."""
    seqs = [_check_tokens(t, cfg) for t in batch]
    s = max(len(t) for t in seqs)
    ids = np.full((len(seqs), s), PAD, dtype=np.int64)
    for i, t in enumerate(seqs):
        ids[i, : len(t)] = t
    eos = np.array([len(t) - 1 for t in seqs], dtype=np.int64)
    return ids, eos


def encode_text_batch(
    batch: Sequence[Sequence[int]], params: TextParams, cfg: TextConfig
) -> Tensor:
    """Unit-norm embeddings ``[B, embed_dim]`` read at each sequence's EOS."""
    ids, eos = pad_batch(batch, cfg)
    b, s = ids.shape
    key_mask = np.where(ids == PAD, _MASKED, 0.0)[:, None, None, :]
    with scope("text"):
        with scope("embed"):
            x = ops.embedding_lookup(params.token_embed, ids, params.frozen_rows)
            x = ops.add(x, ops.slice(params.pos_embed, (slice(0, s), slice(None))))
        for d, block in enumerate(params.blocks):
            with scope(f"block{d}"):
                x = transformer_block(x, block, cfg.heads, key_mask, cfg.lora_scale)
        with scope("head"):
            flat = ops.reshape(x, (b * s, x.shape[-1]))
            pooled = ops.embedding_lookup(flat, np.arange(b) * s + eos)
            return ops.l2_normalize(ops.matmul(pooled, params.proj), axis=-1)


def encode_text(tokens: Sequence[int], params: TextParams, cfg: TextConfig) -> Tensor:
    """Single-sequence form of :func:`encode_text_batch`; returns ``[embed_dim]``."""
    out = encode_text_batch([tokens], params, cfg)
    return ops.reshape(out, (out.shape[-1],))


def lora_param_count(width: int, rank: int) -> int:
    return rank * (width + width)


__all__ = [
    "BOS",
    "EOS",
    "PAD",
    "UNK",
    "TextParams",
    "embed_tokens",
    "encode_text",
    "encode_text_batch",
    "init_text_params",
    "lora_param_count",
    "pad_batch",
]
