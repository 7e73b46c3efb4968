"""ViT-style image encoder: patch embedding, CLS token, pre-norm blocks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tensor, ops, scope
from .config import VisionConfig
from .errors import DimensionError
from .nn import BlockParams, LoRAPair, param, set_trainable, transformer_block, trunc_normal


@dataclass
class VisionParams:
    patch_embed: Tensor  # [patch_dim, width]
    cls_token: Tensor  # [width]
    pos_embed: Tensor  # [N^2 + 1, width]
    blocks: list[BlockParams]
    proj: Tensor  # [width, embed_dim]
    lora_blocks: list[LoRAPair] = field(default_factory=list)


def init_vision_params(
    cfg: VisionConfig, rng: np.random.Generator, lora_rank: Optional[int] = None
) -> VisionParams:
    """Random init; every tensor frozen when ``cfg.frozen``.

    With ``lora_rank`` set, each block's query and value projections get a
    trainable LoRA pair (the LoRA-in-backbone baseline).
    """
    p = VisionParams(
        patch_embed=param(trunc_normal(rng, (cfg.patch_dim, cfg.width))),
        cls_token=param(trunc_normal(rng, (cfg.width,))),
        pos_embed=param(trunc_normal(rng, (cfg.seq_len, cfg.width))),
        blocks=[BlockParams.init(rng, cfg.width, cfg.mlp_ratio) for _ in range(cfg.depth)],
        proj=param(trunc_normal(rng, (cfg.width, cfg.embed_dim))),
    )
    if cfg.frozen:
        set_trainable(p, False)
    if lora_rank is not None:
        for blk in p.blocks:
            blk.attn.lora_q = LoRAPair.init(rng, cfg.width, lora_rank)
            blk.attn.lora_v = LoRAPair.init(rng, cfg.width, lora_rank)
    return p


def patchify(image, cfg: VisionConfig) -> Tensor:
    """``[C, H, W]`` (or ``[B, C, H, W]``) to ``[(B,) N^2, C*P*P]``.

    Patches are in row-major grid order; within a patch values are ordered
    channel-major, then pixel row, then pixel column.
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    batched = x.ndim == 4
    if not batched:
        x = ops.reshape(x, (1, *x.shape))
    if x.ndim != 4:
        raise DimensionError(f"patchify expects [C,H,W] or [B,C,H,W], got {image.shape}")
    b, c, h, w = x.shape
    if (c, h, w) != (cfg.channels, cfg.image_size, cfg.image_size):
        raise DimensionError(
            f"image shape {(c, h, w)} does not match config "
            f"{(cfg.channels, cfg.image_size, cfg.image_size)}"
        )
    n, ps = cfg.grid, cfg.patch_size
    x = ops.reshape(x, (b, c, n, ps, n, ps))
    x = ops.transpose(x, (0, 2, 4, 1, 3, 5))
    x = ops.reshape(x, (b, n * n, c * ps * ps))
    return x if batched else ops.reshape(x, x.shape[1:])


def unpatchify(patches, cfg: VisionConfig) -> Tensor:
    x = patches if isinstance(patches, Tensor) else Tensor(patches)
    batched = x.ndim == 3
    if not batched:
        x = ops.reshape(x, (1, *x.shape))
    b = x.shape[0]
    n, ps, c = cfg.grid, cfg.patch_size, cfg.channels
    x = ops.reshape(x, (b, n, n, c, ps, ps))
    x = ops.transpose(x, (0, 3, 1, 4, 2, 5))
    x = ops.reshape(x, (b, c, n * ps, n * ps))
    return x if batched else ops.reshape(x, x.shape[1:])


def embed_sequence(patches: Tensor, params: VisionParams) -> Tensor:
    """Row 0 is ``cls + pos[0]``; row j is ``patches[j-1] W_I + pos[j]``."""
    n_tok = params.pos_embed.shape[0] - 1
    if patches.shape[-2] != n_tok:
        raise DimensionError(f"expected {n_tok} patches, got {patches.shape[-2]}")
    emb = ops.matmul(patches, params.patch_embed)
    lead = emb.shape[:-2]
    width = params.cls_token.shape[0]
    cls = ops.reshape(params.cls_token, (1,) * len(lead) + (1, width))
    if lead:
        cls = ops.add(cls, Tensor(np.zeros((*lead, 1, width))))
    seq = ops.concat([cls, emb], axis=-2)
    return ops.add(seq, params.pos_embed)


def vit_block(v: Tensor, block: BlockParams, cfg: VisionConfig) -> Tensor:
    return transformer_block(v, block, cfg.heads)


def encode_image(image, params: VisionParams, cfg: VisionConfig) -> tuple[Tensor, list[Tensor]]:
    """Return the unit-norm embedding and every block output ``v^1..v^D``.

    ``block_outputs[0]`` is the embedded input sequence ``v^0``; entry d is
    the output of block d. Works on one image or a batch.
    """
    with scope("vision"):
        with scope("embed"):
            v = embed_sequence(patchify(image, cfg), params)
        outputs = [v]
        for d, block in enumerate(params.blocks):
            with scope(f"block{d}"):
                v = vit_block(v, block, cfg)
            outputs.append(v)
        with scope("head"):
            emb = backbone_cls_projection(v, params.proj)
            return ops.l2_normalize(emb, axis=-1), outputs


def backbone_cls_projection(v: Tensor, proj: Tensor) -> Tensor:
    cls = ops.slice(v, (Ellipsis, slice(0, 1), slice(None)))
    out = ops.matmul(cls, proj)
    return ops.reshape(out, out.shape[:-2] + (out.shape[-1],))
