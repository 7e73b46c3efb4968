"""Focus-Adapter side branch with region-restricted attention.

The side branch runs beside a frozen ViT. Adapter d reads the backbone
block output ``v^d`` (a constant, no grad path) through a shared
down-projection and updates the ladder state::

    f~^d = RegionAttn(h^{d-1}) + h^{d-1}
    f^d  = f~^d W_d + f~^d
    h^d  = v^d W_down + f^d + b

Region attention splits the N x N patch grid into non-overlapping
``focus_field x focus_field`` windows and runs multi-head self-attention
inside each window only (block-diagonal attention). The CLS row is not a
spatial token; it skips the windows and attends to nothing, so only the
residual and linear paths update it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops, scope
from .config import FocusConfig, VisionConfig
from .errors import ConfigError
from .nn import AttentionParams, multi_head_attention, param, trunc_normal
from .vision import VisionParams, backbone_cls_projection, encode_image


@dataclass
class AdapterParams:
    attn: AttentionParams
    w_d: Tensor  # [hidden, hidden]


@dataclass
class FocusParams:
    w_down: Tensor  # [backbone_width, hidden], shared by every adapter
    bias: Tensor  # [hidden]
    adapters: list[AdapterParams]
    proj_backbone: Tensor  # [backbone_width, embed_dim]
    proj_side: Tensor  # [hidden, embed_dim]


def init_focus_params(cfg: FocusConfig, rng: np.random.Generator) -> FocusParams:
    return FocusParams(
        w_down=param(trunc_normal(rng, (cfg.backbone_width, cfg.hidden_dim))),
        bias=param(np.zeros(cfg.hidden_dim)),
        adapters=[
            AdapterParams(
                attn=AttentionParams.init(rng, cfg.hidden_dim),
                w_d=param(trunc_normal(rng, (cfg.hidden_dim, cfg.hidden_dim))),
            )
            for _ in range(cfg.depth)
        ],
        proj_backbone=param(trunc_normal(rng, (cfg.backbone_width, cfg.embed_dim))),
        proj_side=param(trunc_normal(rng, (cfg.hidden_dim, cfg.embed_dim))),
    )


def region_index(grid: int, focus_field: int) -> np.ndarray:
    """Token indices ``[R, field^2]`` of each window, windows and cells row-major."""
    if focus_field < 1 or grid % focus_field:
        raise ConfigError(f"focus_field {focus_field} does not divide grid side {grid}")
    g = np.arange(grid * grid).reshape(grid, grid)
    r = grid // focus_field
    g = g.reshape(r, focus_field, r, focus_field).transpose(0, 2, 1, 3)
    return g.reshape(r * r, focus_field * focus_field)


def partition_regions(h: Tensor, grid: int, focus_field: int) -> Tensor:
    """``[..., N^2, D] -> [..., R, field^2, D]`` (patch tokens only, no CLS)."""
    region_index(grid, focus_field)
    *lead, n2, d = h.shape
    if n2 != grid * grid:
        raise ConfigError(f"expected {grid * grid} patch tokens, got {n2}")
    r, f = grid // focus_field, focus_field
    k = len(lead)
    x = ops.reshape(h, (*lead, r, f, r, f, d))
    x = ops.transpose(x, (*range(k), k, k + 2, k + 1, k + 3, k + 4))
    return ops.reshape(x, (*lead, r * r, f * f, d))


def merge_regions(regions: Tensor, grid: int, focus_field: int) -> Tensor:
    """Inverse of :func:`partition_regions`."""
    *lead, _, _, d = regions.shape
    r, f = grid // focus_field, focus_field
    k = len(lead)
    x = ops.reshape(regions, (*lead, r, r, f, f, d))
    x = ops.transpose(x, (*range(k), k, k + 2, k + 1, k + 3, k + 4))
    return ops.reshape(x, (*lead, grid * grid, d))


def region_attention(
    h: Tensor, attn: AttentionParams, cfg: FocusConfig, residual: bool = True
) -> Tensor:
    """Multi-head attention within each focus window over ``[..., N^2, D]``.

    Tokens in different windows never influence each other. With
    ``residual`` the input is added back.
    """
    with scope("focus_layer"):
        regions = partition_regions(h, cfg.grid, cfg.focus_field)
        out = multi_head_attention(regions, attn, cfg.heads)
        out = merge_regions(out, cfg.grid, cfg.focus_field)
        return ops.add(out, h) if residual else out


def focus_adapter_step(
    v_d: Tensor,
    h_prev: Tensor,
    adapter: AdapterParams,
    shared: FocusParams,
    cfg: FocusConfig,
) -> Tensor:
    """One rung of the ladder on ``[..., 1 + N^2, *]`` sequences (CLS first)."""
    seq = h_prev.shape[-2]
    cls_prev = ops.slice(h_prev, (Ellipsis, slice(0, 1), slice(None)))
    patches_prev = ops.slice(h_prev, (Ellipsis, slice(1, seq), slice(None)))
    attended = region_attention(patches_prev, adapter.attn, cfg, residual=True)
    f_tilde = ops.concat([cls_prev, attended], axis=-2)
    f = ops.add(ops.matmul(f_tilde, adapter.w_d), f_tilde)
    down = ops.matmul(v_d, shared.w_down)
    return ops.add(ops.add(down, f), shared.bias)


def side_branch(block_outputs: list[Tensor], params: FocusParams, cfg: FocusConfig) -> Tensor:
    """Run the ladder over ``block_outputs = [v^0, v^1, ..., v^D]``; returns ``h^{D_f}``."""
    with scope("focus"):
        with scope("init"):
            h = ops.add(ops.matmul(block_outputs[0], params.w_down), params.bias)
        for d, (blk, adapter) in enumerate(zip(cfg.adapter_blocks, params.adapters)):
            with scope(f"adapter{d}"):
                h = focus_adapter_step(block_outputs[blk + 1], h, adapter, params, cfg)
        return h


def fuse_embedding(backbone_last: Tensor, h_last: Tensor, params: FocusParams) -> Tensor:
    """``l2norm(P_b . CLS_backbone + P_s . CLS_side)``."""
    with scope("focus"), scope("head"):
        a = backbone_cls_projection(backbone_last, params.proj_backbone)
        b = backbone_cls_projection(h_last, params.proj_side)
        return ops.l2_normalize(ops.add(a, b), axis=-1)


def encode_image_with_side_branch(
    image,
    vision_params: VisionParams,
    focus_params: FocusParams,
    vision_cfg: VisionConfig,
    focus_cfg: FocusConfig,
) -> Tensor:
    if not vision_cfg.frozen:
        raise ConfigError("the side branch expects a frozen vision backbone")
    _, outputs = encode_image(image, vision_params, vision_cfg)
    h = side_branch(outputs, focus_params, focus_cfg)
    return fuse_embedding(outputs[-1], h, focus_params)
