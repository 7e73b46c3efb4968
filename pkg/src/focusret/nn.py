"""Parameter containers and transformer building blocks shared by the encoders."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .autodiff import Tensor, ops, scope

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def param(data, trainable: bool = True) -> Tensor:
    return Tensor(data, requires_grad=trainable)


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk a dataclass tree (lists allowed) yielding ``(dotted_name, tensor)``."""
    if obj is None:
        return
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i))
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_tensors(getattr(obj, f.name), name)


def set_trainable(obj, flag: bool) -> None:
    for _, t in named_tensors(obj):
        t.requires_grad = flag


@dataclass
class LoRAPair:
    a: Tensor  # [width, r]
    b: Tensor  # [r, width]

    @classmethod
    def init(cls, rng: np.random.Generator, width: int, rank: int) -> "LoRAPair":
        a = rng.standard_normal((width, rank)) / math.sqrt(width)
        return cls(param(a), param(np.zeros((rank, width))))

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def param_count(self) -> int:
        return self.a.size + self.b.size


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = ops.matmul(x, w)
    return ops.add(y, b) if b is not None else y


def lora_linear(
    x: Tensor,
    w_frozen: Tensor,
    a: Tensor,
    b: Tensor,
    alpha: float,
    r: int,
) -> Tensor:
    """``x W + (alpha / r) x A B``; exactly ``x W`` while ``B`` is zero."""
    base = ops.matmul(x, w_frozen)
    delta = ops.matmul(ops.matmul(x, a), b)
    return ops.add(base, ops.scalar_mul(delta, alpha / r))


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    lora_q: Optional[LoRAPair] = None
    lora_v: Optional[LoRAPair] = None

    @classmethod
    def init(cls, rng: np.random.Generator, width: int) -> "AttentionParams":
        mats = [param(trunc_normal(rng, (width, width))) for _ in range(4)]
        biases = [param(np.zeros(width)) for _ in range(4)]
        return cls(mats[0], biases[0], mats[1], biases[1], mats[2], biases[2], mats[3], biases[3])


def _project(x: Tensor, w: Tensor, b: Tensor, lora: Optional[LoRAPair], lora_scale: float) -> Tensor:
    if lora is None:
        return linear(x, w, b)
    return ops.add(lora_linear(x, w, lora.a, lora.b, lora_scale * lora.rank, lora.rank), b)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``[..., S, D] -> [..., H, S, D/H]``."""
    *lead, s, d = x.shape
    x = ops.reshape(x, (*lead, s, heads, d // heads))
    nd = x.ndim
    return ops.transpose(x, (*range(nd - 3), nd - 2, nd - 3, nd - 1))


def merge_heads(x: Tensor) -> Tensor:
    """``[..., H, S, Dh] -> [..., S, H*Dh]``."""
    *lead, h, s, dh = x.shape
    nd = x.ndim
    x = ops.transpose(x, (*range(nd - 3), nd - 2, nd - 3, nd - 1))
    return ops.reshape(x, (*lead, s, h * dh))


def multi_head_attention(
    x: Tensor,
    p: AttentionParams,
    heads: int,
    attn_bias: Optional[np.ndarray] = None,
    lora_scale: float = 1.0,
    residual: bool = False,
) -> Tensor:
    """Scaled dot-product self-attention over axis -2 of ``x``.

    ``attn_bias`` is an additive constant broadcast onto the score tensor
    ``[..., H, S, S]`` (used for key padding masks).
    """
    with scope("attn"):
        q = split_heads(_project(x, p.wq, p.bq, p.lora_q, lora_scale), heads)
        k = split_heads(linear(x, p.wk, p.bk), heads)
        v = split_heads(_project(x, p.wv, p.bv, p.lora_v, lora_scale), heads)
        head_dim = x.shape[-1] // heads
        scores = ops.scalar_mul(ops.matmul(q, ops.swap_last(k)), 1.0 / math.sqrt(head_dim))
        if attn_bias is not None:
            scores = ops.add(scores, Tensor(attn_bias))
        probs = ops.softmax(scores, axis=-1)
        out = linear(merge_heads(ops.matmul(probs, v)), p.wo, p.bo)
        return ops.add(out, x) if residual else out


@dataclass
class FFNParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, width: int, ratio: int) -> "FFNParams":
        hidden = width * ratio
        return cls(
            param(trunc_normal(rng, (width, hidden))),
            param(np.zeros(hidden)),
            param(trunc_normal(rng, (hidden, width))),
            param(np.zeros(width)),
        )


def feed_forward(x: Tensor, p: FFNParams) -> Tensor:
    with scope("ffn"):
        return linear(ops.gelu(linear(x, p.w1, p.b1)), p.w2, p.b2)


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttentionParams
    ln2_g: Tensor
    ln2_b: Tensor
    ffn: FFNParams

    @classmethod
    def init(cls, rng: np.random.Generator, width: int, mlp_ratio: int) -> "BlockParams":
        return cls(
            param(np.ones(width)),
            param(np.zeros(width)),
            AttentionParams.init(rng, width),
            param(np.ones(width)),
            param(np.zeros(width)),
            FFNParams.init(rng, width, mlp_ratio),
        )


def transformer_block(
    x: Tensor,
    p: BlockParams,
    heads: int,
    attn_bias: Optional[np.ndarray] = None,
    lora_scale: float = 1.0,
) -> Tensor:
    """Pre-norm residual block: ``x~ = MSA(LN(x)) + x``; ``out = FFN(LN(x~)) + x~``."""
    mid = ops.add(
        multi_head_attention(ops.layer_norm(x, p.ln1_g, p.ln1_b), p.attn, heads, attn_bias, lora_scale),
        x,
    )
    return ops.add(feed_forward(ops.layer_norm(mid, p.ln2_g, p.ln2_b), p.ffn), mid)
