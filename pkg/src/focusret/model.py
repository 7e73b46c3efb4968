"""Dual encoder assembled for one of three training strategies.

``side_branch``
    frozen ViT + trainable Focus-Adapter ladder; text LoRA + projection.
``lora_backbone``
    ViT with trainable LoRA on query/value and trainable projection;
    text LoRA + projection. No side branch.
``full_finetune``
    every encoder weight trainable (scene-prompt embedding rows excepted);
    no LoRA, no side branch.

All three share identical base weights for a given seed: each component
draws from its own seeded generator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .config import STRATEGIES, LossConfig, ModelConfig, TextConfig, VisionConfig, FocusConfig
from .errors import ConfigError
from .focus import FocusParams, encode_image_with_side_branch, init_focus_params
from .losses import init_log_tau
from .nn import LoRAPair, named_tensors, set_trainable
from .text import TextParams, encode_text_batch, init_text_params
from .vision import VisionParams, encode_image, init_vision_params

_VISION_STREAM, _TEXT_STREAM, _FOCUS_STREAM, _VLORA_STREAM = 0, 1, 2, 3


@dataclass
class Model:
    strategy: str
    config: ModelConfig
    vision_cfg: VisionConfig
    text_cfg: TextConfig
    focus_cfg: Optional[FocusConfig]
    vision: VisionParams
    text: TextParams
    focus: Optional[FocusParams]
    log_tau: Tensor

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(named_tensors(self.vision, "vision"))
        out.update(named_tensors(self.text, "text"))
        if self.focus is not None:
            out.update(named_tensors(self.focus, "focus"))
        out["log_tau"] = self.log_tau
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_parameters().items() if t.requires_grad}

    def frozen_rows(self) -> dict[str, np.ndarray]:
        """Rows of trainable tables that the optimizer must leave untouched."""
        rows = self.text.frozen_rows
        if rows is None or not len(rows) or not self.text.token_embed.requires_grad:
            return {}
        return {"text.token_embed": rows}

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None

    def encode_images(self, images: np.ndarray) -> Tensor:
        if self.focus is not None:
            return encode_image_with_side_branch(
                images, self.vision, self.focus, self.vision_cfg, self.focus_cfg
            )
        return encode_image(images, self.vision, self.vision_cfg)[0]

    def encode_texts(self, tokens: Sequence[Sequence[int]]) -> Tensor:
        return encode_text_batch(tokens, self.text, self.text_cfg)


def _stream(seed: int, idx: int) -> np.random.Generator:
    return np.random.default_rng([seed, idx])


def build_model(
    config: ModelConfig,
    vocab_size: int,
    strategy: str = "side_branch",
    seed: int = 0,
    frozen_token_rows: Optional[Sequence[int]] = None,
    loss_cfg: Optional[LossConfig] = None,
) -> Model:
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    loss_cfg = loss_cfg if loss_cfg is not None else LossConfig()
    frozen_backbone = strategy != "full_finetune"
    vcfg = config.vision(frozen=frozen_backbone)
    tcfg = config.text(vocab_size)

    vision = init_vision_params(vcfg, _stream(seed, _VISION_STREAM))
    if strategy == "lora_backbone":
        rng = _stream(seed, _VLORA_STREAM)
        for blk in vision.blocks:
            blk.attn.lora_q = LoRAPair.init(rng, vcfg.width, config.lora_rank)
            blk.attn.lora_v = LoRAPair.init(rng, vcfg.width, config.lora_rank)
        vision.proj.requires_grad = True

    text = init_text_params(
        tcfg,
        _stream(seed, _TEXT_STREAM),
        use_lora=strategy != "full_finetune",
        frozen_rows=frozen_token_rows,
    )
    if strategy == "full_finetune":
        set_trainable(vision, True)
        set_trainable(text, True)

    focus = focus_cfg = None
    if strategy == "side_branch":
        focus_cfg = config.focus()
        focus = init_focus_params(focus_cfg, _stream(seed, _FOCUS_STREAM))

    return Model(strategy, config, vcfg, tcfg, focus_cfg, vision, text, focus, init_log_tau(loss_cfg))
