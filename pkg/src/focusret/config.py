"""Configuration dataclasses and the flat JSON config file.

A config file is one flat JSON object whose keys are field names of
:class:`ModelConfig`, :class:`LossConfig` or :class:`TrainConfig`. Field
names are unique across the three, so no nesting is needed.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError

STRATEGIES = ("side_branch", "lora_backbone", "full_finetune")


@dataclass(frozen=True)
class VisionConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    width: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    embed_dim: int = 32
    frozen: bool = True

    def __post_init__(self):
        if min(self.image_size, self.patch_size, self.channels, self.width, self.depth, self.heads) < 1:
            raise ConfigError("vision dimensions must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.width % self.heads:
            raise ConfigError(f"vision width {self.width} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def seq_len(self) -> int:
        return self.grid**2 + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels


@dataclass(frozen=True)
class TextConfig:
    vocab_size: int
    max_len: int = 32
    width: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    embed_dim: int = 32
    lora_rank: int = 4
    lora_alpha: float = 8.0

    def __post_init__(self):
        if self.max_len < 3:
            raise ConfigError("max_len must be >= 3 (BOS + one token + EOS)")
        if not 1 <= self.lora_rank <= self.width:
            raise ConfigError(f"lora_rank must lie in [1, {self.width}], got {self.lora_rank}")
        if self.width % self.heads:
            raise ConfigError(f"text width {self.width} not divisible by heads {self.heads}")
        if self.vocab_size < 5:
            raise ConfigError("vocab_size must cover the 4 reserved ids plus one token")

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank


@dataclass(frozen=True)
class FocusConfig:
    hidden_dim: int = 64
    focus_field: int = 2
    heads: int = 2
    head_dim: int = 32
    depth: int = 4
    backbone_width: int = 64
    embed_dim: int = 32
    grid: int = 4
    backbone_depth: int = 4

    def __post_init__(self):
        if self.hidden_dim != self.heads * self.head_dim:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} != heads {self.heads} * head_dim {self.head_dim}"
            )
        if self.focus_field < 1 or self.grid % self.focus_field:
            raise ConfigError(
                f"focus_field {self.focus_field} does not divide the patch grid side {self.grid}"
            )
        if not 1 <= self.depth <= self.backbone_depth:
            raise ConfigError(f"focus depth must lie in [1, {self.backbone_depth}], got {self.depth}")

    @property
    def regions_per_side(self) -> int:
        return self.grid // self.focus_field

    @property
    def adapter_blocks(self) -> list[int]:
        """Backbone block indices (0-based) feeding each adapter; evenly thinned."""
        return [(i + 1) * self.backbone_depth // self.depth - 1 for i in range(self.depth)]


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    width: int = 64
    vision_depth: int = 4
    text_depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    embed_dim: int = 32
    max_len: int = 32
    lora_rank: int = 4
    lora_alpha: float = 8.0
    hidden_dim: int = 64
    focus_field: int = 2
    focus_heads: int = 2
    head_dim: int = 32
    focus_depth: Optional[int] = None

    def vision(self, frozen: bool = True) -> VisionConfig:
        return VisionConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            channels=self.channels,
            width=self.width,
            depth=self.vision_depth,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            embed_dim=self.embed_dim,
            frozen=frozen,
        )

    def text(self, vocab_size: int) -> TextConfig:
        return TextConfig(
            vocab_size=vocab_size,
            max_len=self.max_len,
            width=self.width,
            depth=self.text_depth,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            embed_dim=self.embed_dim,
            lora_rank=self.lora_rank,
            lora_alpha=self.lora_alpha,
        )

    def focus(self) -> FocusConfig:
        v = self.vision()
        return FocusConfig(
            hidden_dim=self.hidden_dim,
            focus_field=self.focus_field,
            heads=self.focus_heads,
            head_dim=self.head_dim,
            depth=self.focus_depth if self.focus_depth is not None else self.vision_depth,
            backbone_width=self.width,
            embed_dim=self.embed_dim,
            grid=v.grid,
            backbone_depth=self.vision_depth,
        )

    def validate(self) -> "ModelConfig":
        self.vision()
        self.text(vocab_size=5)
        self.focus()
        return self


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.2
    beta: float = 20.0
    temperature: float = 0.07
    learn_temperature: bool = True
    queue_mult: int = 4

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError("margin must be > 0")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.queue_mult < 0:
            raise ConfigError("queue_mult must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 5e-4
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    strategy: str = "side_branch"
    warmup_steps: int = 0
    # queue term held at zero for this many steps (queues still fill);
    # random-init encoders need in-batch structure before stale negatives help
    queue_warmup_steps: int = 150
    max_steps: Optional[int] = None
    scene_prompt: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for in-batch negatives")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.warmup_steps < 0 or self.queue_warmup_steps < 0:
            raise ConfigError("warm-up step counts must be >= 0")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {}
        for part in (self.model, self.loss, self.train):
            flat.update(dataclasses.asdict(part))
        return flat

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> "RunConfig":
        buckets: dict[type, dict[str, Any]] = {ModelConfig: {}, LossConfig: {}, TrainConfig: {}}
        owners = {f.name: kind for kind in buckets for f in dataclasses.fields(kind)}
        for key, value in flat.items():
            if key not in owners:
                raise ConfigError(f"unknown config key {key!r}")
            buckets[owners[key]][key] = value
        try:
            model = ModelConfig(**buckets[ModelConfig]).validate()
            return cls(model, LossConfig(**buckets[LossConfig]), TrainConfig(**buckets[TrainConfig]))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **overrides: Any) -> "RunConfig":
        flat = self.to_flat()
        flat.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_flat(flat)


def load_config(path: Optional[str | Path] = None, **overrides: Any) -> RunConfig:
    """Read a flat JSON config (optional) and apply non-None overrides."""
    flat: dict[str, Any] = {}
    if path is not None:
        try:
            flat = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(flat, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    flat.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_flat(flat)
