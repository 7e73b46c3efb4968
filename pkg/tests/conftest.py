import numpy as np
import pytest

from focusret.autodiff import Tensor, ops
from focusret.config import ModelConfig, RunConfig, TrainConfig
from focusret.data import synthetic_dataset


def probe(out: Tensor, seed: int = 99) -> Tensor:
    """Scalar ``sum(out * W)`` with fixed random ``W`` so every output entry matters."""
    w = np.random.default_rng(seed).uniform(-1, 1, out.shape)
    return ops.sum(ops.mul(out, Tensor(w)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth():
    return synthetic_dataset(8, 16, 32, 7)


@pytest.fixture(scope="session")
def small_synth():
    return synthetic_dataset(4, 4, 16, 3)


@pytest.fixture
def tiny_run():
    model = ModelConfig(
        image_size=16, patch_size=4, width=16, vision_depth=2, text_depth=2, heads=2,
        mlp_ratio=2, embed_dim=8, max_len=16, lora_rank=2, hidden_dim=16, focus_heads=2,
        head_dim=8,
    )
    return RunConfig(model=model, train=TrainConfig(batch_size=4, seed=3, max_steps=4, queue_warmup_steps=2))


# acceptance criterion number -> (status, title, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{status}] {n}. {title}: {detail}")
