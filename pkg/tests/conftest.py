import pytest
import torch

from dualvqa.config import EncoderConfig, MediaConfig, ModelConfig
from dualvqa.datagen import build_corpus

ACCEPTANCE_LINES: list[str] = []


def toy_model_config(d: int = 8, key_frames: int = 1, num_patches: int = 2, lora_rank: int = 2) -> ModelConfig:
    enc = dict(layers=2, heads=2, model_dim=d, mlp_dim=2 * d, patch_embed_size=4)
    return ModelConfig(
        d_model=d,
        decoder_layers=2,
        decoder_heads=2,
        decoder_mlp_dim=2 * d,
        context=640,
        head_bias_init=0.0,
        lora_rank=lora_rank,
        high=EncoderConfig(**enc),
        low=EncoderConfig(**enc),
        media=MediaConfig(key_frames=key_frames, high_size=(8, 8), box=(16, 16), patch=8, num_patches=num_patches),
    )


@pytest.fixture
def toy_cfg() -> ModelConfig:
    return toy_model_config()


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_corpus")
    manifest = build_corpus(root, n_sources=3, levels=4, seed=3, resolution=(16, 24), n_frames=2, test_sources=1)
    return root, manifest


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
