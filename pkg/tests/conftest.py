"""
Pytest configuration and shared fixtures for LEGO tests.

Unit tests run on tiny models (a few thousand parameters) so the default
suite finishes in minutes on a CPU; desk-scale experiments carry the
``slow`` marker.
"""

import os
import tempfile
from pathlib import Path

os.environ.setdefault(
    "LEGO_LOG_DIR", str(Path(tempfile.gettempdir()) / "lego-test-logs")
)

import pytest  # noqa: E402
import torch  # noqa: E402

from lego.codebook import TextKnowledgeCodebook  # noqa: E402
from lego.config import get_config  # noqa: E402
from lego.corpus import DEFAULT_WORDS, render_corpus  # noqa: E402
from lego.encoder import ViTEncoder  # noqa: E402
from lego.trainer import PretrainConfig  # noqa: E402
from lego.tvqvae import TvqvaeConfig, TvqvaeModel  # noqa: E402


@pytest.fixture(scope="session")
def config():
    """Shared config fixture for all tests."""
    return get_config()


def pytest_configure(config):
    """Configure pytest markers."""
    config.addinivalue_line(
        "markers",
        "slow: end-to-end runs that train real models for minutes",
    )
    config.addinivalue_line(
        "markers", "requires_network: test downloads pretrained weights"
    )


@pytest.fixture(scope="session")
def samples():
    """Sixteen rendered word images."""
    return render_corpus(DEFAULT_WORDS, 16, seed=0)


@pytest.fixture
def tiny_tvqvae_config():
    return TvqvaeConfig(
        hidden_dim=16,
        num_blocks=1,
        embedding_dim=8,
        num_embeddings=16,
        decoder_hidden=16,
        decoder_channels=4,
        batch_size=32,
        epochs=2,
    )


@pytest.fixture
def tiny_tvqvae(tiny_tvqvae_config):
    torch.manual_seed(0)
    return TvqvaeModel(tiny_tvqvae_config)


@pytest.fixture
def tiny_codebook(tiny_tvqvae):
    """Untrained but frozen codebook; indices are still deterministic."""
    return TextKnowledgeCodebook(tiny_tvqvae)


@pytest.fixture
def tiny_pretrain_config():
    return PretrainConfig(
        embed_dim=24,
        depth=1,
        num_heads=2,
        proj_hidden=32,
        proj_dim=16,
        mixer_token_hidden=8,
        batch_size=4,
        epochs=1,
        log_every=0,
    )


@pytest.fixture
def tiny_encoder():
    torch.manual_seed(0)
    return ViTEncoder(embed_dim=24, depth=1, num_heads=2)
