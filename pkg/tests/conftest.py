"""
Shared pytest fixtures and configuration for mfa-replay tests.

Provides tiny model presets, synthetic domain sequences and run directories
so unit tests stay fast and integration tests finish in seconds on a CPU.
"""

import logging

import numpy as np
import pytest
import torch

from mfa_replay.config import ModelConfig, RuntimeConfig, TrainingConfig
from mfa_replay.data.toy import synth_toy_sequence
from mfa_replay.models.classifier import Classifier
from mfa_replay.models.discriminator import Discriminator
from mfa_replay.models.generator import Generator

# ============================================================================
# Fixtures: Runtime
# ============================================================================


@pytest.fixture(autouse=True)
def cpu_runtime(monkeypatch, tmp_path):
    """Every test runs on the CPU with outputs under its own temporary root."""
    monkeypatch.setenv("MFA_DEVICE", "cpu")
    monkeypatch.setenv("MFA_OUTPUT_ROOT", str(tmp_path / "runs"))
    monkeypatch.setenv("LOG_JSON", "false")
    RuntimeConfig.reload()
    yield
    monkeypatch.undo()
    RuntimeConfig.reload()


@pytest.fixture
def capture_logs(caplog):
    """Capture package logs at DEBUG level."""
    caplog.set_level(logging.DEBUG, logger="mfa_replay")
    return caplog


@pytest.fixture
def restore_logging():
    """Put the root and metrics loggers back the way the test found them."""
    root = logging.getLogger()
    metrics = logging.getLogger("mfa_replay.metrics")
    saved = (root.handlers[:], root.level, metrics.handlers[:], metrics.level)
    yield
    for logger, handlers in ((root, saved[0]), (metrics, saved[2])):
        for handler in logger.handlers[:]:
            if handler not in handlers:
                handler.close()
                logger.removeHandler(handler)
        for handler in handlers:
            if handler not in logger.handlers:
                logger.addHandler(handler)
    root.setLevel(saved[1])
    metrics.setLevel(saved[3])


# ============================================================================
# Fixtures: Models
# ============================================================================


@pytest.fixture
def tiny_arch():
    """Smallest architecture that still has four taps and a full GAN."""
    return ModelConfig(
        widths=(4, 4, 8, 8),
        head_hidden=8,
        noise_dim=8,
        embed_dim=4,
        style_dim=8,
        generator_channels=8,
        style_layers=3,
        discriminator_width=8,
        discriminator_layers=4,
    )


@pytest.fixture
def tiny_config(tiny_arch):
    """Training settings with step budgets small enough for unit tests."""
    return TrainingConfig(
        model=tiny_arch,
        batch_size=8,
        max_epochs=2,
        steps_per_epoch=2,
        patience=1,
        source_gan_steps=3,
        target_gan_steps=3,
        gan_eval_interval=2,
        seed=0,
    )


@pytest.fixture
def image_shape():
    return (3, 16, 16)


@pytest.fixture
def classifier(tiny_arch, image_shape):
    torch.manual_seed(0)
    return Classifier(3, image_shape, tiny_arch)


@pytest.fixture
def generator(tiny_arch, image_shape):
    torch.manual_seed(1)
    return Generator(3, 2, image_shape, tiny_arch)


@pytest.fixture
def discriminator(tiny_arch, classifier):
    torch.manual_seed(2)
    return Discriminator(classifier.tap_spec, 3, 2, tiny_arch)


# ============================================================================
# Fixtures: Data
# ============================================================================


@pytest.fixture
def toy_sequence():
    """Three 16px domains, three classes, 48 samples each."""
    return synth_toy_sequence(num_domains=3, num_classes=3, samples_per_domain=48, seed=7, image_size=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ============================================================================
# Pytest Configuration
# ============================================================================


def pytest_configure(config):
    """Register custom pytest markers."""
    config.addinivalue_line("markers", "unit: mark test as a unit test")
    config.addinivalue_line("markers", "integration: mark test as an end-to-end training smoke run")
    config.addinivalue_line("markers", "slow: mark test as slow running")
    config.addinivalue_line("markers", "critical: mark test as a critical path test")
