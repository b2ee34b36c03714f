"""
Pytest configuration and fixtures for pixtok tests.

This module provides reusable fixtures: seeded generators, tiny model and
experiment configs, synthetic datasets and temporary config files.
"""

import json
import os
from pathlib import Path
from typing import Generator

import numpy as np
import pytest

from config import AugmentationConfig, ExperimentConfig, ModelConfig, ScheduleConfig, desk_preset
from data import Dataset, synthetic_dataset


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator shared by a single test."""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    """
    Two-layer pixel-token encoder on 4×4 images.

    Returns:
        ModelConfig small enough for exhaustive checks
    """
    return ModelConfig(
        layers=2,
        dim=16,
        mlp_dim=32,
        heads=2,
        image_size=4,
        tokenizer="pixel",
        pe="learned",
        num_classes=4,
        drop_path_rate=0.0,
    )


@pytest.fixture
def tiny_datasets() -> tuple[Dataset, Dataset]:
    """Quadrant train/val splits of 8×8 images."""
    train = synthetic_dataset("quadrant", 16, seed=0, image_size=8)
    val = synthetic_dataset("quadrant", 8, seed=1, image_size=8)
    return train, val


@pytest.fixture
def desk_config(tmp_path: Path) -> ExperimentConfig:
    """
    Desk preset shrunk to a couple of epochs, writing under tmp_path.

    Returns:
        ExperimentConfig for fast end-to-end runs
    """
    cfg = desk_preset("supervised")
    model = cfg.model.model_copy(update=dict(layers=1, dim=16, mlp_dim=32, heads=2, tokenizer="patch", patch_size=2))
    return cfg.model_copy(
        update=dict(
            model=ModelConfig.model_validate(model.model_dump()),
            schedule=ScheduleConfig(warmup_epochs=1, total_epochs=3),
            augmentation=AugmentationConfig.disabled(),
            batch_size=8,
            eval_interval=1,
            output_dir=str(tmp_path / "run"),
        )
    )


@pytest.fixture
def temp_config_file(tmp_path: Path) -> Generator[str, None, None]:
    """
    Create a temporary JSON experiment config for testing.

    Yields:
        Path to temporary config file
    """
    config = {
        "study": "supervised",
        "seed": 3,
        "model": {"layers": 1, "dim": 16, "mlp_dim": 32, "heads": 2, "image_size": 8, "num_classes": 4},
        "schedule": {"warmup_epochs": 1, "total_epochs": 2},
        "dataset": {"source": "synthetic", "kind": "quadrant", "count": 16, "val_count": 8, "image_size": 8},
        "augmentation": {"enabled": False},
        "output_dir": "out",
        "batch_size": 8,
        "eval_interval": 1,
    }
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(config))
    yield str(path)


@pytest.fixture
def invalid_config_file(tmp_path: Path) -> Generator[str, None, None]:
    """
    Create an invalid configuration file for negative testing.

    Yields:
        Path to invalid config file
    """
    config = {
        "model": {"dim": 10, "heads": 3},  # Invalid: dim not divisible by heads
        "batch_size": 0,  # Invalid: zero batch
        "colour": "blue",  # Invalid: unknown key
    }
    path = tmp_path / "invalid.json"
    path.write_text(json.dumps(config))
    yield str(path)


@pytest.fixture(autouse=True)
def reset_environment():
    """
    Reset environment variables before each test.
    """
    original_env = os.environ.copy()
    yield
    os.environ.clear()
    os.environ.update(original_env)


@pytest.fixture
def capture_logs(caplog):
    """
    Enhanced log capturing with specific level control.

    Args:
        caplog: Pytest's log capture fixture

    Returns:
        Configured caplog fixture
    """
    caplog.set_level("INFO")
    return caplog
