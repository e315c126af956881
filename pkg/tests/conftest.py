#!/usr/bin/env python3
"""
pytest configuration and fixtures for the CLAN tests.
"""

import pytest
import numpy as np

from clan.attention import ClsaPooling, Gate, RelationMetric
from clan.backbone import BackboneConfig
from clan.config import parse_config
from clan.model import ModelConfig
from clan.tensor import set_precision


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "critical: marks tests as critical functionality tests"
    )
    config.addinivalue_line(
        "markers", "integration: marks tests as integration tests"
    )
    config.addinivalue_line(
        "markers", "slow: marks tests as slow running"
    )
    config.addinivalue_line(
        "markers", "unit: marks tests as unit tests"
    )


def pytest_collection_modifyitems(config, items):
    """Modify test collection to add custom markers."""
    for item in items:
        if "oracle" in item.name or "identity" in item.name:
            item.add_marker(pytest.mark.critical)

        if "cli" in item.nodeid or "workflow" in item.name:
            item.add_marker(pytest.mark.integration)


@pytest.fixture(autouse=True)
def f64_precision():
    """Every test starts in 64-bit precision and leaves it that way."""
    set_precision('f64')
    yield
    set_precision('f64')


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_backbone():
    """8×8 input, two tapped stages: extents 4, 2 and a 1×1 top map."""
    return BackboneConfig(
        stage_channels=[2, 3, 4], stage_blocks=[1, 1, 1], input_size=8,
        tap_stages=[1, 2], top_stage=3,
    )


@pytest.fixture
def tiny_model_config(tiny_backbone):
    return ModelConfig(
        backbone=tiny_backbone, num_classes=3,
        metric=RelationMetric.DOT_PRODUCT, pooling=ClsaPooling.AVG_MAX, gate=Gate.LINEAR,
    )


SMALL_RUN = """
model.stage_channels = 4, 6, 8
model.stage_blocks = 1, 1, 1
model.input_size = 16
model.tap_stages = 1, 2
model.top_stage = 3

optim.lr = 0.05
optim.batch_size = 16
optim.epochs = 2
optim.step_epochs = 1

data.num_classes = 4
data.image_size = 16
data.patch_size = 3
data.samples_per_class = 8
data.test_samples_per_class = 4
"""


@pytest.fixture
def small_run_text():
    """A run small enough to train for two epochs inside a unit test."""
    return SMALL_RUN


@pytest.fixture
def small_run_file(tmp_path):
    def _write(extra: str = '', name: str = 'run.cfg'):
        out_dir = tmp_path / 'out'
        path = tmp_path / name
        path.write_text(SMALL_RUN + extra + f"\nrun.output_dir = {out_dir}\n")
        return path
    return _write


@pytest.fixture
def small_run_config(small_run_text):
    return parse_config(small_run_text)
