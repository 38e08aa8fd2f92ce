"""
Test configuration and fixtures for the looped_vlm test suite.
"""
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

# Keep progress bars and .env output roots out of test runs
os.environ['LOOPED_VLM_PROGRESS'] = 'false'
os.environ['LOOPED_VLM_OUTPUT_ROOT'] = ''

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from test_config import TestConfig
from looped_vlm import tensor as T
from looped_vlm.model import MultimodalModel
from looped_vlm.scenes import build_dataset, generate_scene


@pytest.fixture(scope='function')
def temp_dir():
    """A temporary directory removed after the test."""
    with tempfile.TemporaryDirectory(prefix="looped_vlm_") as d:
        yield Path(d)


@pytest.fixture(scope='function')
def tiny_config(temp_dir):
    """The tiny run config writing into a temporary directory."""
    return TestConfig.tiny_config(output_dir=temp_dir / "run")


@pytest.fixture(scope='function')
def tiny_model(tiny_config):
    """A freshly initialised tiny model (float32)."""
    return MultimodalModel(tiny_config)


@pytest.fixture(scope='function')
def tiny_model_f64(temp_dir):
    """The tiny model built in float64, for exact comparisons."""
    with T.precision("float64"):
        cfg = TestConfig.tiny_config(output_dir=temp_dir / "run64")
        model = MultimodalModel(cfg)
    return model


@pytest.fixture(scope='function')
def sample_scene():
    """A 16px counting scene."""
    return generate_scene(7, "global_count", image_size=16)


@pytest.fixture(scope='function')
def sample_scenes():
    """A handful of 16px scenes of both kinds."""
    kinds = ["global_count", "local_attribute"]
    return [generate_scene(seed, kinds[seed % 2], image_size=16) for seed in range(6)]


@pytest.fixture(scope='function')
def tiny_dataset(tiny_config):
    """Generated train/eval/calib splits for the tiny config."""
    out = Path(tiny_config.output_dir) / "data"
    manifest = build_dataset(tiny_config.data, tiny_config.vision.image_size, out, progress=False)
    return out, manifest


@pytest.fixture(scope='function')
def rng():
    """A seeded generator."""
    return np.random.default_rng(1234)
