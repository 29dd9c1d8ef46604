import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from optibox.synthdata import SceneConfig, generate_dataset


@pytest.fixture(scope="session")
def tiny_dataset():
    """60/20/20 scenes at default jitter; shared across read-only tests."""
    cfg = SceneConfig(seed=11)
    return generate_dataset(cfg, 60, 20, 20)


@pytest.fixture(scope="session")
def spread_dataset():
    """Wide-jitter variant whose proposals cover the whole IoU range."""
    cfg = SceneConfig(seed=5, jitter=0.35, distractors=2)
    return generate_dataset(cfg, 60, 20, 20)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
