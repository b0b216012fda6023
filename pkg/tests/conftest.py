import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from terrex.dataset import DatasetConfig, build_sample  # noqa: E402
from terrex.synth import synth_scene  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corner_scene():
    return synth_scene("l-corner", seed=0)


@pytest.fixture(scope="session")
def corner_sample(corner_scene):
    scan, grid = corner_scene
    return build_sample(scan, grid, DatasetConfig(), seed=0, source_id="l-corner-000")
