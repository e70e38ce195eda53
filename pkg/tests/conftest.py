import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pointcl import pointcloud as pcm


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_dataset():
    spec = pcm.SyntheticSpec(classes=["sphere", "cube", "cylinder", "torus"],
                             per_class=20, points_per_cloud=64)
    return pcm.generate_synthetic_dataset(spec, np.random.default_rng(0))


@pytest.fixture
def seg_dataset():
    spec = pcm.SyntheticSpec(classes=["cylinder", "cube"], per_class=10,
                             points_per_cloud=64, with_parts=True)
    return pcm.generate_synthetic_dataset(spec, np.random.default_rng(1))
