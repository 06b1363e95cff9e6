import numpy as np
import pytest

from purearl.data import Dataset
from purearl.envs import generate_dataset, load_maze


@pytest.fixture
def gridmaze():
    return load_maze("gridmaze5")


@pytest.fixture
def pointmaze():
    return load_maze("pointmaze5")


@pytest.fixture
def point_dataset(pointmaze):
    return generate_dataset(pointmaze, "stitch", 8, 40, 0.2, 0)


@pytest.fixture
def grid_dataset(gridmaze):
    return generate_dataset(gridmaze, "stitch", 8, 30, 0.2, 0)


@pytest.fixture
def counting_dataset():
    # state value equals 100 * trajectory + step, for checking indices
    n, h = 3, 10
    states = np.zeros((n, h + 1, 2))
    states[:, :, 0] = 100 * np.arange(n)[:, None] + np.arange(h + 1)[None, :]
    actions = np.ones((n, h, 2))
    return Dataset(states, actions, env_id="counting", goal_radius=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
