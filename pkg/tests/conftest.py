import numpy as np
import pytest

from pcac.pointcloud_io import RGB, from_voxels
from pcac.synthetic import smooth_corpus, smooth_cloud
from pcac.trainer import TrainConfig, train

# lines collected by test_acceptance, echoed in the terminal summary
ACCEPTANCE_LINES = []


def random_cloud(rng, n_voxels, depth, n_channels=3, rgb=True, low=0.0, high=255.0):
    size = 1 << depth
    n_voxels = min(n_voxels, size**3)
    flat = rng.choice(size**3, n_voxels, replace=False)
    voxels = np.column_stack(np.unravel_index(flat, (size, size, size)))
    attrs = rng.uniform(low, high, (n_voxels, n_channels))
    names = list(RGB) if rgb and n_channels == 3 else None
    return from_voxels(voxels, attrs, depth, channel_names=names)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def color_fixture():
    """512-voxel smooth color cloud (no texture, sensor noise kept)."""
    return smooth_cloud(np.random.default_rng(7), n_voxels=512, depth=6, texture_std=0.0)


@pytest.fixture(scope="session")
def textured_fixture():
    return smooth_cloud(np.random.default_rng(7), n_voxels=512, depth=6)


@pytest.fixture(scope="session")
def small_corpus():
    return smooth_corpus(6, seed=11, n_voxels=96, depth=4)


@pytest.fixture(scope="session")
def trained_models(small_corpus):
    """Quickly trained context and factorized models (3 epochs)."""
    ctx = train(small_corpus, TrainConfig(epochs=3, components="HLCS")).model
    fac = train(small_corpus, TrainConfig(epochs=3, components="")).model
    return {"context": ctx, "factorized": fac}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
