import json
from pathlib import Path

import numpy as np
import pytest

from mvgrid_edit.processing.mvgrid import MvGrid, ViewImage, assemble, dequantize
from mvgrid_edit.processing.synth import make_dataset
from mvgrid_edit.processing.velocity import GaussianFlowModel, LinearFlowModel, TileMap, TinyFlowNet

TILE = 8
REFERENCE_RUN = Path(__file__).parent.resolve() / "data/reference_run.json"


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run acceptance-scale tests")
    parser.addoption(
        "--update-reference",
        action="store_true",
        default=False,
        help="write the measured reference run into tests/data/reference_run.json",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture()
def tile_size():
    return TILE


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture()
def random_tiles(rng):
    return [ViewImage(rng.uniform(-1, 1, (TILE, TILE, 3))) for _ in range(6)]


@pytest.fixture()
def quantized_grid(rng):
    return MvGrid(dequantize(rng.integers(0, 256, (3 * TILE, 2 * TILE, 3))))


@pytest.fixture()
def mean_map():
    return TileMap.random(np.random.default_rng(7), scale=0.8, spread=0.05)


@pytest.fixture()
def gaussian_model(mean_map):
    return GaussianFlowModel(mean_map, data_std=0.05)


@pytest.fixture()
def linear_model():
    gen = np.random.default_rng(11)
    return LinearFlowModel(
        A=0.1 * gen.standard_normal((3, 3)),
        B=TileMap.random(gen, scale=0.5, spread=0.05),
        b=0.05 * gen.standard_normal((3 * TILE, 2 * TILE, 3)),
    )


@pytest.fixture()
def tiny_net():
    return TinyFlowNet(tile_size=TILE, channels=8, seed=0)


@pytest.fixture()
def source_views(rng):
    """A source view and an edited view that differs on a small patch."""
    i_src = rng.uniform(-0.5, 0.5, (TILE, TILE, 3))
    i_tar = i_src.copy()
    i_tar[2:4, 3:5] += 0.1
    return ViewImage(i_src), ViewImage(i_tar)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("dataset")
    make_dataset(6, seed=3, tile_size=TILE, out_dir=out)
    return out


@pytest.fixture()
def six_tiles_grid(random_tiles):
    return assemble(random_tiles)


@pytest.fixture(scope="session")
def reference_run():
    """Configurations, thresholds and measured results of the recorded reference run."""
    return json.loads(REFERENCE_RUN.read_text())


@pytest.fixture(scope="session")
def update_reference(request):
    return request.config.getoption("--update-reference")
