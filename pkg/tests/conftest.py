import numpy as np
import pytest

from sop2.config import ModelConfig, RunConfig, desk_config
from sop2.pointcloud import PointCloud, Scene, SceneLabel

TINY_EXTENT = (0.0, 0.0, -2.0, 1.92, 1.92, 4.0)  # 6 x 6 cells


def tiny_model_config(**overrides) -> ModelConfig:
    """C=8, two heads, one block: small enough for finite differences over every tensor."""
    fields = dict(
        channels=8,
        heads=2,
        blocks=1,
        set_size=6,
        head_channels=4,
        window_sizes=[(3, 3)],
        extent=TINY_EXTENT,
        pool_size=4,
        prompt_length=2,
        top_k=2,
        num_tokens=1,
        generator_layers=2,
    )
    fields.update(overrides)
    return ModelConfig(**fields)


def random_scene(rng: np.random.Generator, config: ModelConfig, voxels: int, boxes: int = 2) -> Scene:
    """``voxels`` distinct occupied pillars with 1-3 points each, plus boxes centred in the extent."""
    nx, ny = config.grid_shape
    dx, dy, _ = config.grid_size
    x0, y0, z0, _, _, z1 = config.extent
    cells = rng.choice(nx * ny, size=voxels, replace=False)
    points = []
    for cell in cells:
        ix, iy = divmod(int(cell), ny)
        for _ in range(int(rng.integers(1, 4))):
            points.append([
                x0 + (ix + rng.uniform(0.05, 0.95)) * dx,
                y0 + (iy + rng.uniform(0.05, 0.95)) * dy,
                rng.uniform(z0, z1),
                rng.uniform(0.0, 1.0),
            ])
    label = []
    for b in range(boxes):
        label.append([
            x0 + rng.uniform(0.1, 0.9) * nx * dx,
            y0 + rng.uniform(0.1, 0.9) * ny * dy,
            rng.uniform(0.5, 4.0),
            rng.uniform(0.5, 2.0),
            rng.uniform(-np.pi, np.pi),
            b % 3,
        ])
    cloud = PointCloud(np.array(points), config.extent)
    return Scene(cloud, SceneLabel(np.array(label, dtype=np.float64).reshape(-1, 6)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def tiny_scenes(tiny_config):
    gen = np.random.default_rng(7)
    return [random_scene(gen, tiny_config, voxels=int(gen.integers(8, 21))) for _ in range(4)]


@pytest.fixture
def desk_run():
    return desk_config()


@pytest.fixture
def quick_run() -> RunConfig:
    """Desk dimensions with a training budget measured in seconds."""
    return desk_config().with_overrides(
        train={"epochs": 1, "scenes": 2, "eval_scenes": 1, "source_scenes": 2, "pretrain_epochs": 1}
    )
