import numpy as np
import pytest

from eits.perceiver import PerceiverConfig, pretrain
from eits.scene import SceneGenConfig, SceneSpec, generate_scene


def empty_room(dims=(24, 24, 8), resolution=0.25, num_classes=6, feature_dim=16):
    """Floor slab + perimeter walls, no interior structure, no objects."""
    L, W, H = dims
    obstacles = np.zeros(dims, dtype=bool)
    obstacles[:, :, 0] = True
    obstacles[0, :, :] = obstacles[-1, :, :] = True
    obstacles[:, 0, :] = obstacles[:, -1, :] = True
    return SceneSpec(
        grid_dims=dims,
        resolution=resolution,
        obstacles=obstacles,
        objects=[],
        num_classes=num_classes,
        feature_dim=feature_dim,
        seed=0,
        scene_id="room",
    )


@pytest.fixture
def room():
    return empty_room()


@pytest.fixture(scope="session")
def scene7():
    return generate_scene(7, SceneGenConfig(), "scene7")


@pytest.fixture(scope="session")
def pretrained():
    params, report = pretrain(PerceiverConfig(), SceneGenConfig(), seed=11)
    return params, report
