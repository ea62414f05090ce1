import numpy as np
import pytest

from clickdet.encoder import EncoderConfig, StageSpec
from clickdet.scenes import SceneGenConfig, generate_scene


def small_scene_config(**overrides) -> SceneGenConfig:
    """A reduced generator config (~500-900 points) for fast tests."""
    base = dict(
        ground_density=0.35,
        surface_density=4.0,
        object_counts=((0, 2), (0, 2), (0, 1)),
        clutter_count=(1, 3),
        fov=(-12.0, 12.0, -12.0, 12.0),
    )
    base.update(overrides)
    return SceneGenConfig(**base)


def tiny_encoder_config(**overrides) -> EncoderConfig:
    base = dict(
        stages=(StageSpec(96, 8, (24, 24)), StageSpec(48, 8, (24, 24))),
        feature_dim=24,
    )
    base.update(overrides)
    return EncoderConfig(**base)


@pytest.fixture(scope="session")
def small_cfg() -> SceneGenConfig:
    return small_scene_config()


@pytest.fixture(scope="session")
def small_scenes(small_cfg):
    return [generate_scene(small_cfg, 100 + i) for i in range(6)]


@pytest.fixture(scope="session")
def mini_trained():
    """A briefly trained small detector shared by behavior tests."""
    from clickdet.estimator import ClickDetector

    cfg = small_scene_config()
    scenes = [generate_scene(cfg, 2000 + i) for i in range(40)]
    est = ClickDetector(
        stages=((96, 8, (24, 24)), (48, 8, (24, 24))),
        feature_dim=24,
        head_hidden=(48, 48, 48),
        epochs=8,
        seed=0,
        w_box=2.0,
    )
    est.fit(scenes)
    return est, cfg
