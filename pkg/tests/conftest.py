import os
import sys

import numpy as np
import pytest
from hypothesis import settings, HealthCheck

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    from dynsplat.scene import SceneConfig, make_orbit_scene
    cfg = SceneConfig(n_gaussians=60, n_frames=24, width=48, height=48, motion="articulated",
                      occlusion_fraction=0.2, eval_frames=2, seed=3)
    return make_orbit_scene(cfg)
