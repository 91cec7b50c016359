import numpy as np
import pytest
from hypothesis import settings

from upix.model import ModelConfig, init_params

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def tiny_cfg():
    return ModelConfig(layers=1, dim=16, heads=2, mlp_ratio=2)


@pytest.fixture
def tiny_params(tiny_cfg):
    params = init_params(tiny_cfg, 0)
    rng = np.random.default_rng(1)
    # break the zero init of the output projections so every path carries gradient
    return {k: v + 0.02 * rng.standard_normal(v.shape) if k.endswith(("wo", "w_down")) else v
            for k, v in params.items()}
