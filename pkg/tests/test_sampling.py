import numpy as np
import pytest
from hypothesis import given, strategies as st

from upix.autodiff import NonFiniteError
from upix.model import ModelConfig, init_params
from upix.sampling import (
    DISTILLED_STEPS, TEACHER_STEPS, SamplerConfig, euler_step, integrate, sample, time_grid, xpred_to_velocity,
)


def test_step_count_defaults():
    assert SamplerConfig().steps == TEACHER_STEPS == 50
    assert DISTILLED_STEPS == 28


def test_grid_endpoints_and_validation():
    g = time_grid(7)
    assert g[0] == 0.0 and g[-1] == 1.0 and np.all(np.diff(g) > 0)
    with pytest.raises(ValueError):
        SamplerConfig(0)
    with pytest.raises(ValueError):
        SamplerConfig(2, grid=(0.0, 0.7, 0.5))


def test_velocity_examples():
    x = np.array([0.3, -0.2])
    np.testing.assert_array_equal(xpred_to_velocity(x, x, 0.4), 0.0)
    eps = np.array([1.0, 2.0])
    np.testing.assert_array_equal(xpred_to_velocity(x, eps, 0.0), x - eps)
    assert xpred_to_velocity(1.0, 0.5, 0.5) == 1.0
    with pytest.raises(ValueError):
        xpred_to_velocity(x, x, 1.0 - 1e-5)


def test_euler_examples():
    assert euler_step(0.0, 2.0, 0.25) == 0.5
    x = np.array([1.0, -1.0])
    np.testing.assert_array_equal(euler_step(x, 0.0, 0.3), x)
    t, xt, target = 0.3, np.array([0.1, 0.9]), np.array([0.5, -0.5])
    np.testing.assert_allclose(euler_step(xt, xpred_to_velocity(target, xt, t), 1 - t), target, atol=1e-15)


@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 4, 9, 28, 50]))
def test_oracle_predictor_is_exact(seed, steps):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (2, 4, 4, 3))
    # random strictly increasing grid, capped below the guard band
    cuts = np.sort(rng.uniform(0.0, 0.999, steps - 1))
    config = SamplerConfig(steps, grid=(0.0, *cuts, 1.0)) if np.all(np.diff(cuts) > 0) else SamplerConfig(steps)
    out = integrate(lambda xt, t: x, rng.normal(size=x.shape), config, clamp=False)
    assert np.abs(out - x).max() <= 1e-9


def test_clamp_only_at_end():
    wild = np.full((1, 2, 2, 3), 3.0)
    out, traj = integrate(lambda xt, t: wild, np.zeros_like(wild), SamplerConfig(4), return_trajectory=True)
    assert out.max() == 1.0
    assert traj[-2].max() > 1.0


def test_nonfinite_state_detected():
    with pytest.raises(NonFiniteError):
        integrate(lambda xt, t: np.full(xt.shape, np.inf), np.zeros((1, 2, 2, 3)), SamplerConfig(2))


def test_model_sampling_deterministic():
    cfg = ModelConfig(layers=1, dim=16, heads=2)
    params = init_params(cfg, 0)
    a = sample(params, cfg, "red square center", 8, SamplerConfig(3), seed=4)
    b = sample(params, cfg, "red square center", 8, SamplerConfig(3), seed=4)
    assert a.shape == (8, 8, 3) and np.array_equal(a, b)
    assert np.abs(a).max() <= 1.0
