"""Deterministic Euler sampling from noise to image with an x-predicting model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import NonFiniteError
from .model import ModelConfig, predict_clean

TEACHER_STEPS = 50
DISTILLED_STEPS = 28
TERMINAL_GUARD = 1e-4

# (x_t, t) -> predicted clean image, both (B, H, W, C); t is (B,)
Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = TEACHER_STEPS
    guard: float = TERMINAL_GUARD
    grid: tuple[float, ...] | None = None  # explicit grid overrides the uniform one

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("sampler needs at least one step")
        if self.grid is not None:
            g = np.asarray(self.grid, dtype=np.float64)
            if len(g) != self.steps + 1 or g[0] != 0.0 or g[-1] != 1.0 or np.any(np.diff(g) <= 0):
                raise ValueError("grid must run strictly increasing from 0 to 1 with steps+1 points")

    def time_grid(self) -> np.ndarray:
        return time_grid(self.steps) if self.grid is None else np.asarray(self.grid, dtype=np.float64)


def time_grid(steps: int) -> np.ndarray:
    g = np.linspace(0.0, 1.0, steps + 1)
    g[0], g[-1] = 0.0, 1.0
    return g


def xpred_to_velocity(x_hat, x_t, t, guard: float = TERMINAL_GUARD) -> np.ndarray:
    """v = (x_hat - x_t) / (1 - t), the path derivative implied by a clean prediction."""
    x_hat, x_t = np.asarray(x_hat, dtype=np.float64), np.asarray(x_t, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t >= 1.0 - guard):
        raise ValueError(f"t={t} is inside the terminal guard band")
    if t.ndim:
        t = t.reshape(t.shape + (1,) * (x_t.ndim - t.ndim))
    return (x_hat - x_t) / (1.0 - t)


def euler_step(x_t, v, dt: float) -> np.ndarray:
    return x_t + dt * v


def integrate(predictor: Predictor, noise: np.ndarray, config: SamplerConfig = SamplerConfig(),
              *, return_trajectory: bool = False, clamp: bool = True):
    """Run the Euler loop from x_0 = noise.  Only the final state is clamped.

    ``noise`` is (B, H, W, C).  With a perfect predictor every step lands on
    the straight path, so the result is exact for any grid.
    """
    x = np.array(noise, dtype=np.float64)
    b = x.shape[0]
    grid = config.time_grid()
    trajectory = [x.copy()]
    for t0, t1 in zip(grid[:-1], grid[1:]):
        t_vec = np.full(b, t0)
        x_hat = np.asarray(predictor(x, t_vec), dtype=np.float64)
        if x_hat.shape != x.shape:
            raise ValueError(f"predictor returned {x_hat.shape}, expected {x.shape}")
        x = euler_step(x, xpred_to_velocity(x_hat, x, t_vec, config.guard), t1 - t0)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite sampler state at t={t1:.4f}")
        if return_trajectory:
            trajectory.append(x.copy())
    if clamp:
        x = np.clip(x, -1.0, 1.0)
    return (x, trajectory) if return_trajectory else x


def model_predictor(params: Mapping[str, np.ndarray], cfg: ModelConfig, captions: Sequence[bytes],
                    conditions: Sequence[Sequence[np.ndarray]] | None = None) -> Predictor:
    """Wrap the backbone as an x-predictor; the token sequence is rebuilt at every call."""
    captions = list(captions)

    def predict(x_t: np.ndarray, t: np.ndarray) -> np.ndarray:
        images, _ = predict_clean(params, cfg, x_t, t, captions, conditions)
        return images.data

    return predict


def initial_noise(seed: int, count: int, resolution: int, channels: int = 3) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    return rng.standard_normal((count, resolution, resolution, channels))


def sample_batch(params: Mapping[str, np.ndarray], cfg: ModelConfig, captions: Sequence[bytes],
                 resolution: int, config: SamplerConfig = SamplerConfig(), seed: int = 0,
                 conditions: Sequence[Sequence[np.ndarray]] | None = None,
                 noise: np.ndarray | None = None) -> np.ndarray:
    if resolution % cfg.patch_size:
        raise ValueError(f"resolution {resolution} not divisible by patch size {cfg.patch_size}")
    if noise is None:
        noise = initial_noise(seed, len(captions), resolution, cfg.channels)
    return integrate(model_predictor(params, cfg, captions, conditions), noise, config)


def sample(params: Mapping[str, np.ndarray], cfg: ModelConfig, text: bytes | str, resolution: int,
           config: SamplerConfig = SamplerConfig(), seed: int = 0,
           condition: Sequence[np.ndarray] = ()) -> np.ndarray:
    """One (H, W, C) image in [-1, 1] for a caption and optional condition images."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return sample_batch(params, cfg, [text], resolution, config, seed, [list(condition)])[0]
