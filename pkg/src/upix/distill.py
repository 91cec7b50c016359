"""Few-step distillation: DMD with auxiliary diffusion and adversarial terms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .model import ModelConfig, predict_clean
from .objectives import (
    AdamState, Batch, LossWeights, OptimConfig, TimestepSampler, adam_update, flow_matching_loss,
    sample_timestep, train_step,
)
from .sampling import (
    TERMINAL_GUARD, SamplerConfig, euler_step, initial_noise, integrate, model_predictor, xpred_to_velocity,
)

# x_t (B,H,W,C), t (B,) -> clean prediction (B,H,W,C)
Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DistillConfig:
    lambda_diff: float = 0.25
    lambda_adv: float = 0.01
    student_steps: int = 4
    fake_ratio: int = 5
    disc_hidden: int = 32
    student_lr: float = 1e-5
    fake_lr: float = 1e-4
    disc_lr: float = 1e-3
    batch_size: int = 8
    renoise: TimestepSampler = TimestepSampler("uniform")
    # DMD re-noising band; near t=1 the teacher residual vanishes and the
    # normalized gradient blows up
    dmd_t_min: float = 0.02
    dmd_t_max: float = 0.98

    def __post_init__(self):
        if self.lambda_diff < 0 or self.lambda_adv < 0:
            raise ValueError("distillation loss weights must be non-negative")
        if self.fake_ratio < 1:
            raise ValueError("fake-score update ratio must be >= 1")
        if self.student_steps < 1:
            raise ValueError("student needs at least one step")
        if not 0.0 <= self.dmd_t_min < self.dmd_t_max < 1.0 - TERMINAL_GUARD:
            raise ValueError("DMD re-noising band must sit inside [0, 1 - guard)")


def feature_levels(layers: int) -> tuple[int, ...]:
    """Teacher blocks read by the discriminator: the middle one and the last."""
    return tuple(sorted({math.ceil(layers / 2), layers}))


@dataclass
class DiscriminatorParams:
    weights: dict[str, np.ndarray]
    levels: tuple[int, ...]

    @classmethod
    def create(cls, cfg: ModelConfig, hidden: int = 32, seed: int = 0) -> "DiscriminatorParams":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        levels = feature_levels(cfg.layers)
        w = {f"head{lvl}": rng.normal(0.0, 1.0 / np.sqrt(cfg.dim), (cfg.dim, hidden)) for lvl in levels}
        w["combine"] = rng.normal(0.0, 1.0 / np.sqrt(hidden * len(levels)), (hidden * len(levels), 1))
        return cls(w, levels)


def disc_logits(disc: Mapping[str, Tensor], features: Mapping[int, Tensor], levels: Sequence[int]) -> Tensor:
    """Per-level head on (B, N, D) teacher activations, mean-pooled, then combined to (B,)."""
    pooled = [ad.mean(ad.silu(features[lvl] @ disc[f"head{lvl}"]), axis=1) for lvl in levels]
    out = ad.concat(pooled, axis=-1) @ disc["combine"]
    return out.reshape(out.shape[0])


def teacher_features(teacher: Mapping[str, np.ndarray], cfg: ModelConfig, images, t, captions,
                     conditions, levels: Sequence[int]) -> dict[int, Tensor]:
    """Run the frozen teacher and keep the Generation-token activations at ``levels``.

    Teacher weights enter as plain arrays, so no gradient can reach them;
    gradients still flow into ``images`` when it is tracked.
    """
    _, out = predict_clean(teacher, cfg, images, t, captions, conditions, capture=levels)
    return out.features


def adversarial_losses(logit_real: Tensor | None, logit_fake: Tensor):
    """Non-saturating logistic losses: (discriminator, generator)."""
    gen = ad.mean(ad.softplus(-logit_fake))
    if logit_real is None:
        return None, gen
    disc = ad.mean(ad.softplus(-logit_real)) + ad.mean(ad.softplus(logit_fake))
    return disc, gen


def renoise(images, t, noise):
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1, 1, 1)
    return ad.add(ad.mul(images, t), noise * (1.0 - t))


def adversarial_step(disc: DiscriminatorParams, real: np.ndarray, fake: np.ndarray, teacher,
                     cfg: ModelConfig, captions, conditions, t, noise_real, noise_fake):
    """Discriminator loss, generator loss, and head gradients at a shared t."""
    if np.shape(real) != np.shape(fake):
        raise ad.ShapeError(f"real {np.shape(real)} and student {np.shape(fake)} images differ")
    tracked = ad.leaves(disc.weights)
    with Tape() as tape:
        f_real = teacher_features(teacher, cfg, renoise(real, t, noise_real), t, captions, conditions, disc.levels)
        f_fake = teacher_features(teacher, cfg, renoise(fake, t, noise_fake), t, captions, conditions, disc.levels)
        d_loss, g_loss = adversarial_losses(disc_logits(tracked, f_real, disc.levels),
                                            disc_logits(tracked, f_fake, disc.levels))
        grads = {k: g.data for k, g in tape.backward(d_loss, tracked).items()}
    return float(d_loss.data), float(g_loss.data), grads


def dmd_generator_gradient(x_g, teacher: Predictor, fake: Predictor, t, noise,
                           guard: float = TERMINAL_GUARD, normalize: bool = True) -> np.ndarray:
    """x_hat_fake(x_t, t) - x_hat_teacher(x_t, t), both held constant.

    ``x_g`` is re-noised with (t, noise) first.  The difference is divided by
    the mean |x_g - x_hat_teacher| per sample so the step size does not
    depend on how far the student is from the teacher.
    """
    x_g = np.asarray(x_g.data if isinstance(x_g, Tensor) else x_g, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x_g.shape[0],))
    if np.any(t >= 1.0 - guard) or np.any(t < 0.0):
        raise ValueError(f"re-noising time {t} outside [0, 1 - guard)")
    x_t = renoise(x_g, t, noise).data
    real_pred = np.asarray(teacher(x_t, t), dtype=np.float64)
    fake_pred = np.asarray(fake(x_t, t), dtype=np.float64)
    grad = fake_pred - real_pred
    if normalize:
        axes = tuple(range(1, x_g.ndim))
        scale = np.mean(np.abs(x_g - real_pred), axis=axes, keepdims=True)
        grad = grad / np.maximum(scale, 1e-8)
    return grad


def dmd_loss(x_g, grad: np.ndarray) -> Tensor:
    """0.5 * mean((x_g - sg(x_g - grad))^2); its x_g-gradient is grad / x_g.size."""
    target = ad.stop_gradient(ad.sub(x_g, grad))
    d = ad.sub(x_g, target)
    return ad.mean(d * d) * 0.5


@dataclass
class DistillState:
    student: dict[str, np.ndarray]
    fake: dict[str, np.ndarray]
    disc: DiscriminatorParams
    student_opt: AdamState = field(default_factory=AdamState)
    fake_opt: AdamState = field(default_factory=AdamState)
    disc_opt: AdamState = field(default_factory=AdamState)
    step: int = 0

    @classmethod
    def from_teacher(cls, teacher: Mapping[str, np.ndarray], cfg: ModelConfig, config: DistillConfig,
                     seed: int = 0) -> "DistillState":
        copy = {k: np.array(v, copy=True) for k, v in teacher.items()}
        return cls(copy, {k: v.copy() for k, v in copy.items()},
                   DiscriminatorParams.create(cfg, config.disc_hidden, seed))


def student_generate(params, cfg: ModelConfig, batch: Batch, noise: np.ndarray, steps: int,
                     stop: int) -> tuple[np.ndarray, np.ndarray]:
    """Backward simulation: ``stop`` untracked student Euler steps from noise.

    Returns the state and its time; the student's tracked prediction there is x_g.
    """
    grid = SamplerConfig(steps).time_grid()
    predictor = model_predictor(params, cfg, batch.captions, batch.conditions)
    x = np.asarray(noise, dtype=np.float64)
    for t0, t1 in zip(grid[:stop], grid[1:stop + 1]):
        t_vec = np.full(x.shape[0], t0)
        x = euler_step(x, xpred_to_velocity(predictor(x, t_vec), x, t_vec), t1 - t0)
    return x, np.full(x.shape[0], grid[stop])


@dataclass(frozen=True)
class StudentDraws:
    """Random draws of one student update, fixed so the update can be replayed."""

    t_dmd: np.ndarray
    noise_dmd: np.ndarray
    t_diff: np.ndarray
    noise_diff: np.ndarray
    t_adv: np.ndarray
    noise_adv: np.ndarray


def student_gradients(student: Mapping[str, np.ndarray], teacher: Mapping[str, np.ndarray],
                      fake: Mapping[str, np.ndarray], disc: DiscriminatorParams, cfg: ModelConfig, batch: Batch,
                      x_start: np.ndarray, t_start: np.ndarray, config: DistillConfig, draws: StudentDraws):
    """Gradient of DMD + lambda_diff * flow + lambda_adv * generator loss w.r.t. the student.

    Returns (grads, per-term losses, total loss, raw DMD gradient on x_g).
    """
    teacher_pred = model_predictor(teacher, cfg, batch.captions, batch.conditions)
    fake_pred = model_predictor(fake, cfg, batch.captions, batch.conditions)
    tracked = ad.leaves(student)
    disc_frozen = {k: Tensor(v) for k, v in disc.weights.items()}
    with Tape() as tape:
        x_g, _ = predict_clean(tracked, cfg, x_start, t_start, batch.captions, batch.conditions)
        grad = dmd_generator_gradient(x_g, teacher_pred, fake_pred, draws.t_dmd, draws.noise_dmd)
        terms = {"dmd": dmd_loss(x_g, grad)}
        if config.lambda_diff > 0:
            x_t = renoise(batch.images, draws.t_diff, draws.noise_diff).data
            pred, _ = predict_clean(tracked, cfg, x_t, draws.t_diff, batch.captions, batch.conditions)
            terms["diff"] = flow_matching_loss(pred, batch.images)
        if config.lambda_adv > 0:
            feats = teacher_features(teacher, cfg, renoise(x_g, draws.t_adv, draws.noise_adv), draws.t_adv,
                                     batch.captions, batch.conditions, disc.levels)
            _, terms["adv"] = adversarial_losses(None, disc_logits(disc_frozen, feats, disc.levels))
        total = terms["dmd"]
        if "diff" in terms:
            total = total + terms["diff"] * config.lambda_diff
        if "adv" in terms:
            total = total + terms["adv"] * config.lambda_adv
        grads = {k: g.data for k, g in tape.backward(total, tracked).items()}
    return grads, {k: float(v.data) for k, v in terms.items()}, float(total.data), grad


def distill_step(state: DistillState, teacher: Mapping[str, np.ndarray], cfg: ModelConfig, batch: Batch,
                 config: DistillConfig, rng: np.random.Generator) -> tuple[DistillState, dict[str, float]]:
    """One outer step: r fake-score updates, one discriminator update, one student update."""
    b = len(batch)
    shape = batch.images.shape
    noise = rng.standard_normal(shape)
    # the student's sample is its prediction at the last grid point; earlier
    # steps run untracked
    stop = config.student_steps - 1
    x_start, t_start = student_generate(state.student, cfg, batch, noise, config.student_steps, stop)

    # current student samples (no gradient) feed the fake score and the discriminator
    with_pred = model_predictor(state.student, cfg, batch.captions, batch.conditions)
    x_g_const = with_pred(x_start, t_start)

    fake = state.fake
    fake_opt = state.fake_opt
    fake_batch = Batch(x_g_const, batch.captions, batch.conditions)
    fake_optim = OptimConfig(lr=config.fake_lr)
    for _ in range(config.fake_ratio):
        fake, fake_opt, _ = update_fake_score(fake, fake_opt, fake_batch, cfg, config.renoise, rng, fake_optim)

    t_adv = sample_timestep(config.renoise, rng, size=b)
    n_real, n_fake = rng.standard_normal(shape), rng.standard_normal(shape)
    disc = state.disc
    d_loss, _, d_grads = adversarial_step(disc, batch.images, x_g_const, teacher, cfg, batch.captions,
                                          batch.conditions, t_adv, n_real, n_fake)
    new_disc_w, disc_opt, _ = adam_update(disc.weights, d_grads, state.disc_opt, OptimConfig(lr=config.disc_lr))
    disc = DiscriminatorParams(new_disc_w, disc.levels)

    # student update
    t_dmd = rng.uniform(config.dmd_t_min, config.dmd_t_max, size=b)
    n_dmd = rng.standard_normal(shape)
    t_diff = sample_timestep(config.renoise, rng, size=b)
    n_diff = rng.standard_normal(shape)

    draws = StudentDraws(t_dmd, n_dmd, t_diff, n_diff, t_adv, n_fake)
    grads, terms, total, grad = student_gradients(state.student, teacher, fake, disc, cfg, batch, x_start,
                                                  t_start, config, draws)
    student, student_opt, gnorm = adam_update(state.student, grads, state.student_opt,
                                              OptimConfig(lr=config.student_lr))

    metrics = {
        "dmd": terms["dmd"],
        "diff": terms.get("diff", 0.0),
        "adv": terms.get("adv", 0.0),
        "disc": d_loss,
        "total": total,
        "grad_norm": gnorm,
        "dmd_grad_abs": float(np.mean(np.abs(grad))),
    }
    new_state = DistillState(student, fake, disc, student_opt, fake_opt, disc_opt, state.step + 1)
    return new_state, metrics


def update_fake_score(fake: Mapping[str, np.ndarray], opt: AdamState, samples: Batch, cfg: ModelConfig,
                      sampler: TimestepSampler, rng: np.random.Generator, optim: OptimConfig = OptimConfig()):
    """One flow-matching step of the fake net, treating student samples as data."""
    return train_step(samples, dict(fake), opt, LossWeights(0.0, 0.0), sampler, rng, cfg=cfg, optim=optim)


def flow_consistency(student: Mapping[str, np.ndarray], teacher: Mapping[str, np.ndarray], cfg: ModelConfig,
                     captions: Sequence[bytes], resolution: int, *, student_steps: int = 4,
                     teacher_steps: int = 50, seed: int = 0, conditions=None, reference=None) -> float:
    """MSE between few-step student samples and many-step teacher samples from the same noise."""
    noise = initial_noise(seed, len(captions), resolution, cfg.channels)
    if reference is None:
        reference = integrate(model_predictor(teacher, cfg, captions, conditions), noise, SamplerConfig(teacher_steps))
    out = integrate(model_predictor(student, cfg, captions, conditions), noise, SamplerConfig(student_steps))
    return float(np.mean((out - reference) ** 2))


def run_distillation(teacher: Mapping[str, np.ndarray], cfg: ModelConfig, records: Sequence, steps: int,
                     config: DistillConfig = DistillConfig(), *, seed: int = 0, probe: int = 8,
                     on_step: Callable[[dict], None] | None = None):
    """Distill for ``steps`` outer steps on ``records``.

    Flow-consistency is measured on the first ``probe`` captions before and
    after, against one shared many-step teacher reference.  Returns
    (state, logs, (before, after)).
    """
    res = records[0].target.shape[0]
    captions = [r.caption for r in records[:probe]]
    reference = integrate(model_predictor(teacher, cfg, captions, None),
                          initial_noise(seed, len(captions), res, cfg.channels), SamplerConfig())
    state = DistillState.from_teacher(teacher, cfg, config, seed)
    before = flow_consistency(state.student, teacher, cfg, captions, res, student_steps=config.student_steps,
                              seed=seed, reference=reference)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    logs = []
    for step in range(steps):
        idx = rng.choice(len(records), size=min(config.batch_size, len(records)), replace=False)
        state, metrics = distill_step(state, teacher, cfg, Batch.from_records([records[i] for i in idx]),
                                      config, rng)
        record = {"step": step, "stage": "distill", **metrics}
        logs.append(record)
        if on_step:
            on_step(record)
    after = flow_consistency(state.student, teacher, cfg, captions, res, student_steps=config.student_steps,
                             seed=seed, reference=reference)
    return state, logs, (before, after)
