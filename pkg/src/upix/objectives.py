"""Training losses, timestep samplers, the optimizer, and the staged schedule."""

from __future__ import annotations

import logging
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ShapeError, Tape, Tensor
from .model import ModelConfig, ModelOutput, embed_batch, forward_packed, patches_to_images
from .tokens import SegmentKind, interpolate, patchify_tensor

log = logging.getLogger(__name__)

TIMESTEP_GUARD = 1e-4


# ---------------------------------------------------------------------------
# timesteps


@dataclass(frozen=True)
class TimestepSampler:
    mode: str = "logit_normal"  # or "uniform"
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.mode not in ("logit_normal", "uniform"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if self.mode == "logit_normal" and self.std <= 0:
            raise ValueError("logit-normal std must be positive")


def sample_timestep(sampler: TimestepSampler, rng: np.random.Generator, size=None):
    """Uniform on (d, 1-d), or sigmoid of a normal draw, clipped to the same band."""
    d = TIMESTEP_GUARD
    if sampler.mode == "uniform":
        return rng.uniform(d, 1.0 - d, size=size)
    z = rng.normal(sampler.mean, sampler.std, size=size)
    return np.clip(1.0 / (1.0 + np.exp(-z)), d, 1.0 - d)


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossWeights:
    perceptual: float = 0.1
    lm: float = 0.1

    def __post_init__(self):
        if self.perceptual < 0 or self.lm < 0:
            raise ValueError("loss weights must be non-negative")


def flow_matching_loss(predicted, target) -> Tensor:
    """Mean squared error between predicted and true clean patches."""
    if tuple(np.shape(predicted.data if isinstance(predicted, Tensor) else predicted)) != tuple(
        np.shape(target.data if isinstance(target, Tensor) else target)
    ):
        raise ShapeError(f"prediction {np.shape(predicted)} vs target {np.shape(target)}")
    diff = ad.sub(predicted, target)
    return ad.mean(diff * diff)


@dataclass
class FeatureNet:
    """Frozen random convolution stack read at strides 1, 2 and 4."""

    weights: dict[str, np.ndarray]

    @classmethod
    def create(cls, channels: int = 3, widths=(8, 16, 32), seed: int = 7) -> "FeatureNet":
        rng = np.random.default_rng(seed)
        fans = [channels, 4 * widths[0], 4 * widths[1]]
        w = {f"level{i}": rng.normal(0.0, 1.0 / np.sqrt(fan), size=(fan, width))
             for i, (fan, width) in enumerate(zip(fans, widths))}
        for arr in w.values():
            arr.setflags(write=False)
        return cls(w)

    def features(self, images) -> list[Tensor]:
        x = ad.as_tensor(images)
        b, h, w, _ = x.shape
        if h % 4 or w % 4:
            raise ShapeError(f"perceptual features need sides divisible by 4, got {h}x{w}")
        f1 = ad.silu(x @ self.weights["level0"])
        f2 = ad.silu(patchify_tensor(f1, 2) @ self.weights["level1"])
        f2 = f2.reshape(b, h // 2, w // 2, f2.shape[-1])
        f3 = ad.silu(patchify_tensor(f2, 2) @ self.weights["level2"])
        return [f1, f2, f3]


@lru_cache(maxsize=None)
def default_feature_net(channels: int = 3) -> FeatureNet:
    return FeatureNet.create(channels)


def perceptual_loss(predicted, target, net: FeatureNet) -> Tensor:
    if np.shape(predicted.data if isinstance(predicted, Tensor) else predicted) != np.shape(
        target.data if isinstance(target, Tensor) else target
    ):
        raise ShapeError("perceptual loss inputs differ in shape")
    total = None
    for fa, fb in zip(net.features(predicted), net.features(target)):
        d = fa - fb
        term = ad.mean(d * d)
        total = term if total is None else total + term
    return total


def lm_loss(logits, ids) -> Tensor:
    """Mean next-byte cross-entropy.

    ``logits`` rows follow the Text tokens of one or more samples in order;
    ``ids`` is one id list or a list of them.  Each token predicts the next
    id in its own sample; the last token (EOS) has no target.
    """
    logits = ad.as_tensor(logits)
    if len(ids) and np.isscalar(ids[0]):
        ids = [ids]
    rows, targets, start = [], [], 0
    for seq in ids:
        if len(seq) < 2:
            raise ValueError("text block needs at least 2 tokens for next-token targets")
        rows.extend(range(start, start + len(seq) - 1))
        targets.extend(int(i) for i in seq[1:])
        start += len(seq)
    if logits.shape[0] != start:
        raise ShapeError(f"{logits.shape[0]} logit rows for {start} text tokens")
    logp = ad.log_softmax(logits)
    picked = logp[np.asarray(rows), np.asarray(targets)]
    return -ad.mean(picked)


def combine_losses(terms: Mapping[str, Tensor | float], weights: LossWeights):
    """flow + w_perceptual * perceptual + w_lm * lm, over whichever terms exist."""
    total = None
    for name, scale in (("flow", 1.0), ("perceptual", weights.perceptual), ("lm", weights.lm)):
        if name not in terms:
            continue
        term = terms[name] if scale == 1.0 else ad.mul(terms[name], scale)
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("no loss terms")
    return ad.as_tensor(total)


@dataclass
class Targets:
    images: np.ndarray | None  # (B, H, W, C) clean images; None for text-only batches
    text_ids: list[list[int]]


def total_loss(output: ModelOutput, targets: Targets, weights: LossWeights, cfg: ModelConfig,
               featnet: FeatureNet | None = None) -> tuple[Tensor, dict[str, float]]:
    terms: dict[str, Tensor] = {}
    if output.patches is not None:
        if targets.images is None:
            raise ValueError("patch predictions without target images")
        true_patches = patchify_tensor(targets.images, cfg.patch_size).data
        terms["flow"] = flow_matching_loss(output.patches, true_patches)
        if featnet is not None:
            pred_images = patches_to_images(output.patches, output.grid, cfg)
            terms["perceptual"] = perceptual_loss(pred_images, targets.images, featnet)
    if output.text_logits is not None:
        terms["lm"] = lm_loss(output.text_logits, targets.text_ids)
    total = combine_losses(terms, weights)
    metrics = {k: float(v.data) for k, v in terms.items()}
    metrics["total"] = float(total.data)
    return total, metrics


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    clip: float = 1.0


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def adam_update(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
                optim: OptimConfig, lr: float | None = None):
    """One clipped Adam step.  Returns new params, new state, and the pre-clip norm."""
    lr = optim.lr if lr is None else lr
    norm = global_norm(grads)
    scale = min(1.0, optim.clip / (norm + 1e-12)) if optim.clip > 0 else 1.0
    step = state.step + 1
    b1, b2 = optim.beta1, optim.beta2
    new_params, m, v = {}, {}, {}
    for name, p in params.items():
        g = grads[name] * scale
        m[name] = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v[name] = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1**step)
        v_hat = v[name] / (1 - b2**step)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + optim.eps)
    return new_params, AdamState(step, m, v), norm


# ---------------------------------------------------------------------------
# training step


@dataclass
class Batch:
    images: np.ndarray | None  # (B, H, W, C)
    captions: list[bytes]
    conditions: list[list[np.ndarray]]

    @classmethod
    def from_records(cls, records, text_only: bool = False) -> "Batch":
        images = None if text_only else np.stack([r.target for r in records])
        conds = [[] if (text_only or r.condition is None) else [r.condition] for r in records]
        return cls(images, [r.caption for r in records], conds)

    def __len__(self) -> int:
        return len(self.captions)


class TrainingError(RuntimeError):
    pass


def compute_losses(params: Mapping[str, Tensor], cfg: ModelConfig, batch: Batch, t, noise,
                   weights: LossWeights, featnet: FeatureNet | None = None):
    """Loss for one batch at given timesteps and noise.  Returns (total, metrics, packed)."""
    if batch.images is None:
        packed = embed_batch(params, cfg, captions=batch.captions)
        out = forward_packed(params, cfg, packed, want_patches=False)
        targets = Targets(None, packed.text_ids)
        total, metrics = total_loss(out, targets, weights, cfg)
    else:
        noisy = interpolate(batch.images, noise, t)
        packed = embed_batch(params, cfg, captions=batch.captions, noisy=noisy, t=t,
                             conditions=batch.conditions)
        out = forward_packed(params, cfg, packed, want_text=weights.lm > 0)
        targets = Targets(batch.images, packed.text_ids)
        total, metrics = total_loss(out, targets, weights, cfg, featnet if weights.perceptual > 0 else None)
    metrics["cond_tokens"] = int((packed.kinds == SegmentKind.CONDITION).sum())
    return total, metrics, packed


def train_step(batch: Batch, params: Mapping[str, np.ndarray], opt_state: AdamState, weights: LossWeights,
               sampler: TimestepSampler, rng: np.random.Generator, *, cfg: ModelConfig,
               optim: OptimConfig = OptimConfig(), featnet: FeatureNet | None = None,
               lr: float | None = None, t=None):
    """Draw (t, noise), take one clipped Adam step.  Returns (params', state', metrics)."""
    b = len(batch)
    if batch.images is not None:
        # noise first, so the sampler mode only ever changes t
        noise = rng.standard_normal(batch.images.shape)
        t_draw = sample_timestep(sampler, rng, size=b)
        t = t_draw if t is None else np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    else:
        noise = None
    if featnet is None and weights.perceptual > 0:
        featnet = default_feature_net(cfg.channels)
    tracked = ad.leaves(params)
    with Tape() as tape:
        try:
            total, metrics, _ = compute_losses(tracked, cfg, batch, t, noise, weights, featnet)
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite value during forward pass: {exc}") from exc
        if not np.isfinite(total.data):
            raise TrainingError(f"non-finite loss {metrics}")
        grads = {k: g.data for k, g in tape.backward(total, tracked).items()}
    new_params, new_state, norm = adam_update(params, grads, opt_state, optim, lr)
    metrics["grad_norm"] = norm
    if t is not None:
        metrics["t_mean"] = float(np.mean(t))
    return new_params, new_state, metrics


# ---------------------------------------------------------------------------
# staged schedule


@dataclass(frozen=True)
class StageSpec:
    name: str
    resolution: int
    steps: int
    t2i_weight: float = 1.0
    lm_weight: float = 0.0
    cond_prob: float = 0.0
    sampler: TimestepSampler = TimestepSampler("logit_normal")


@dataclass(frozen=True)
class StagePlan:
    stages: tuple[StageSpec, ...]
    refine_steps: int = 0
    refine_sampler: TimestepSampler = TimestepSampler("uniform")

    def __post_init__(self):
        if not self.stages:
            raise ValueError("plan has no stages")
        res = [s.resolution for s in self.stages]
        if any(b < a for a, b in zip(res, res[1:])):
            raise ValueError(f"stage resolutions must be non-decreasing, got {res}")
        if self.stages[0].cond_prob != 0:
            raise ValueError("the first stage trains text-to-image and LM only")
        for s in self.stages:
            if not 0 <= s.cond_prob <= 1 or s.t2i_weight < 0 or s.lm_weight < 0 or s.steps < 0:
                raise ValueError(f"invalid task mix in stage {s.name}")
            if s.t2i_weight + s.lm_weight <= 0:
                raise ValueError(f"stage {s.name} has no task weight")

    @property
    def resolutions(self) -> list[int]:
        return sorted({s.resolution for s in self.stages})


def toy_plan(steps=(200, 200, 100), refine_steps: int = 50, cond_prob: float = 0.3) -> StagePlan:
    return StagePlan((
        StageSpec("I", 8, steps[0], 1.0, 0.1, 0.0),
        StageSpec("II", 16, steps[1], 1.0, 0.1, cond_prob),
        StageSpec("III", 32, steps[2], 1.0, 0.0, cond_prob),
    ), refine_steps)


def draw_batch(pools: Mapping[str, Sequence], size: int, cond_prob: float, rng: np.random.Generator):
    """Pick ``size`` records; each slot is conditional with probability ``cond_prob``."""
    cond_pool = pools.get("cond") or []
    if cond_prob > 0 and not cond_pool:
        raise ValueError("stage asks for conditional samples but the dataset has none")
    picks = []
    for _ in range(size):
        pool = cond_pool if cond_prob > 0 and rng.random() < cond_prob else pools["t2i"]
        picks.append(pool[int(rng.integers(len(pool)))])
    return picks


def split_pools(records) -> dict[str, list]:
    return {
        "t2i": [r for r in records if r.task == "t2i"],
        "cond": [r for r in records if r.task != "t2i"],
    }


def run_stage_schedule(plan: StagePlan, dataset: Mapping[int, Sequence] | Callable[[int], Sequence],
                       params: Mapping[str, np.ndarray], *, cfg: ModelConfig,
                       weights: LossWeights = LossWeights(), optim: OptimConfig = OptimConfig(),
                       batch_size: int = 16, seed: int = 0, featnet: FeatureNet | None = None,
                       on_step: Callable[[dict], None] | None = None,
                       on_stage_end: Callable[[str, dict], None] | None = None):
    """Run every stage in order, then the uniform-timestep refinement pass.

    ``dataset`` maps resolution to records (or is a callable doing so).
    Returns the final params and a list of per-step log records.
    """
    lookup = dataset if callable(dataset) else dataset.__getitem__
    featnet = featnet or default_feature_net(cfg.channels)
    stages = list(plan.stages)
    if plan.refine_steps:
        top = plan.stages[-1]
        stages.append(StageSpec("refine", top.resolution, plan.refine_steps, top.t2i_weight,
                                top.lm_weight, top.cond_prob, plan.refine_sampler))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    params = dict(params)
    opt_state = AdamState()
    logs: list[dict] = []
    step = 0
    for stage in stages:
        try:
            records = lookup(stage.resolution)
        except KeyError:
            raise ValueError(f"dataset has no records at resolution {stage.resolution}") from None
        if not records:
            raise ValueError(f"dataset has no records at resolution {stage.resolution}")
        pools = split_pools(records)
        if not pools["t2i"]:
            raise ValueError(f"no text-to-image records at resolution {stage.resolution}")
        lm_share = stage.lm_weight / (stage.t2i_weight + stage.lm_weight)
        log.info("stage %s: res=%d steps=%d sampler=%s", stage.name, stage.resolution, stage.steps,
                 stage.sampler.mode)
        for stage_step in range(stage.steps):
            text_only = lm_share > 0 and rng.random() < lm_share
            picks = draw_batch(pools, batch_size, 0.0 if text_only else stage.cond_prob, rng)
            batch = Batch.from_records(picks, text_only=text_only)
            params, opt_state, metrics = train_step(batch, params, opt_state, weights, stage.sampler, rng,
                                                    cfg=cfg, optim=optim, featnet=featnet)
            record = {
                "step": step, "stage": stage.name, "stage_step": stage_step,
                "resolution": stage.resolution, "sampler": stage.sampler.mode,
                "batch": "lm" if text_only else "t2i",
                "cond_samples": sum(1 for r in picks if r.condition is not None) if not text_only else 0,
                **metrics,
            }
            logs.append(record)
            if on_step:
                on_step(record)
            step += 1
        if on_stage_end:
            on_stage_end(stage.name, params)
    return params, logs


def cosine_schedule(base: float, total: int, floor: float = 0.1) -> Callable[[int], float]:
    """Cosine decay from ``base`` to ``floor * base`` over ``total`` steps."""
    def lr(step: int) -> float:
        frac = min(step / max(total - 1, 1), 1.0)
        return base * (floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * frac)))
    return lr


def fit(records: Sequence, steps: int, params: Mapping[str, np.ndarray], *, cfg: ModelConfig,
        weights: LossWeights = LossWeights(), optim: OptimConfig = OptimConfig(),
        sampler: TimestepSampler = TimestepSampler(), batch_size: int | None = None, seed: int = 0,
        featnet: FeatureNet | None = None, lr_schedule: Callable[[int], float] | None = None,
        on_step: Callable[[dict], None] | None = None):
    """Plain single-resolution training on a fixed record list.

    With ``batch_size`` None (or at least the dataset size) every step sees
    the whole set; otherwise each step draws a subset without replacement.
    """
    rng = np.random.default_rng(seed)
    featnet = featnet or default_feature_net(cfg.channels)
    params, opt_state, logs = dict(params), AdamState(), []
    full = batch_size is None or batch_size >= len(records)
    whole = Batch.from_records(records) if full else None
    for step in range(steps):
        if full:
            batch = whole
        else:
            batch = Batch.from_records([records[i] for i in rng.choice(len(records), batch_size, replace=False)])
        lr = lr_schedule(step) if lr_schedule else None
        params, opt_state, metrics = train_step(batch, params, opt_state, weights, sampler, rng, cfg=cfg,
                                                optim=optim, featnet=featnet, lr=lr)
        record = {"step": step, "stage": "fit", **metrics}
        logs.append(record)
        if on_step:
            on_step(record)
    return params, logs
