"""Command-line entry point: dataset-gen, train, sample, distill, grad-check, eval.

Every subcommand prints one JSON object per line on stdout.  Exit status is
0 on success, 1 on invalid input, 2 on internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad
from .data import CaptionError, gen_synthetic_dataset
from .distill import DistillConfig, run_distillation
from .evaluate import evaluate
from .io import (
    CheckpointError, ConfigError, ImageFormatError, load_checkpoint, load_run_config, model_config_from,
    read_image, save_checkpoint, write_dataset, write_image,
)
from .model import ModelConfig, init_params
from .objectives import (
    Batch, FeatureNet, LossWeights, OptimConfig, StagePlan, StageSpec, TrainingError, compute_losses,
    run_stage_schedule,
)
from .report import loss_curves, sample_grid
from .sampling import TEACHER_STEPS, SamplerConfig, sample

log = logging.getLogger("upix")

SUBCOMMANDS = ("dataset-gen", "train", "sample", "distill", "grad-check", "eval")
STAGE_TASKS = {"t2i": 0.5, "edit": 0.25, "subject": 0.25}

# grad-check without --config runs on this reduced model
GRAD_CHECK_PRESET = ModelConfig(layers=1, dim=16, heads=2, mlp_ratio=2)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="upix", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}", parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path)
        p.add_argument("--steps", type=int)
        p.add_argument("--checkpoint", type=Path)
        p.add_argument("--prompt")
        p.add_argument("--condition", type=Path, action="append")
        p.add_argument("--resolution", type=int)
    return parser


def emit(record: dict) -> None:
    sys.stdout.write(json.dumps(record, sort_keys=True) + "\n")
    sys.stdout.flush()


def _settings(args) -> dict[str, Any]:
    run = load_run_config(args.config) if args.config else {}
    for key in ("seed", "out", "checkpoint"):
        value = getattr(args, key)
        if value is not None:
            run[key] = value
    run.setdefault("seed", 0)
    if args.steps is not None and args.steps < 0:
        raise UsageError("--steps must be non-negative")
    if args.resolution is not None and args.resolution < 4:
        raise UsageError("--resolution must be at least 4")
    return run


def _require(run: dict, key: str, flag: str):
    if run.get(key) is None:
        raise UsageError(f"{flag} is required")
    return Path(run[key])


def _write_jsonl(path: Path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_dataset_gen(args, run) -> None:
    out = _require(run, "out", "--out")
    res = args.resolution or 16
    count = args.steps if args.steps is not None else run.get("dataset_size", 64)
    records = gen_synthetic_dataset(count, res, run["seed"], tasks=STAGE_TASKS)
    index = write_dataset(out, records)
    emit({"command": "dataset-gen", "records": len(records), "resolution": res, "index": str(index)})


def _plan(run: dict, steps: int | None) -> StagePlan:
    resolutions = run.get("stage_resolutions", [8, 16, 32])
    counts = run.get("stage_steps", [200, 200, 100])
    if steps is not None:
        counts = [steps] * len(resolutions)
    if len(counts) != len(resolutions):
        raise ConfigError("stage_steps and stage_resolutions differ in length")
    cond, lm = run.get("cond_prob", 0.3), run.get("lm_weight", 0.1)
    stages = tuple(
        StageSpec(name, res, n, 1.0, lm if i < len(resolutions) - 1 else 0.0, 0.0 if i == 0 else cond)
        for i, (name, res, n) in enumerate(zip(("I", "II", "III", "IV", "V"), resolutions, counts))
    )
    return StagePlan(stages, run.get("refine_steps", 0 if steps is not None else 50))


def cmd_train(args, run) -> None:
    out = _require(run, "out", "--out")
    out.mkdir(parents=True, exist_ok=True)
    cfg = model_config_from(run)
    try:
        plan = _plan(run, args.steps)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    size = run.get("dataset_size", 256)
    datasets = {r: gen_synthetic_dataset(size, r, run["seed"], tasks=STAGE_TASKS, patch_size=cfg.patch_size)
                for r in plan.resolutions}
    weights = LossWeights(run.get("lambda_perceptual", 0.1), run.get("lambda_lm", 0.1))
    params = init_params(cfg, run["seed"])
    metrics_path = out / "metrics.jsonl"
    metrics_fh = open(metrics_path, "w", encoding="utf-8")

    def on_step(rec):
        metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def on_stage_end(name, p):
        path = out / f"stage_{name}.ckpt"
        save_checkpoint(path, cfg, p)
        emit({"command": "train", "stage": name, "checkpoint": str(path)})

    try:
        params, logs = run_stage_schedule(
            plan, datasets, params, cfg=cfg, weights=weights, optim=OptimConfig(lr=run.get("lr", 2e-3)),
            batch_size=run.get("batch_size", 16), seed=run["seed"], on_step=on_step, on_stage_end=on_stage_end)
    finally:
        metrics_fh.close()
    final = out / "model.ckpt"
    save_checkpoint(final, cfg, params)
    figure = loss_curves(logs, out / "loss_curves.png", "training") if logs else None
    last = logs[-1] if logs else {}
    emit({"command": "train", "checkpoint": str(final), "steps": len(logs), "metrics": str(metrics_path),
          "figure": str(figure) if figure else None, "flow": last.get("flow"), "lm": last.get("lm")})


def cmd_sample(args, run) -> None:
    ckpt = _require(run, "checkpoint", "--checkpoint")
    out = _require(run, "out", "--out")
    if args.prompt is None:
        raise UsageError("--prompt is required")
    cfg, params = load_checkpoint(ckpt)
    res = args.resolution or 16
    if res % cfg.patch_size or res % cfg.cond_stride:
        raise UsageError(f"--resolution {res} must be divisible by {cfg.patch_size} and {cfg.cond_stride}")
    conditions = [read_image(p) for p in (args.condition or [])]
    for c in conditions:
        if c.shape != (res, res, 3):
            raise UsageError(f"condition image {c.shape} does not match resolution {res}")
    steps = args.steps or run.get("sampler_steps", TEACHER_STEPS)
    image = sample(params, cfg, args.prompt, res, SamplerConfig(steps), run["seed"], conditions)
    write_image(out, image)
    emit({"command": "sample", "out": str(out), "steps": steps, "seed": run["seed"]})


def cmd_distill(args, run) -> None:
    ckpt = _require(run, "checkpoint", "--checkpoint")
    out = _require(run, "out", "--out")
    out.mkdir(parents=True, exist_ok=True)
    cfg, teacher = load_checkpoint(ckpt)
    res = args.resolution or 16
    dc = DistillConfig(lambda_diff=run.get("lambda_diff", 0.25), lambda_adv=run.get("lambda_adv", 0.01),
                       student_steps=run.get("student_steps", 4), fake_ratio=run.get("fake_ratio", 5))
    steps = args.steps if args.steps is not None else run.get("distill_steps", 300)
    records = gen_synthetic_dataset(run.get("dataset_size", 64), res, run["seed"], tasks={"t2i": 1.0},
                                    patch_size=cfg.patch_size)
    state, logs, (before, after) = run_distillation(teacher, cfg, records, steps, dc, seed=run["seed"])
    _write_jsonl(out / "metrics.jsonl", logs)
    save_checkpoint(out / "student.ckpt", cfg, state.student)
    figure = loss_curves(logs, out / "distill_curves.png", "distillation") if logs else None
    emit({"command": "distill", "checkpoint": str(out / "student.ckpt"), "steps": steps,
          "flow_consistency_before": before, "flow_consistency_after": after,
          "figure": str(figure) if figure else None})


def grad_check_loss(cfg: ModelConfig, seed: int):
    """A fresh model on one short sequence; returns (loss fn, params).

    The sequence is as short as it can be while every segment kind shows
    up: one condition token, BOS and EOS of an empty caption, the timestep
    and the target's patches.
    """
    rng = np.random.default_rng(seed)
    res = int(np.lcm(4, cfg.patch_size))  # perceptual features need sides divisible by 4
    batch = Batch(rng.uniform(-1, 1, (1, res, res, cfg.channels)), [b""],
                  [[rng.uniform(-1, 1, (cfg.cond_stride, cfg.cond_stride, cfg.channels))]])
    t = rng.uniform(0.1, 0.9, size=1)
    noise = rng.standard_normal(batch.images.shape)
    weights = LossWeights(0.1, 0.1)
    featnet = FeatureNet.create(cfg.channels)
    params = init_params(cfg, seed)
    # zero-initialized projections would hide half the gradient paths
    prng = np.random.default_rng(seed + 1)
    params = {k: v + 0.02 * prng.standard_normal(v.shape) if k.endswith(("wo", "w_down")) else v
              for k, v in params.items()}

    def loss(p):
        return compute_losses(p, cfg, batch, t, noise, weights, featnet)[0]

    return loss, params


def cmd_grad_check(args, run) -> None:
    cfg = model_config_from(run, GRAD_CHECK_PRESET) if args.config else GRAD_CHECK_PRESET
    fn, params = grad_check_loss(cfg, run["seed"])
    start = time.perf_counter()
    err, worst = ad.finite_difference_check(fn, params, details=True)
    emit({"command": "grad-check", "max_rel_error": err, "worst": f"{worst[0]}{list(worst[1])}",
          "params": int(sum(v.size for v in params.values())), "seconds": round(time.perf_counter() - start, 2)})


def cmd_eval(args, run) -> None:
    ckpt = _require(run, "checkpoint", "--checkpoint")
    cfg, params = load_checkpoint(ckpt)
    res = args.resolution or 16
    steps = args.steps or run.get("sampler_steps", TEACHER_STEPS)
    count = run.get("dataset_size", 64)
    metrics, images, records = evaluate(params, cfg, count=count, resolution=res, steps=steps, seed=run["seed"])
    record = {"command": "eval", **metrics}
    if run.get("out") is not None:
        out = Path(run["out"])
        out.mkdir(parents=True, exist_ok=True)
        _write_jsonl(out / "eval.jsonl", [record])
        grid = sample_grid(images[:16], out / "samples.png", [r.caption.decode() for r in records[:16]])
        record["figure"] = str(grid)
    emit(record)


COMMANDS = {
    "dataset-gen": cmd_dataset_gen, "train": cmd_train, "sample": cmd_sample,
    "distill": cmd_distill, "grad-check": cmd_grad_check, "eval": cmd_eval,
}

VALIDATION_ERRORS = (UsageError, ConfigError, CheckpointError, ImageFormatError, CaptionError,
                     FileNotFoundError, IsADirectoryError, PermissionError)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "upix: error: a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        run = _settings(args)
        COMMANDS[args.command](args, run)
    except VALIDATION_ERRORS as exc:
        print(str(exc) if isinstance(exc, UsageError) else f"upix: error: {exc}", file=sys.stderr)
        return 1
    except TrainingError as exc:
        print(f"upix: training aborted: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"upix: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
