"""Checkpoints, PPM images, run configs, and dataset directories."""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .data import DatasetRecord, to_bytes
from .model import ModelConfig, check_params

MAGIC = b"UPIX"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ImageFormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(config: ModelConfig, params: Mapping[str, np.ndarray]) -> bytes:
    check_params(config, params)
    cfg_json = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg_json)), cfg_json,
           struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float64)
        key = name.encode("utf-8")
        out.append(struct.pack("<I", len(key)) + key)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype("<f8").tobytes(order="C"))
    return b"".join(out)


def save_checkpoint(path, config: ModelConfig, params: Mapping[str, np.ndarray]) -> None:
    blob = checkpoint_bytes(config, params)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.blob):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def parse_checkpoint(blob: bytes) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        config = ModelConfig.from_dict(json.loads(r.take(r.u32("config length"), "config").decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"bad embedded config: {exc}") from None
    params = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("name length"), "name").decode("utf-8", errors="strict")
        rank = r.u32(f"rank of {name}")
        if rank > 8:
            raise CheckpointError(f"implausible rank {rank} for {name}")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, f"shape of {name}"))
        count = int(np.prod(shape, dtype=np.int64))
        payload = r.take(8 * count, f"payload of {name}")
        params[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes after the last tensor")
    try:
        check_params(config, params)
    except ValueError as exc:
        raise CheckpointError(f"tensors inconsistent with embedded config: {exc}") from None
    return config, params


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    return parse_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# images


def image_bytes(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ImageFormatError(f"expected H x W x 3 image, got {image.shape}")
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + to_bytes(image).tobytes()


def write_image(path, image: np.ndarray) -> None:
    """Binary PPM; v in [-1, 1] maps to round((v + 1) * 127.5), clamped."""
    Path(path).write_bytes(image_bytes(image))


def parse_image(blob: bytes) -> np.ndarray:
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        fields.append(blob[start:pos])
    if fields[0] != b"P6":
        raise ImageFormatError(f"not a binary PPM (magic {fields[0]!r})")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ImageFormatError("non-numeric PPM header field") from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise ImageFormatError(f"unsupported PPM header {w}x{h} max {maxval}")
    pos += 1  # the single whitespace byte before the raster
    raster = blob[pos:]
    if len(raster) != w * h * 3:
        raise ImageFormatError(f"PPM raster has {len(raster)} bytes, expected {w * h * 3}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3) / 127.5 - 1.0


def read_image(path) -> np.ndarray:
    return parse_image(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# run config

# key -> (section, type); sections: model, train, loss, sampler, distill, run
SCHEMA: dict[str, tuple[str, type]] = {
    "layers": ("model", int),
    "dim": ("model", int),
    "heads": ("model", int),
    "mlp_ratio": ("model", int),
    "patch_size": ("model", int),
    "channels": ("model", int),
    "vocab_size": ("model", int),
    "cond_stride": ("model", int),
    "rope_split": ("model", list),
    "rope_base": ("model", float),
    "stage_resolutions": ("train", list),
    "stage_steps": ("train", list),
    "cond_prob": ("train", float),
    "lm_weight": ("train", float),
    "refine_steps": ("train", int),
    "batch_size": ("train", int),
    "lr": ("train", float),
    "dataset_size": ("train", int),
    "lambda_perceptual": ("loss", float),
    "lambda_lm": ("loss", float),
    "sampler_steps": ("sampler", int),
    "distill_steps": ("distill", int),
    "student_steps": ("distill", int),
    "lambda_diff": ("distill", float),
    "lambda_adv": ("distill", float),
    "fake_ratio": ("distill", int),
    "seed": ("run", int),
    "out": ("run", str),
    "checkpoint": ("run", str),
}


def _coerce(key: str, raw: str, kind) -> Any:
    try:
        if kind is list:
            return [int(v) for v in raw.replace(",", " ").split()]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_run_config(text: str) -> dict[str, Any]:
    """Flat ``key = value`` lines; ``#`` starts a comment.  Unknown keys are errors."""
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _coerce(key, raw, SCHEMA[key][1])
    return out


def load_run_config(path) -> dict[str, Any]:
    return parse_run_config(Path(path).read_text(encoding="utf-8"))


def model_config_from(run: Mapping[str, Any], base: ModelConfig | None = None) -> ModelConfig:
    fields = (base or ModelConfig()).to_dict()
    if ("dim" in run or "heads" in run) and "rope_split" not in run:
        fields["rope_split"] = None  # re-derive for the new head size
    for k, v in run.items():
        if SCHEMA.get(k, ("",))[0] == "model":
            fields[k] = tuple(v) if k == "rope_split" else v
    try:
        return ModelConfig.from_dict(fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model config: {exc}") from None


# ---------------------------------------------------------------------------
# datasets on disk


def write_dataset(directory, records: list[DatasetRecord]) -> Path:
    """index.jsonl plus one PPM per image; file names are stable per index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, rec in enumerate(records):
        entry = {"index": i, "task": rec.task, "caption": rec.caption.decode("utf-8"),
                 "background": rec.background, "target": f"{i:05d}_target.ppm"}
        write_image(directory / entry["target"], rec.target)
        if rec.condition is not None:
            entry["condition"] = f"{i:05d}_condition.ppm"
            write_image(directory / entry["condition"], rec.condition)
        lines.append(json.dumps(entry, sort_keys=True))
    index = directory / "index.jsonl"
    index.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return index
