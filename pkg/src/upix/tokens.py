"""Mapping text, condition images, the timestep, and noisy patches into one token space."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

BOS, EOS, PAD = 256, 257, 258
VOCAB_SIZE = 259

# geometric frequency range for the timestep features
_MIN_FREQ, _MAX_FREQ = 1.0, 1000.0


class SegmentKind(enum.IntEnum):
    CONDITION = 0
    TEXT = 1
    TIMESTEP = 2
    GENERATION = 3


@dataclass
class TokenSequence:
    """Tokens in the shared space.

    ``positions`` holds one ``(stream, row, column)`` triple per token; row and
    column are -1 for tokens without a spatial location.
    """

    embeddings: Tensor
    kinds: list[SegmentKind]
    positions: np.ndarray
    text_ids: list[int] | None = None

    def __len__(self) -> int:
        return len(self.kinds)

    def validate(self) -> None:
        n = len(self.kinds)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != n:
            raise ShapeError(f"embeddings {self.embeddings.shape} vs {n} kinds")
        if self.positions.shape != (n, 3):
            raise ShapeError(f"positions {self.positions.shape} vs {n} tokens")
        if list(self.positions[:, 0]) != list(range(n)):
            raise ValueError("stream indices must run 0..L-1")
        order = [int(k) for k in self.kinds]
        if order != sorted(order):
            raise ValueError("kinds must appear in Condition, Text, Timestep, Generation blocks")
        gen = np.array([k == SegmentKind.GENERATION for k in self.kinds], dtype=bool)
        if gen.any() and (self.positions[gen, 1:] < 0).any():
            raise ValueError("generation tokens need row/column >= 0")
        if self.text_ids is not None and len(self.text_ids) != self.kinds.count(SegmentKind.TEXT):
            raise ValueError("text_ids must align with the Text tokens")

    def count(self, kind: SegmentKind) -> int:
        return sum(1 for k in self.kinds if k == kind)


@dataclass
class DiffusionState:
    clean: np.ndarray | Tensor
    noise: np.ndarray | Tensor
    t: float
    noisy: Tensor = field(repr=False)


@dataclass
class PatchGrid:
    patches: np.ndarray
    rows: int
    cols: int
    patch_size: int
    channels: int

    def __post_init__(self):
        expected = (self.rows * self.cols, self.patch_size**2 * self.channels)
        if tuple(np.shape(self.patches)) != expected:
            raise ShapeError(f"patches {np.shape(self.patches)} do not match grid {expected}")


# ---------------------------------------------------------------------------
# text


def text_to_ids(text: bytes | str) -> list[int]:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return [BOS, *text, EOS]


def decode_text(ids: Sequence[int]) -> bytes:
    return bytes(int(i) for i in ids if int(i) < 256)


def encode_text(text: bytes | str, table: Tensor) -> TokenSequence:
    """Byte-level tokens: ``[BOS] + bytes + [EOS]`` looked up in ``table``."""
    if table.shape[0] != VOCAB_SIZE:
        raise ShapeError(f"embedding table has {table.shape[0]} rows, expected {VOCAB_SIZE}")
    ids = text_to_ids(text)
    n = len(ids)
    positions = np.stack([np.arange(n), -np.ones(n, int), -np.ones(n, int)], axis=1)
    return TokenSequence(table[np.asarray(ids)], [SegmentKind.TEXT] * n, positions, ids)


# ---------------------------------------------------------------------------
# patches


def patchify_tensor(images, p: int) -> Tensor:
    """(..., H, W, C) -> (..., H/p * W/p, p*p*C), raster order, channel-last inside a patch."""
    images = ad.as_tensor(images)
    *lead, h, w, c = images.shape
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    k = len(lead)
    x = images.reshape(*lead, h // p, p, w // p, p, c)
    axes = list(range(k)) + [k, k + 2, k + 1, k + 3, k + 4]
    x = ad.transpose(x, axes)
    return x.reshape(*lead, (h // p) * (w // p), p * p * c)


def unpatchify_tensor(patches, rows: int, cols: int, p: int, c: int) -> Tensor:
    patches = ad.as_tensor(patches)
    *lead, n, dim = patches.shape
    if n != rows * cols or dim != p * p * c:
        raise ShapeError(f"patches {patches.shape} inconsistent with {rows}x{cols} grid, p={p}, C={c}")
    k = len(lead)
    x = patches.reshape(*lead, rows, cols, p, p, c)
    axes = list(range(k)) + [k, k + 2, k + 1, k + 3, k + 4]
    x = ad.transpose(x, axes)
    return x.reshape(*lead, rows * p, cols * p, c)


def patchify(image: np.ndarray, p: int) -> PatchGrid:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"expected H x W x C image, got {image.shape}")
    h, w, c = image.shape
    patches = patchify_tensor(image, p).data
    return PatchGrid(patches, h // p, w // p, p, c)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    return unpatchify_tensor(grid.patches, grid.rows, grid.cols, grid.patch_size, grid.channels).data


def grid_positions(rows: int, cols: int, scale: int = 1) -> np.ndarray:
    r, c = np.divmod(np.arange(rows * cols), cols)
    return np.stack([np.arange(rows * cols), r * scale, c * scale], axis=1)


# ---------------------------------------------------------------------------
# condition images


def encode_condition_batch(images, params: Mapping[str, Tensor], stride: int = 4) -> Tensor:
    """Two strided convolutions (stride 2, then stride/2) and a projection.

    (M, H, W, C) -> (M, H/s * W/s, D).  Kernel size equals stride, so each
    layer is a patchify followed by a matmul.
    """
    images = ad.as_tensor(images)
    m, h, w, _ = images.shape
    if stride < 2 or stride % 2 or h % stride or w % stride:
        raise ShapeError(f"image {h}x{w} not divisible by encoder stride {stride}")
    first, second = 2, stride // 2
    x = ad.silu(patchify_tensor(images, first) @ params["cond.conv1"])
    x = x.reshape(m, h // first, w // first, x.shape[-1])
    x = ad.silu(patchify_tensor(x, second) @ params["cond.conv2"])
    return x @ params["cond.proj"]


def encode_condition(image, params: Mapping[str, Tensor], stride: int = 4, patch_size: int = 2) -> TokenSequence:
    image = ad.as_tensor(image)
    if image.ndim != 3:
        raise ShapeError(f"expected H x W x C image, got {image.shape}")
    h, w, _ = image.shape
    tokens = encode_condition_batch(image.reshape(1, *image.shape), params, stride)
    rows, cols = h // stride, w // stride
    n = rows * cols
    scale = stride // patch_size if stride % patch_size == 0 else 1
    return TokenSequence(
        tokens.reshape(n, tokens.shape[-1]),
        [SegmentKind.CONDITION] * n,
        grid_positions(rows, cols, scale),
    )


# ---------------------------------------------------------------------------
# generation tokens and timestep


def interpolate(clean, noise, t):
    """x_t = t * clean + (1 - t) * noise.  ``t`` may be per-sample (leading axis)."""
    if np.shape(clean) != np.shape(noise):
        raise ShapeError(f"clean {np.shape(clean)} and noise {np.shape(noise)} differ")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim:
        t = t.reshape(t.shape + (1,) * (len(np.shape(clean)) - t.ndim))
    if isinstance(clean, Tensor) or isinstance(noise, Tensor):
        return ad.add(ad.mul(clean, t), ad.mul(noise, 1.0 - t))
    return t * np.asarray(clean, dtype=np.float64) + (1.0 - t) * np.asarray(noise, dtype=np.float64)


def make_generation_tokens(clean, noise, t: float, params: Mapping[str, Tensor], patch_size: int):
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"timestep {t} outside [0, 1]")
    noisy = ad.as_tensor(interpolate(clean, noise, t))
    h, w, _ = noisy.shape
    emb = patchify_tensor(noisy, patch_size) @ params["patch_embed"]
    rows, cols = h // patch_size, w // patch_size
    state = DiffusionState(clean, noise, t, noisy)
    seq = TokenSequence(emb, [SegmentKind.GENERATION] * (rows * cols), grid_positions(rows, cols))
    return state, seq


def timestep_frequencies(dim: int) -> np.ndarray:
    half = dim // 2
    if half < 2:
        raise ValueError("timestep features need dim >= 4")
    return _MIN_FREQ * (_MAX_FREQ / _MIN_FREQ) ** (np.arange(half) / (half - 1))


def timestep_features(t, dim: int) -> np.ndarray:
    """[sin(w_k t)..., cos(w_k t)...] over geometric frequencies w_0=1 .. 1000."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"timestep outside [0, 1]: {t}")
    angles = t[..., None] * timestep_frequencies(dim)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def embed_timesteps(t, params: Mapping[str, Tensor]) -> Tensor:
    dim = params["time.fc1"].shape[0]
    feats = timestep_features(t, dim)
    return ad.silu(feats @ params["time.fc1"]) @ params["time.fc2"]


def timestep_token(t: float, params: Mapping[str, Tensor]) -> TokenSequence:
    emb = embed_timesteps(np.array([t]), params)
    return TokenSequence(emb, [SegmentKind.TIMESTEP], np.array([[0, -1, -1]]))


# ---------------------------------------------------------------------------
# assembly


def assemble_sequence(
    condition: TokenSequence | Sequence[TokenSequence] | None,
    text: TokenSequence | None,
    timestep: TokenSequence | None,
    generation: TokenSequence | None,
    *,
    require_generation: bool = True,
) -> TokenSequence:
    """Concatenate fragments as Condition, Text, Timestep, Generation.

    Multiple condition fragments keep their input order.  Stream indices are
    reassigned 0..L-1; spatial coordinates are kept.
    """
    if condition is None:
        cond = []
    elif isinstance(condition, TokenSequence):
        cond = [condition]
    else:
        cond = list(condition)
    slots = [(f, SegmentKind.CONDITION) for f in cond] + [
        (text, SegmentKind.TEXT),
        (timestep, SegmentKind.TIMESTEP),
        (generation, SegmentKind.GENERATION),
    ]
    if require_generation and (generation is None or len(generation) == 0):
        raise ValueError("generation fragment must be non-empty during training")
    parts = [(f, k) for f, k in slots if f is not None and len(f)]
    for frag, kind in parts:
        if any(k != kind for k in frag.kinds):
            raise ValueError(f"fragment in the {kind.name} slot carries other kinds")
    if not parts:
        raise ValueError("nothing to assemble")
    emb = ad.concat([f.embeddings for f, _ in parts], axis=0)
    kinds = [k for f, _ in parts for k in f.kinds]
    positions = np.concatenate([f.positions for f, _ in parts], axis=0).copy()
    positions[:, 0] = np.arange(len(kinds))
    seq = TokenSequence(emb, kinds, positions, text.text_ids if text is not None else None)
    seq.validate()
    return seq
