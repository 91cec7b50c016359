"""Hybrid causal/full attention masks and axial rotary attention."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .tokens import SegmentKind


@dataclass(frozen=True)
class AttentionMask:
    allowed: np.ndarray  # (L, L) bool; allowed[i, j]: query i may read key j

    def __post_init__(self):
        a = self.allowed
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"mask must be square, got {a.shape}")
        if not a.any(axis=1).all():
            raise ValueError("every mask row needs at least one allowed key")


def build_hybrid_mask(kinds: Sequence[SegmentKind]) -> AttentionMask:
    """Generation rows see every token; all other rows are causal."""
    if len(kinds) == 0:
        raise ValueError("cannot build a mask for an empty sequence")
    kinds = np.asarray([int(k) for k in kinds])
    if np.any(np.diff(kinds) < 0):
        raise ValueError("kinds are not in Condition, Text, Timestep, Generation block order")
    n = len(kinds)
    causal = np.tril(np.ones((n, n), dtype=bool))
    full = (kinds == SegmentKind.GENERATION)[:, None]
    return AttentionMask(causal | full)


@dataclass(frozen=True)
class RopeParams:
    base: float
    split: tuple[int, int, int]  # (stream, row, column) sub-dimensions

    def __post_init__(self):
        if len(self.split) != 3 or any(d < 2 or d % 2 for d in self.split):
            raise ValueError(f"rope split {self.split} needs three even sizes >= 2")

    @property
    def head_dim(self) -> int:
        return sum(self.split)

    @classmethod
    def default(cls, head_dim: int, base: float = 10000.0) -> "RopeParams":
        quarter = head_dim // 8 * 2  # each axis block must hold whole rotation pairs
        return cls(base, (head_dim - 2 * quarter, quarter, quarter))


def rope_tables(positions: np.ndarray, params: RopeParams) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (..., L, d) for axial rotations.

    Coordinates (2i, 2i+1) inside each axis block rotate together; -1 (no
    spatial location) counts as position 0.
    """
    positions = np.maximum(np.asarray(positions, dtype=np.float64), 0.0)
    angles = []
    for axis, dim in enumerate(params.split):
        inv = params.base ** (-np.arange(0, dim, 2) / dim)
        ang = positions[..., axis, None] * inv
        angles.append(np.repeat(ang, 2, axis=-1))
    angles = np.concatenate(angles, axis=-1)
    return np.cos(angles), np.sin(angles)


def _pair_rotation(d: int) -> np.ndarray:
    # x @ R maps each pair (a, b) to (-b, a)
    r = np.zeros((d, d))
    idx = np.arange(0, d, 2)
    r[idx + 1, idx] = -1.0
    r[idx, idx + 1] = 1.0
    return r


def apply_rope(vectors, positions: np.ndarray, params: RopeParams, tables=None) -> Tensor:
    """Rotate (..., heads, L, d) vectors by per-token (stream, row, column) angles.

    ``positions`` is (L, 3) or (B, L, 3) for a leading batch axis.
    """
    vectors = ad.as_tensor(vectors)
    d = vectors.shape[-1]
    if d != params.head_dim:
        raise ShapeError(f"head dim {d} does not match rope split {params.split}")
    cos, sin = tables if tables is not None else rope_tables(positions, params)
    if cos.ndim == 3:  # batched positions: insert the heads axis
        cos, sin = cos[:, None], sin[:, None]
    rotated = vectors @ _pair_rotation(d)
    return vectors * cos + rotated * sin


def attention_forward(q, k, v, mask) -> Tensor:
    """Scaled dot-product attention over (..., L, d); masked keys get zero weight.

    ``mask`` is an :class:`AttentionMask`, an (L, L) array, or a batched
    array broadcastable against the (..., L, L) score tensor.
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    allowed = mask.allowed if isinstance(mask, AttentionMask) else np.asarray(mask, dtype=bool)
    n = q.shape[-2]
    if allowed.shape[-2:] != (n, n):
        raise ShapeError(f"mask {allowed.shape} does not match sequence length {n}")
    scores = (q @ ad.swap_last(k)) * (1.0 / np.sqrt(q.shape[-1]))
    weights = ad.softmax(scores, where=allowed)
    return weights @ v
