"""Decoder-only unified transformer over the shared token space."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .attention import RopeParams, apply_rope, attention_forward, rope_tables
from .autodiff import ShapeError, Tensor
from .tokens import (
    VOCAB_SIZE,
    PatchGrid,
    SegmentKind,
    TokenSequence,
    embed_timesteps,
    encode_condition_batch,
    grid_positions,
    patchify_tensor,
    text_to_ids,
    unpatchify,
    unpatchify_tensor,
)

RMS_EPS = 1e-6
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    patch_size: int = 2
    channels: int = 3
    vocab_size: int = VOCAB_SIZE
    cond_stride: int = 4
    rope_split: tuple[int, int, int] | None = None
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("dim", "heads", "mlp_ratio", "patch_size", "channels", "vocab_size", "cond_stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.vocab_size != VOCAB_SIZE:
            raise ValueError(f"vocab_size must be {VOCAB_SIZE} for the byte vocabulary")
        if self.cond_stride < 2 or self.cond_stride % 2:
            raise ValueError("cond_stride must be an even number >= 2")
        if self.dim < 4 or self.dim % 2:
            raise ValueError("dim must be even and >= 4")
        if self.rope_split is None:
            object.__setattr__(self, "rope_split", RopeParams.default(self.head_dim, self.rope_base).split)
        object.__setattr__(self, "rope_split", tuple(int(s) for s in self.rope_split))
        rope = self.rope
        if rope.head_dim != self.head_dim:
            raise ValueError(f"rope split {rope.split} does not sum to head dim {self.head_dim}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def hidden(self) -> int:
        return self.mlp_ratio * self.dim

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels

    @property
    def cond_width(self) -> int:
        return max(self.dim // 2, 1)

    @property
    def rope(self) -> RopeParams:
        return RopeParams(self.rope_base, self.rope_split)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rope_split"] = list(self.rope.split)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        if d.get("rope_split") is not None:
            d["rope_split"] = tuple(d["rope_split"])
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, c = cfg.dim, cfg.channels
    half = cfg.cond_stride // 2
    shapes = {
        "text_embed": (cfg.vocab_size, d),
        "cond.conv1": (4 * c, cfg.cond_width),
        "cond.conv2": (half * half * cfg.cond_width, d),
        "cond.proj": (d, d),
        "time.fc1": (d, d),
        "time.fc2": (d, d),
        "patch_embed": (cfg.patch_dim, d),
    }
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "attn_norm": (d,),
            p + "wq": (d, d),
            p + "wk": (d, d),
            p + "wv": (d, d),
            p + "wo": (d, d),
            p + "mlp_norm": (d,),
            p + "w_gate": (d, cfg.hidden),
            p + "w_up": (d, cfg.hidden),
            p + "w_down": (cfg.hidden, d),
        })
    shapes.update({
        "final_norm": (d,),
        "patch_head": (d, cfg.patch_dim),
        "text_head": (d, cfg.vocab_size),
    })
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Normal(0, 0.02) weights, unit norm gains, zero output projections."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("norm"):
            params[name] = np.ones(shape)
        elif name.endswith(".wo") or name.endswith(".w_down"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, INIT_STD, size=shape)
    return params


def check_params(cfg: ModelConfig, params: Mapping[str, np.ndarray]) -> None:
    expected = param_shapes(cfg)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ShapeError(f"parameter names differ from config: missing={missing} extra={extra}")
    for name, shape in expected.items():
        if tuple(np.shape(params[name])) != shape:
            raise ShapeError(f"{name}: shape {np.shape(params[name])}, config expects {shape}")


# ---------------------------------------------------------------------------
# building blocks


def rmsnorm(x, gain) -> Tensor:
    x = ad.as_tensor(x)
    ms = ad.mean(x * x, axis=-1, keepdims=True)
    return x * ad.power(ms + RMS_EPS, -0.5) * gain


def swiglu_mlp(x, w_gate, w_up, w_down) -> Tensor:
    return (ad.silu(x @ w_gate) * (x @ w_up)) @ w_down


def transformer_block(x, mask, positions, params: Mapping[str, Tensor], cfg: ModelConfig,
                      prefix: str = "blocks.0.", tables=None) -> Tensor:
    """Pre-norm block: x + Attn(RMSNorm(x)), then + SwiGLU(RMSNorm(.)).

    ``x`` is (L, D) or (B, L, D); ``mask`` (L, L) or (B, L, L) bool.
    """
    x = ad.as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
        mask = np.asarray(getattr(mask, "allowed", mask))[None]
        positions = np.asarray(positions)[None]
    b, n, d = x.shape
    mask = np.asarray(getattr(mask, "allowed", mask), dtype=bool)
    if mask.shape != (b, n, n):
        raise ShapeError(f"mask {mask.shape} does not match tokens {(b, n)}")
    h, hd = cfg.heads, cfg.head_dim
    if tables is None:
        tables = rope_tables(positions, cfg.rope)

    def heads(t):
        return ad.transpose(t.reshape(b, n, h, hd), (0, 2, 1, 3))

    y = rmsnorm(x, params[prefix + "attn_norm"])
    q = apply_rope(heads(y @ params[prefix + "wq"]), positions, cfg.rope, tables)
    k = apply_rope(heads(y @ params[prefix + "wk"]), positions, cfg.rope, tables)
    v = heads(y @ params[prefix + "wv"])
    a = attention_forward(q, k, v, mask[:, None])
    a = ad.transpose(a, (0, 2, 1, 3)).reshape(b, n, d)
    x = x + a @ params[prefix + "wo"]
    y = rmsnorm(x, params[prefix + "mlp_norm"])
    x = x + swiglu_mlp(y, params[prefix + "w_gate"], params[prefix + "w_up"], params[prefix + "w_down"])
    return x.reshape(n, d) if squeeze else x


# ---------------------------------------------------------------------------
# packed batches


@dataclass
class PackedBatch:
    """Several token sequences padded block-by-block into one (B, L, D) tensor.

    Each kind occupies a fixed column range sized to the longest block in
    the batch; unused columns are padding (kind -1).  Padding keys are never
    attended and padding rows attend only to themselves, so every real
    token sees exactly what it would see unpadded.
    """

    embeddings: Tensor
    kinds: np.ndarray  # (B, L) int, -1 for padding
    positions: np.ndarray  # (B, L, 3)
    mask: np.ndarray  # (B, L, L) bool
    text_ids: list[list[int]]
    text_cols: list[np.ndarray]
    gen_count: int
    grid: tuple[int, int] | None = None

    @property
    def valid(self) -> np.ndarray:
        return self.kinds >= 0

    @property
    def batch_size(self) -> int:
        return self.kinds.shape[0]


def _padded_mask(kinds: np.ndarray) -> np.ndarray:
    valid = kinds >= 0
    n = kinds.shape[1]
    causal = np.tril(np.ones((n, n), dtype=bool))[None]
    gen = (kinds == SegmentKind.GENERATION)[:, :, None]
    allowed = (causal | gen) & valid[:, :, None] & valid[:, None, :]
    allowed |= np.eye(n, dtype=bool)[None] & ~valid[:, :, None]
    return allowed


def _pack(source: Tensor, tokens: list[list[tuple[int, int, tuple[int, int, int]]]],
          text_ids: list[list[int]], grid=None) -> PackedBatch:
    """Lay out per-sample ``(source_row, kind, position)`` lists block by block.

    ``source`` must end with an all-zero row used for padding.
    """
    pad_row = source.shape[0] - 1
    b = len(tokens)
    widths = [max(sum(1 for _, k, _ in toks if k == kind) for toks in tokens) for kind in SegmentKind]
    offsets = np.concatenate([[0], np.cumsum(widths)])
    n = int(offsets[-1])
    index = np.full((b, n), pad_row, dtype=np.int64)
    kinds = np.full((b, n), -1, dtype=np.int64)
    positions = np.zeros((b, n, 3), dtype=np.int64)
    text_cols = []
    for i, toks in enumerate(tokens):
        fill = offsets[:-1].copy()
        for row, kind, pos in toks:
            col = fill[kind]
            fill[kind] += 1
            index[i, col] = row
            kinds[i, col] = kind
            positions[i, col] = pos
        text_cols.append(np.flatnonzero(kinds[i] == SegmentKind.TEXT))
    gen_counts = {sum(1 for _, k, _ in toks if k == SegmentKind.GENERATION) for toks in tokens}
    if len(gen_counts) > 1:
        raise ShapeError(f"samples in one batch carry different generation counts {sorted(gen_counts)}")
    embeddings = source[index]
    return PackedBatch(embeddings, kinds, positions, _padded_mask(kinds), text_ids, text_cols,
                       gen_counts.pop(), grid)


def pack_sequences(seqs: Sequence[TokenSequence]) -> PackedBatch:
    """Pack assembled :class:`TokenSequence` objects into one batch."""
    if not seqs:
        raise ValueError("empty batch")
    dim = seqs[0].embeddings.shape[1]
    source = ad.concat([s.embeddings for s in seqs] + [Tensor(np.zeros((1, dim)))], axis=0)
    tokens, start, ids = [], 0, []
    grid = None
    for s in seqs:
        s.validate()
        tokens.append([(start + j, int(k), tuple(int(v) for v in s.positions[j]))
                       for j, k in enumerate(s.kinds)])
        start += len(s)
        ids.append(list(s.text_ids) if s.text_ids is not None else [])
        gen = s.positions[np.array([k == SegmentKind.GENERATION for k in s.kinds], dtype=bool)]
        if len(gen):
            grid = (int(gen[:, 1].max()) + 1, int(gen[:, 2].max()) + 1)
    return _pack(source, tokens, ids, grid)


def embed_batch(params: Mapping[str, Tensor], cfg: ModelConfig, *, captions: Sequence[bytes],
                noisy=None, t=None, conditions: Sequence[Sequence[np.ndarray]] | None = None) -> PackedBatch:
    """Embed a batch directly into packed form.

    ``noisy`` is (B, H, W, C) (array or tensor) with per-sample ``t``; pass
    ``noisy=None`` for text-only batches.  ``conditions[i]`` lists sample i's
    reference images in order.
    """
    b = len(captions)
    d = cfg.dim
    conditions = conditions if conditions is not None else [[] for _ in range(b)]
    if len(conditions) != b:
        raise ValueError("conditions must align with captions")
    pieces: list[Tensor] = []
    start = 0
    tokens: list[list] = [[] for _ in range(b)]
    stream = [0] * b

    cond_images = [img for conds in conditions for img in conds]
    if cond_images:
        stack = np.stack([np.asarray(img, dtype=np.float64) for img in cond_images])
        enc = encode_condition_batch(stack, params, cfg.cond_stride)
        m, per, _ = enc.shape
        pieces.append(enc.reshape(m * per, d))
        hc, wc = stack.shape[1] // cfg.cond_stride, stack.shape[2] // cfg.cond_stride
        scale = cfg.cond_stride // cfg.patch_size if cfg.cond_stride % cfg.patch_size == 0 else 1
        cpos = grid_positions(hc, wc, scale)
        k = 0
        for i, conds in enumerate(conditions):
            for _ in conds:
                for j in range(per):
                    tokens[i].append((start + k * per + j, SegmentKind.CONDITION,
                                      (stream[i], int(cpos[j, 1]), int(cpos[j, 2]))))
                    stream[i] += 1
                k += 1
        start += m * per

    ids = [text_to_ids(c) for c in captions]
    flat_ids = np.concatenate([np.asarray(x) for x in ids])
    pieces.append(params["text_embed"][flat_ids])
    for i, x in enumerate(ids):
        for _ in x:
            tokens[i].append((start, SegmentKind.TEXT, (stream[i], -1, -1)))
            start += 1
            stream[i] += 1

    grid = None
    if noisy is not None:
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        pieces.append(embed_timesteps(t, params))
        for i in range(b):
            tokens[i].append((start + i, SegmentKind.TIMESTEP, (stream[i], -1, -1)))
            stream[i] += 1
        start += b
        noisy = ad.as_tensor(noisy)
        _, h, w, _ = noisy.shape
        p = cfg.patch_size
        rows, cols = h // p, w // p
        gen = patchify_tensor(noisy, p) @ params["patch_embed"]
        pieces.append(gen.reshape(b * rows * cols, d))
        gpos = grid_positions(rows, cols)
        for i in range(b):
            base = start + i * rows * cols
            for j in range(rows * cols):
                tokens[i].append((base + j, SegmentKind.GENERATION,
                                  (stream[i] + j, int(gpos[j, 1]), int(gpos[j, 2]))))
        start += b * rows * cols
        grid = (rows, cols)

    pieces.append(Tensor(np.zeros((1, d))))
    return _pack(ad.concat(pieces, axis=0), tokens, ids, grid)


# ---------------------------------------------------------------------------
# forward


@dataclass
class ModelOutput:
    patches: Tensor | None  # (B, N, p*p*C)
    text_logits: Tensor | None  # (sum of text lengths, V), samples concatenated
    text_ids: list[list[int]]
    hidden: Tensor
    features: dict[int, Tensor] = field(default_factory=dict)  # block index -> (B, N, D) generation rows
    grid: tuple[int, int] | None = None


def forward_packed(params: Mapping[str, Tensor], cfg: ModelConfig, batch: PackedBatch, *,
                   want_patches: bool = True, want_text: bool = True,
                   capture: Sequence[int] = ()) -> ModelOutput:
    x = batch.embeddings
    tables = rope_tables(batch.positions, cfg.rope)
    n_gen = batch.gen_count
    features = {}
    for i in range(cfg.layers):
        x = transformer_block(x, batch.mask, batch.positions, params, cfg, f"blocks.{i}.", tables)
        if i + 1 in capture:
            features[i + 1] = x[:, x.shape[1] - n_gen:]
    h = rmsnorm(x, params["final_norm"])

    patches = None
    if want_patches:
        if n_gen == 0:
            raise ValueError("sequence has no Generation tokens to predict patches from")
        patches = h[:, h.shape[1] - n_gen:] @ params["patch_head"]

    logits = None
    if want_text and any(len(c) for c in batch.text_cols):
        rows = np.concatenate([np.full(len(c), i) for i, c in enumerate(batch.text_cols)])
        cols = np.concatenate(batch.text_cols)
        logits = h[rows, cols] @ params["text_head"]
    return ModelOutput(patches, logits, batch.text_ids, x, features, batch.grid)


def forward_model(seq: TokenSequence | Sequence[TokenSequence] | PackedBatch,
                  params: Mapping[str, Tensor], cfg: ModelConfig, **kw) -> ModelOutput:
    """Predict clean patches for Generation tokens and next-byte logits for Text tokens."""
    if isinstance(seq, PackedBatch):
        batch = seq
    elif isinstance(seq, TokenSequence):
        batch = pack_sequences([seq])
    else:
        batch = pack_sequences(list(seq))
    if kw.get("want_patches", True) and batch.gen_count == 0:
        raise ValueError("sequence has no Generation tokens to predict patches from")
    return forward_packed(params, cfg, batch, **kw)


def reassemble(predictions: PatchGrid) -> np.ndarray:
    """Inverse of :func:`patchify` for predicted patch grids."""
    return unpatchify(predictions)


def patches_to_images(patches, grid: tuple[int, int], cfg: ModelConfig) -> Tensor:
    rows, cols = grid
    return unpatchify_tensor(patches, rows, cols, cfg.patch_size, cfg.channels)


def predict_clean(params: Mapping[str, Tensor], cfg: ModelConfig, noisy, t, captions,
                  conditions=None, capture: Sequence[int] = ()) -> tuple[Tensor, ModelOutput]:
    """x-prediction for a batch of noisy images; returns ((B, H, W, C) images, raw output)."""
    batch = embed_batch(params, cfg, captions=captions, noisy=noisy, t=t, conditions=conditions)
    out = forward_packed(params, cfg, batch, want_text=False, capture=capture)
    return patches_to_images(out.patches, batch.grid, cfg), out


def count_params(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(np.size(v) for v in params.values()))

