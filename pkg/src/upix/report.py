"""PNG figures written next to the JSONL metrics: loss curves and sample grids."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import to_bytes  # noqa: E402

LOSS_KEYS = ("flow", "perceptual", "lm", "dmd", "diff", "adv", "disc")


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def loss_curves(records: Sequence[Mapping], path, title: str = "") -> Path:
    """One line per loss term present; stage boundaries drawn as dotted lines."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0), dpi=100)
    steps = np.arange(len(records))
    for key in LOSS_KEYS:
        vals = [r.get(key) for r in records]
        idx = [i for i, v in enumerate(vals) if v is not None]
        if idx:
            ax.plot(steps[idx], [vals[i] for i in idx], label=key, linewidth=1.0)
    stages = [r.get("stage") for r in records]
    for i in range(1, len(stages)):
        if stages[i] != stages[i - 1]:
            ax.axvline(i, color="gray", linestyle=":", linewidth=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def sample_grid(images: Iterable[np.ndarray], path, captions: Sequence[str] | None = None,
                cols: int = 4) -> Path:
    images = [to_bytes(im) for im in images]
    if not images:
        raise ValueError("no images to plot")
    rows = -(-len(images) // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.4 * rows), dpi=100, squeeze=False)
    for k, ax in enumerate(axes.flat):
        ax.axis("off")
        if k < len(images):
            ax.imshow(images[k], interpolation="nearest")
            if captions is not None:
                ax.set_title(captions[k], fontsize=6)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
