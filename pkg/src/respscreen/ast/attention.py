"""Class-token attention maps over the patch grid."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import InvalidParameter
from .model import AstConfig


@dataclass(frozen=True)
class AttentionMap:
    grid: np.ndarray  # [gh, gw], sums to 1
    source_layer: int


def class_attention_map(attentions: list[np.ndarray], layer: int, cfg: AstConfig) -> AttentionMap:
    """Head-averaged attention from the class token to each patch, renormalized.

    ``attentions`` holds one ``[n_heads, T, T]`` array per layer (single image).
    Negative ``layer`` counts from the last block.
    """
    n = len(attentions)
    if not -n <= layer < n:
        raise InvalidParameter(f"layer {layer} out of range for {n} layer(s)")
    layer = layer % n
    att = np.asarray(attentions[layer], dtype=np.float64)
    if att.ndim != 3 or att.shape[1] != cfg.n_patches + 1:
        raise InvalidParameter(f"attention shape {att.shape} does not match {cfg.n_patches} patches")
    row = att[:, 0, 1:].mean(axis=0)
    total = row.sum()
    row = row / total if total > 0 else np.full_like(row, 1.0 / row.size)
    return AttentionMap(row.reshape(cfg.grid), layer)


def write_attention_csv(amap: AttentionMap, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for r in amap.grid:
            writer.writerow([repr(float(v)) for v in r])


def read_attention_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh) if row])


def write_attention_png(amap: AttentionMap, path: str | Path, cell: int = 8) -> None:
    """Heatmap with the patch grid upscaled by ``cell`` pixels per patch."""
    from matplotlib import colormaps

    g = amap.grid
    span = g.max() - g.min()
    norm = (g - g.min()) / span if span > 0 else np.zeros_like(g)
    rgb = (colormaps["viridis"](norm)[..., :3] * 255).round().astype(np.uint8)
    rgb = np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)
    Image.fromarray(rgb).save(path, format="PNG")
