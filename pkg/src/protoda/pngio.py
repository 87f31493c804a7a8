"""PNG helpers for images and paletted label maps."""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np
from PIL import Image


def label_palette(max_classes: int = 256) -> list[int]:
    """Deterministic distinct-ish colors; index 0 is black (unused by labels)."""
    flat = [0, 0, 0]
    for k in range(1, max_classes):
        hue = (0.1 + k * 0.618033988749895) % 1.0
        r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 0.95)
        flat += [int(255 * r), int(255 * g), int(255 * b)]
    return flat


def save_label_png(labels: np.ndarray, path) -> None:
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("label values must fit in a byte")
    img = Image.fromarray(arr.astype(np.uint8), mode="P")
    img.putpalette(label_palette())
    img.save(Path(path))


def load_label_png(path) -> np.ndarray:
    img = Image.open(Path(path))
    return np.asarray(img, dtype=np.int64)


def save_rgb_png(image01: np.ndarray, path) -> None:
    arr = np.asarray(image01, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    byte = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(byte, mode="RGB").save(Path(path))


def load_rgb_png(path) -> np.ndarray:
    img = Image.open(Path(path)).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0
