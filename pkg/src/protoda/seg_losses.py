"""Supervised source loss and weighted target pseudo-label loss.

Both losses are plain per-pixel cross-entropy, summed (not averaged) over the
image; any normalization is the trainer's concern. Gradients are reported in
logit space, where summed softmax cross-entropy has the closed form
(probs - onehot) per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pseudo import PseudoLabelMap

CLAMP = 1e-12  # probability floor before the log


@dataclass(frozen=True)
class LossBreakdown:
    source_seg: float
    target_seg: float
    proto: float
    total: float

    @classmethod
    def of(cls, source_seg: float, target_seg: float, proto: float) -> "LossBreakdown":
        return cls(source_seg, target_seg, proto, source_seg + target_seg + proto)


def one_hot(classes: np.ndarray, num_channels: int) -> np.ndarray:
    """(H, W) class grid with values 1..num_channels -> (H, W, num_channels)."""
    cls = np.asarray(classes)
    if cls.min() < 1 or cls.max() > num_channels:
        raise ValueError(f"class values must lie in 1..{num_channels}")
    return np.eye(num_channels)[cls - 1]


def source_seg_loss(
    probs: np.ndarray, onehot_labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Summed cross-entropy of softmax outputs against one-hot labels.

    Returns the loss and its gradient with respect to the pre-softmax logits.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(onehot_labels, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 3:
        raise ValueError(f"probs {p.shape} and labels {y.shape} must both be (H, W, C+1)")
    _check_one_hot(y)

    loss = -np.sum(y * np.log(np.maximum(p, CLAMP)))
    return float(loss), p - y


def target_seg_loss(
    probs: np.ndarray, pseudo: PseudoLabelMap
) -> tuple[float, np.ndarray]:
    """Pseudo-label cross-entropy scaled per pixel by w and globally by q_t.

    Unknown-labeled pixels are not dropped; they contribute cross-entropy
    against the unknown head C+1.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 3:
        raise ValueError(f"probs must be (H, W, C+1), got shape {p.shape}")
    if pseudo.classes.shape != p.shape[:2]:
        raise ValueError(
            f"pseudo map {pseudo.classes.shape} does not match probs {p.shape[:2]}"
        )
    y = one_hot(pseudo.classes, p.shape[-1])
    scale = pseudo.reliability * pseudo.weights

    ce = -np.sum(y * np.log(np.maximum(p, CLAMP)), axis=-1)
    loss = float(np.sum(scale * ce))
    return loss, scale[..., None] * (p - y)


def _check_one_hot(y: np.ndarray) -> None:
    if not np.all((y == 0.0) | (y == 1.0)) or not np.all(y.sum(axis=-1) == 1.0):
        raise ValueError("labels must be one-hot per pixel")
