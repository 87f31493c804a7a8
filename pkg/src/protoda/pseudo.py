"""Teacher-side machinery: pseudo-label assignment, reliability, EMA update.

A pixel keeps its best known-class prediction when the teacher's confidence,
scaled by the pixel weight, clears tau_p; otherwise it is labeled unknown
(C+1). With weights identically 1 this reduces to plain confidence
thresholding. Image-level reliability q_t is the fraction of pixels whose
raw confidence clears tau_t and later scales the whole target loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pngio


@dataclass(frozen=True)
class PseudoLabelMap:
    """Per-pixel pseudo classes with their confidences and weights.

    ``classes`` holds values in 1..C+1 (C+1 = unknown), ``confidence`` the
    unscaled known-class max per pixel, ``weights`` the loss weight actually
    applied per pixel (1 for pixels that fell back to unknown), and
    ``reliability`` the image-level q_t computed with ``tau_t``.
    """

    classes: np.ndarray
    confidence: np.ndarray
    weights: np.ndarray
    reliability: float
    tau_p: float
    tau_t: float


def assign_pseudo_labels(
    teacher_probs: np.ndarray,
    weights: np.ndarray,
    tau_p: float,
    tau_t: float = 0.968,
    reliability_known_only: bool = True,
) -> PseudoLabelMap:
    """Threshold teacher probabilities into a pseudo-label map.

    Pixel j is assigned argmax over the known classes 1..C when
    max_c probs[j, c] * weights[j] >= tau_p, else unknown (C+1). The unknown
    head's own probability never competes in the max. Ties go to the lowest
    class index. ``confidence`` stores the unscaled max.
    """
    probs = _check_probs(teacher_probs)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != probs.shape[:2]:
        raise ValueError(f"weights shape {w.shape} != image shape {probs.shape[:2]}")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    if not 0.0 < tau_p <= 1.0:
        raise ValueError(f"tau_p must lie in (0, 1], got {tau_p}")

    num_classes = probs.shape[-1] - 1
    known = probs[..., :num_classes]
    confidence = known.max(axis=-1)
    best = known.argmax(axis=-1) + 1
    keep = confidence * w >= tau_p

    classes = np.where(keep, best, num_classes + 1)
    out_weights = np.where(keep, w, 1.0)
    q_t = image_reliability(probs, tau_t, known_only=reliability_known_only)
    return PseudoLabelMap(
        classes=classes.astype(np.int64),
        confidence=confidence,
        weights=out_weights,
        reliability=q_t,
        tau_p=float(tau_p),
        tau_t=float(tau_t),
    )


def image_reliability(
    teacher_probs: np.ndarray, tau_t: float, known_only: bool = True
) -> float:
    """Fraction of pixels whose class confidence reaches tau_t.

    By default the max runs over the known classes only; ``known_only=False``
    lets the unknown head compete as well.
    """
    probs = _check_probs(teacher_probs)
    if not 0.0 < tau_t <= 1.0:
        raise ValueError(f"tau_t must lie in (0, 1], got {tau_t}")
    scores = probs[..., :-1] if known_only else probs
    return float(np.mean(scores.max(axis=-1) >= tau_t))


def ema_update(
    teacher_params: np.ndarray, student_params: np.ndarray, alpha: float
) -> np.ndarray:
    """Exponential moving average: alpha * teacher + (1 - alpha) * student."""
    t = np.asarray(teacher_params, dtype=np.float64)
    s = np.asarray(student_params, dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError(f"parameter shapes differ: {t.shape} vs {s.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * t + (1.0 - alpha) * s


def _check_probs(teacher_probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(teacher_probs, dtype=np.float64)
    if probs.ndim != 3 or probs.shape[-1] < 2:
        raise ValueError(
            f"expected an (H, W, C+1) probability grid, got shape {probs.shape}"
        )
    if probs.size == 0:
        raise ValueError("empty probability grid")
    if np.any(probs < 0):
        raise ValueError("probabilities must be nonnegative")
    return probs


def save_pseudo_label_map(plm: PseudoLabelMap, png_path) -> None:
    """Dump the class grid as a paletted PNG plus a JSON sidecar."""
    path = Path(png_path)
    pngio.save_label_png(plm.classes, path)
    sidecar = {"tau_p": plm.tau_p, "tau_t": plm.tau_t, "q_t": plm.reliability}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
