"""Target-based image matching and rare-class sampling.

The class distribution of the current target pseudo-label is turned into
rarity weights (a low-temperature softmax of 1 - frequency), and each source
image is scored by how many pixels it contributes to classes that are both
present in the pseudo-label and rare there. The best-scoring image is paired
with the target image in the batch. The same rarity machinery drives
rare-class sampling of target images from the aggregate pseudo-label
distribution.

Unknown pixels (class C+1) never participate: frequencies, rarity weights,
and overlap sets are all computed over the known classes 1..C.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ClassDistribution:
    """Pixel counts and derived (rarity-) frequencies for one label map.

    ``counts`` has C+1 slots (class c at index c-1, unknown last); ``freq``
    and ``rarity`` cover the known classes only. ``rarity`` is None until
    ``with_rarity`` fills it.
    """

    num_classes: int
    counts: np.ndarray
    freq: np.ndarray
    rarity: np.ndarray | None = None
    temperature: float | None = None

    def with_rarity(self, temperature: float) -> "ClassDistribution":
        return replace(
            self,
            rarity=rarity_weights(self.freq, temperature),
            temperature=float(temperature),
        )


@dataclass(frozen=True)
class SourceIndex:
    """Precomputed per-image known-class pixel counts.

    ``counts[i, c-1]`` is the number of pixels of class c in image ``ids[i]``.
    Built once at dataset load so scoring a step is O(images * classes)
    instead of O(pixels).
    """

    num_classes: int
    ids: tuple[str, ...]
    counts: np.ndarray  # (N, C) int64

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("image ids must be unique")
        if self.counts.shape != (len(self.ids), self.num_classes):
            raise ValueError(
                f"counts shape {self.counts.shape} != ({len(self.ids)}, {self.num_classes})"
            )
        if np.any(self.counts < 0):
            raise ValueError("counts must be nonnegative")

    def to_json_dict(self) -> dict:
        return {img: self.counts[i].tolist() for i, img in enumerate(self.ids)}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SourceIndex":
        ids = tuple(doc.keys())
        counts = np.asarray([doc[i] for i in ids], dtype=np.int64)
        return cls(num_classes=counts.shape[1], ids=ids, counts=counts)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict()))

    @classmethod
    def load(cls, path) -> "SourceIndex":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def index_from_labels(ids, label_maps, num_classes: int) -> SourceIndex:
    """Count known-class pixels per label map; values above C are ignored."""
    ids = tuple(str(i) for i in ids)
    counts = np.zeros((len(ids), num_classes), dtype=np.int64)
    for row, labels in enumerate(label_maps):
        arr = np.asarray(getattr(labels, "classes", labels)).ravel()
        binned = np.bincount(arr, minlength=num_classes + 2)
        counts[row] = binned[1 : num_classes + 1]
    return SourceIndex(num_classes=num_classes, ids=ids, counts=counts)


def class_frequency(labels, num_classes: int) -> ClassDistribution:
    """Known-class pixel proportions of one (pseudo-)label map.

    Unknown pixels are counted but excluded from the frequency normalization;
    if every pixel is unknown the frequencies are all zero.
    """
    arr = np.asarray(getattr(labels, "classes", labels))
    if arr.size == 0:
        raise ValueError("empty label map")
    if arr.min() < 1 or arr.max() > num_classes + 1:
        raise ValueError(f"label values must lie in 1..{num_classes + 1}")
    binned = np.bincount(arr.ravel(), minlength=num_classes + 2)
    counts = binned[1 : num_classes + 2].astype(np.int64)
    total_known = counts[:num_classes].sum()
    if total_known > 0:
        freq = counts[:num_classes] / total_known
    else:
        freq = np.zeros(num_classes)
    return ClassDistribution(num_classes=num_classes, counts=counts, freq=freq)


def rarity_weights(freq: np.ndarray, temperature: float) -> np.ndarray:
    """softmax((1 - f_c) / T) over all class slots; rare classes score high."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    f = np.asarray(freq, dtype=np.float64)
    if np.any(f < 0) or np.any(f > 1):
        raise ValueError("frequencies must lie in [0, 1]")
    z = (1.0 - f) / temperature
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def overlap_classes(source_counts: np.ndarray, target_counts: np.ndarray) -> np.ndarray:
    """Known classes with pixels in both count vectors (1-based ids)."""
    n = len(source_counts)
    src = np.asarray(source_counts)[:n]
    tgt = np.asarray(target_counts)[:n]
    return np.flatnonzero((src > 0) & (tgt > 0)) + 1


def match_score(source_counts: np.ndarray, rarity: np.ndarray, overlap) -> float:
    """Sum of source pixel counts weighted by rarity over the overlap set."""
    src = np.asarray(source_counts, dtype=np.float64)
    rar = np.asarray(rarity, dtype=np.float64)
    idx = np.asarray(list(overlap), dtype=np.int64) - 1
    if idx.size == 0:
        return 0.0
    return float(np.sum(src[idx] * rar[idx]))


def select_source(
    index: SourceIndex,
    target_pseudo,
    temperature: float,
    top_k: int = 1,
    rng: np.random.Generator | None = None,
) -> str:
    """Pick the source image that best covers the pseudo-label's rare classes.

    Strict argmax of the match score with ties broken toward the lowest image
    id. With ``top_k`` > 1 the choice is uniform among the k best (requires
    ``rng``).
    """
    if len(index.ids) == 0:
        raise ValueError("empty source index")
    dist = class_frequency(target_pseudo, index.num_classes)
    rarity = rarity_weights(dist.freq, temperature)
    present = dist.counts[: index.num_classes] > 0
    scores = index.counts @ (rarity * present)

    order = sorted(range(len(index.ids)), key=lambda i: (-scores[i], index.ids[i]))
    if top_k <= 1:
        return index.ids[order[0]]
    if rng is None:
        raise ValueError("top_k > 1 sampling needs an rng")
    pick = rng.integers(min(top_k, len(order)))
    return index.ids[order[pick]]


def target_rcs_sample(
    target_index: SourceIndex,
    temperature: float,
    rng: np.random.Generator | int,
    max_retries: int = 20,
) -> str:
    """Rare-class sampling of a target image id.

    A class is drawn with the rarity probability of the aggregate pseudo-label
    distribution, then an image containing that class is drawn uniformly.
    Classes absent from every image are re-drawn a bounded number of times
    before falling back to a uniform image pick.
    """
    if len(target_index.ids) == 0:
        raise ValueError("empty target index")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)

    totals = target_index.counts.sum(axis=0)
    grand = totals.sum()
    freq = totals / grand if grand > 0 else np.zeros(target_index.num_classes)
    rarity = rarity_weights(freq, temperature)

    for _ in range(max_retries):
        cls = int(rng.choice(target_index.num_classes, p=rarity)) + 1
        holders = np.flatnonzero(target_index.counts[:, cls - 1] > 0)
        if holders.size:
            return target_index.ids[int(rng.choice(holders))]
    return target_index.ids[int(rng.integers(len(target_index.ids)))]
