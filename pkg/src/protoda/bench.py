"""Procedural paired source/target segmentation benchmark.

Images are compositions of textured elliptical blobs over a full-canvas
background class. Each class has a stable appearance: a base hue on the
golden-ratio wheel and a texture (solid, stripes, or checker by class id
mod 3) that modulates brightness. Target images render the same classes
through a domain shift: rotated hue, scaled texture frequency, and additive
Gaussian pixel noise.

Class lists follow the category-shift scenario: common classes exist in both
domains, source-private classes only in source labels, target-private
classes only in target labels. Label maps use "model space" ids, the 1-based
position in the concatenation common + source_private + target_private, so
source labels align directly with the classifier heads 1..C_s.

Non-background classes occur in an image with long-tailed probability
(base^(rank+1), floored), so rarity-weighted sampling has something to bite
on. Generation is deterministic per seed and embarrassingly parallel per
image: every image draws from its own child generator.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import pngio

_VAL_BASE = 0.76
_TEX_AMP = 0.18
_SAT = 0.65


@dataclass(frozen=True)
class DomainShift:
    hue_shift: float = 0.0
    noise_std: float = 0.0
    texture_freq: float = 0.0  # relative change: target freq = base * (1 + this)


@dataclass(frozen=True)
class ScenarioConfig:
    common_classes: tuple[int, ...]
    source_private: tuple[int, ...] = ()
    target_private: tuple[int, ...] = ()
    image_size: tuple[int, int] = (64, 64)
    images_per_domain: int = 200
    domain_shift: DomainShift = DomainShift()
    seed: int = 0
    longtail_base: float = 0.55
    occurrence_floor: float = 0.05
    occurrence: dict = field(default_factory=dict)  # user class id -> probability
    # target-private content is genuinely novel; render it with scaled-down
    # saturation so it sits off the source color manifold (1.0 = same family)
    private_saturation: float = 0.25

    def __post_init__(self):
        common = set(self.common_classes)
        src = set(self.source_private)
        tgt = set(self.target_private)
        if not self.common_classes:
            raise ValueError("at least one common class is required")
        if common & src or common & tgt or src & tgt:
            raise ValueError("class lists must be pairwise disjoint")
        if self.images_per_domain < 1:
            raise ValueError("images_per_domain must be >= 1")
        if self.image_size[0] < 8 or self.image_size[1] < 8:
            raise ValueError("image_size must be at least 8x8")

    # model-space views ----------------------------------------------------

    @property
    def ordered_classes(self) -> tuple[int, ...]:
        return (*self.common_classes, *self.source_private, *self.target_private)

    @property
    def num_common(self) -> int:
        return len(self.common_classes)

    @property
    def num_source_classes(self) -> int:
        """C_s: classifier heads 1..C_s, unknown head C_s+1."""
        return len(self.common_classes) + len(self.source_private)

    @property
    def unknown_id(self) -> int:
        return self.num_source_classes + 1

    def model_id(self, class_id: int) -> int:
        return self.ordered_classes.index(class_id) + 1

    def domain_classes(self, domain: str) -> tuple[int, ...]:
        """User-space class ids of one domain, background (first common) first."""
        if domain == "source":
            return (*self.common_classes, *self.source_private)
        if domain == "target":
            return (*self.common_classes, *self.target_private)
        raise ValueError(f"unknown domain {domain!r}")

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ScenarioConfig":
        doc = dict(doc)
        doc["common_classes"] = tuple(doc["common_classes"])
        doc["source_private"] = tuple(doc.get("source_private", ()))
        doc["target_private"] = tuple(doc.get("target_private", ()))
        doc["image_size"] = tuple(doc.get("image_size", (64, 64)))
        doc["domain_shift"] = DomainShift(**doc.get("domain_shift", {}))
        if "occurrence" in doc and doc["occurrence"]:
            doc["occurrence"] = {int(k): float(v) for k, v in doc["occurrence"].items()}
        return cls(**doc)


@dataclass(frozen=True)
class SegSample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    labels: np.ndarray  # (H, W) model-space class ids


class SegDataset:
    """Images plus labels with train and eval access kept apart.

    Source labels are training data (``train_label``); target labels exist
    only for scoring and are reachable solely through ``eval_label``.
    """

    def __init__(self, domain, num_classes, class_ids, ids, images, labels):
        self.domain = domain
        self.num_classes = num_classes  # C_s of the scenario
        self.class_ids = tuple(class_ids)  # model-space ids that may appear
        self.ids = tuple(ids)
        self.images = tuple(images)
        self._eval_labels = tuple(labels)

    def __len__(self) -> int:
        return len(self.images)

    def image(self, i: int) -> np.ndarray:
        return self.images[i]

    def train_label(self, i: int) -> np.ndarray:
        if self.domain != "source":
            raise RuntimeError(
                "target ground truth is evaluation-only; use eval_label from the "
                "evaluation harness"
            )
        return self._eval_labels[i]

    def train_sample(self, i: int) -> SegSample:
        return SegSample(self.images[i], self.train_label(i))

    def eval_label(self, i: int) -> np.ndarray:
        return self._eval_labels[i]


# ---------------------------------------------------------------------------
# appearance model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Appearance:
    rgb: tuple[float, float, float]  # base color at full value
    texture: str  # solid | stripes | checker
    freq: float  # cycles per pixel
    angle: float  # stripe direction


def class_appearance(
    class_id: int, shift: DomainShift | None = None, saturation_scale: float = 1.0
) -> Appearance:
    """Base appearance of a class, optionally seen through a domain shift."""
    hue = (0.1 + class_id * 0.618033988749895) % 1.0
    freq = 0.10 + 0.02 * (class_id % 3)
    if shift is not None:
        hue = (hue + shift.hue_shift) % 1.0
        freq *= 1.0 + shift.texture_freq
    rgb = colorsys.hsv_to_rgb(hue, _SAT * saturation_scale, 1.0)
    texture = ("solid", "stripes", "checker")[class_id % 3]
    return Appearance(rgb=rgb, texture=texture, freq=freq, angle=(class_id * 0.7) % math.pi)


def occurrence_profile(config: ScenarioConfig, domain: str) -> dict[int, float]:
    """Model-space id -> per-image occurrence probability for one domain."""
    classes = config.domain_classes(domain)
    profile = {config.model_id(classes[0]): 1.0}  # background fills the canvas
    for rank, cid in enumerate(classes[1:]):
        p = max(config.longtail_base ** (rank + 1), config.occurrence_floor)
        p = config.occurrence.get(cid, p)
        profile[config.model_id(cid)] = float(p)
    return profile


def _texture_value(app: Appearance, xx: np.ndarray, yy: np.ndarray, rng) -> np.ndarray:
    if app.texture == "solid":
        return np.full(xx.shape, _VAL_BASE)
    if app.texture == "stripes":
        phase = rng.uniform(0.0, 2.0 * math.pi)
        axis = xx * math.cos(app.angle) + yy * math.sin(app.angle)
        pattern = np.sign(np.sin(2.0 * math.pi * app.freq * axis + phase))
    else:  # checker
        phase = rng.uniform(0.0, 2.0 * math.pi)
        pattern = np.sign(
            np.sin(2.0 * math.pi * app.freq * xx + phase)
            * np.sin(2.0 * math.pi * app.freq * yy + phase)
        )
    return _VAL_BASE + _TEX_AMP * pattern


def _ellipse_mask(h, w, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cy = rng.uniform(0, h)
    cx = rng.uniform(0, w)
    ry = rng.uniform(0.08 * h, 0.22 * h)
    rx = rng.uniform(0.08 * w, 0.22 * w)
    alpha = rng.uniform(0, math.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(alpha) + dy * math.sin(alpha)
    v = -dx * math.sin(alpha) + dy * math.cos(alpha)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _generate_image(config: ScenarioConfig, domain: str, rng) -> SegSample:
    h, w = config.image_size
    classes = config.domain_classes(domain)
    profile = occurrence_profile(config, domain)
    shift = config.domain_shift if domain == "target" else None

    labels = np.full((h, w), config.model_id(classes[0]), dtype=np.int64)
    for cid in classes[1:]:
        if rng.random() >= profile[config.model_id(cid)]:
            continue
        blob = np.zeros((h, w), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            blob |= _ellipse_mask(h, w, rng)
        labels[blob] = config.model_id(cid)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    image = np.zeros((h, w, 3))
    for cid in classes:
        mask = labels == config.model_id(cid)
        if not mask.any():
            continue
        sat = config.private_saturation if cid in config.target_private else 1.0
        app = class_appearance(cid, shift, saturation_scale=sat)
        value = _texture_value(app, xx, yy, rng)
        image[mask] = np.asarray(app.rgb) * value[mask, None]

    if shift is not None and shift.noise_std > 0:
        image = image + rng.normal(0.0, shift.noise_std, size=image.shape)
    return SegSample(image=np.clip(image, 0.0, 1.0), labels=labels)


def generate_domain_pair(config: ScenarioConfig) -> tuple[SegDataset, SegDataset]:
    """Deterministically generate the labeled source and target datasets.

    Target labels are retained for evaluation only; the dataset object blocks
    train-side access to them.
    """
    datasets = []
    for d_idx, domain in enumerate(("source", "target")):
        ids, images, labels = [], [], []
        for i in range(config.images_per_domain):
            rng = np.random.default_rng([config.seed, d_idx, i])
            sample = _generate_image(config, domain, rng)
            ids.append(f"{'src' if domain == 'source' else 'tgt'}_{i:05d}")
            images.append(sample.image)
            labels.append(sample.labels)
        class_ids = tuple(config.model_id(c) for c in config.domain_classes(domain))
        datasets.append(
            SegDataset(
                domain=domain,
                num_classes=config.num_source_classes,
                class_ids=class_ids,
                ids=ids,
                images=images,
                labels=labels,
            )
        )
    return datasets[0], datasets[1]


def scenario_presets(name: str) -> ScenarioConfig:
    """Canonical category-shift scenarios on the 64x64 synthetic bench."""
    shift = DomainShift(hue_shift=0.05, noise_std=0.04, texture_freq=0.35)
    if name == "closed":
        return ScenarioConfig(common_classes=tuple(range(1, 9)), domain_shift=shift)
    if name == "partial":
        return ScenarioConfig(
            common_classes=tuple(range(1, 7)),
            source_private=(7, 8),
            domain_shift=shift,
        )
    if name == "open":
        return ScenarioConfig(
            common_classes=tuple(range(1, 7)),
            target_private=(7,),
            domain_shift=shift,
            occurrence={7: 0.4},
        )
    if name == "open_partial":
        return ScenarioConfig(
            common_classes=tuple(range(1, 7)),
            source_private=(7, 8),
            target_private=(9,),
            domain_shift=shift,
            occurrence={9: 0.4},
        )
    raise ValueError(f"unknown scenario preset {name!r}")


def class_mix(
    source_sample: SegSample,
    target_sample: SegSample,
    rng: np.random.Generator,
    classes=None,
) -> tuple[SegSample, np.ndarray]:
    """Paste a random half of the source classes onto the target sample.

    Pasted pixels carry the source labels, the rest keep the target labels
    (pseudo-labels during training). Returns the mixed sample and the
    provenance mask (True where pixels came from the source image).
    """
    if source_sample.image.shape != target_sample.image.shape:
        raise ValueError("source and target samples must have equal sizes")
    if classes is None:
        present = np.unique(source_sample.labels)
        take = math.ceil(len(present) / 2)
        classes = rng.choice(present, size=take, replace=False)
    chosen = np.asarray(sorted(set(int(c) for c in np.asarray(classes).ravel())))

    mask = np.isin(source_sample.labels, chosen)
    image = np.where(mask[..., None], source_sample.image, target_sample.image)
    labels = np.where(mask, source_sample.labels, target_sample.labels)
    return SegSample(image=image, labels=labels), mask


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------


def write_dataset(ds: SegDataset, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    label_dir = root / ("labels" if ds.domain == "source" else "eval_labels")
    label_dir.mkdir(parents=True, exist_ok=True)
    for i, img_id in enumerate(ds.ids):
        pngio.save_rgb_png(ds.images[i], root / "images" / f"{img_id}.png")
        pngio.save_label_png(ds._eval_labels[i], label_dir / f"{img_id}.png")
    manifest = {
        "domain": ds.domain,
        "num_classes": ds.num_classes,
        "class_ids": list(ds.class_ids),
        "ids": list(ds.ids),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(root) -> SegDataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    domain = manifest["domain"]
    label_dir = root / ("labels" if domain == "source" else "eval_labels")
    images, labels = [], []
    for img_id in manifest["ids"]:
        images.append(pngio.load_rgb_png(root / "images" / f"{img_id}.png"))
        labels.append(pngio.load_label_png(label_dir / f"{img_id}.png"))
    return SegDataset(
        domain=domain,
        num_classes=manifest["num_classes"],
        class_ids=manifest["class_ids"],
        ids=manifest["ids"],
        images=images,
        labels=labels,
    )
