"""Self-training loop joining all the pieces, plus the ablation driver.

One step trains on exactly one (source, target) image pair:

  1. pick a target image (rare-class sampling or uniform)
  2. teacher forward on it; pixel weights (if enabled), pseudo-labels,
     image reliability
  3. pick a source image (pseudo-label-driven matching or uniform)
  4. optionally class-mix the source into the target branch
  5. student forward on both branch images
  6. source cross-entropy + weighted target cross-entropy + prototype loss
     (each averaged per pixel), all gradients analytic
  7. SGD step on the student, then EMA update of the teacher

Every stochastic choice draws from its own seeded stream, so flipping one
toggle never perturbs the draws of another and runs are bitwise reproducible
for a fixed config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .bench import ScenarioConfig, SegDataset, SegSample, class_mix, generate_domain_pair
from .etf import TARGET, SOURCE, PrototypeBank, build_etf
from .matching import SourceIndex, index_from_labels, select_source, target_rcs_sample
from .metrics import MetricsReport, evaluate
from .net import PixelNet, sgd_step
from .proto_losses import ProtoLossConfig, proto_loss_batch, weight_map
from .pseudo import PseudoLabelMap, assign_pseudo_labels, ema_update
from .seg_losses import LossBreakdown, one_hot, source_seg_loss, target_seg_loss


class TrainingDiverged(RuntimeError):
    """Raised when a step produces a non-finite loss or gradient."""


@dataclass(frozen=True)
class Hyperparams:
    tau_p: float = 0.5
    tau_t: float = 0.968
    lambda1: float = 0.01
    lambda2: float = 0.01
    tau: float = 0.1
    temperature: float = 0.01  # T of the rarity softmax
    alpha: float = 0.999  # EMA smoothing
    sigma: float = 1.0  # gaussian weight-variant width

    def __post_init__(self):
        if not 0.0 < self.tau_p < 1.0 or not 0.0 < self.tau_t < 1.0:
            raise ValueError("tau_p and tau_t must lie in (0, 1)")

    def proto_config(self) -> ProtoLossConfig:
        return ProtoLossConfig(
            lambda1=self.lambda1, lambda2=self.lambda2, tau=self.tau, sigma=self.sigma
        )


@dataclass(frozen=True)
class Toggles:
    dspd_loss: bool = False
    dspd_weight: bool = False
    tim_matching: bool = False
    target_rcs: bool = False
    class_mix: bool = False
    weight_variant: str = "ours"

    @classmethod
    def all_on(cls, weight_variant: str = "ours") -> "Toggles":
        return cls(True, True, True, True, True, weight_variant)


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig
    hyper: Hyperparams = Hyperparams()
    toggles: Toggles = Toggles()
    steps: int = 2000
    batch: int = 1
    seed: int = 0
    lr: float = 0.05
    weight_decay: float = 1e-4
    patch_radius: int = 2
    hidden: tuple[int, ...] = (64, 64)
    embed_dim: int | None = None  # default 2*C_s+1
    # pseudo-label counts drift on the teacher's EMA timescale ~1/(1-alpha),
    # so refreshing the sampling index every 200 steps loses nothing
    rcs_refresh: int = 200
    # strict argmax over a 200-image pool recycles a handful of champions;
    # uniform choice among the top matches keeps diversity at desk scale
    tim_top_k: int = 8
    proto_qt_weighting: bool = False  # scale target-pixel proto loss by q_t
    reliability_known_only: bool = True  # q_t max over known heads only
    eval_every: int | None = None
    record_pseudo: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch != 1:
            raise ValueError("desk-scale training pairs exactly 1 source + 1 target image")


@dataclass(frozen=True)
class StepLog:
    step: int
    source_seg: float
    target_seg: float
    proto: float
    total: float
    q_t: float
    source_id: str
    target_id: str


@dataclass
class PseudoRecord:
    step: int
    teacher_probs: np.ndarray
    weights_in: np.ndarray
    pseudo: PseudoLabelMap


@dataclass
class TrainResult:
    config: ExperimentConfig
    net: PixelNet
    teacher: PixelNet
    bank: PrototypeBank
    report: MetricsReport
    loss_log: list[StepLog]
    evals: list[tuple[int, MetricsReport]] = field(default_factory=list)
    pseudo_records: list[PseudoRecord] = field(default_factory=list)


def train(
    config: ExperimentConfig,
    datasets: tuple[SegDataset, SegDataset] | None = None,
) -> TrainResult:
    """Run the full loop and evaluate the student on the target set."""
    scenario = config.scenario
    source_ds, target_ds = datasets if datasets is not None else generate_domain_pair(scenario)
    n_classes = scenario.num_source_classes
    embed_dim = config.embed_dim or (2 * n_classes + 1)

    bank = build_etf(n_classes, embed_dim, config.seed)
    student = PixelNet.create(
        num_classes=n_classes,
        patch_radius=config.patch_radius,
        channels=3,
        hidden=config.hidden,
        embed_dim=embed_dim,
        seed=config.seed,
    )
    teacher = student.clone()

    hyper = config.hyper
    toggles = config.toggles
    plc = hyper.proto_config()
    h, w = scenario.image_size
    n_px = h * w

    rng_target = np.random.default_rng([config.seed, 101])
    rng_source = np.random.default_rng([config.seed, 102])
    rng_mix = np.random.default_rng([config.seed, 103])
    rng_rcs = np.random.default_rng([config.seed, 104])
    rng_topk = np.random.default_rng([config.seed, 105])

    src_index = index_from_labels(
        source_ds.ids,
        [source_ds.train_label(i) for i in range(len(source_ds))],
        n_classes,
    )
    src_pos = {img_id: i for i, img_id in enumerate(source_ds.ids)}
    tgt_pos = {img_id: i for i, img_id in enumerate(target_ds.ids)}
    rcs_index: SourceIndex | None = None

    loss_log: list[StepLog] = []
    pseudo_records: list[PseudoRecord] = []
    evals: list[tuple[int, MetricsReport]] = []

    for step in range(1, config.steps + 1):
        # 1. target image
        if toggles.target_rcs:
            if rcs_index is None or (step - 1) % config.rcs_refresh == 0:
                rcs_index = _pseudo_index(teacher, target_ds, bank, config)
            t_idx = tgt_pos[target_rcs_sample(rcs_index, hyper.temperature, rng_rcs)]
        else:
            t_idx = int(rng_target.integers(len(target_ds)))
        target_image = target_ds.image(t_idx)

        # 2. teacher pass: weights, pseudo-labels, reliability
        t_emb, t_probs = teacher.forward(target_image)
        if toggles.dspd_weight:
            candidate = t_probs[..., :n_classes].argmax(axis=-1) + 1
            weights_in = weight_map(
                t_emb, candidate, bank, toggles.weight_variant, hyper.sigma
            )
        else:
            weights_in = np.ones((h, w))
        plm = assign_pseudo_labels(
            t_probs,
            weights_in,
            hyper.tau_p,
            hyper.tau_t,
            reliability_known_only=config.reliability_known_only,
        )
        if config.record_pseudo:
            pseudo_records.append(
                PseudoRecord(step, t_probs.copy(), weights_in.copy(), plm)
            )

        # 3. source image; an all-unknown pseudo-label gives matching nothing
        # to score (every overlap is empty), so fall back to the uniform
        # stream instead of letting the tie rule hammer one image
        if toggles.tim_matching and np.any(plm.classes <= n_classes):
            s_id = select_source(
                src_index, plm, hyper.temperature, config.tim_top_k, rng_topk
            )
            s_idx = src_pos[s_id]
        else:
            s_idx = int(rng_source.integers(len(source_ds)))
        source_sample = source_ds.train_sample(s_idx)

        # 4. target branch, optionally class-mixed
        if toggles.class_mix:
            mixed, paste_mask = class_mix(
                source_sample, SegSample(target_image, plm.classes), rng_mix
            )
            branch_image, branch_classes = mixed.image, mixed.labels
            branch_weights = np.where(
                paste_mask, 1.0, plm.weights * plm.reliability
            )
        else:
            paste_mask = np.zeros((h, w), dtype=bool)
            branch_image, branch_classes = target_image, plm.classes
            branch_weights = None  # plain Eq-11 path via the pseudo map

        # 5. student forward on both branch images, stacked into one pass
        patches = np.vstack(
            [student._patches(source_sample.image), student._patches(branch_image)]
        )
        emb_flat, probs_flat, acts = student._forward_flat(patches)
        s_emb = emb_flat[:n_px].reshape(h, w, embed_dim)
        x_emb = emb_flat[n_px:].reshape(h, w, embed_dim)
        s_probs = probs_flat[:n_px].reshape(h, w, n_classes + 1)
        x_probs = probs_flat[n_px:].reshape(h, w, n_classes + 1)

        # 6. losses (per-pixel means)
        src_loss, src_dlogits = source_seg_loss(
            s_probs, one_hot(source_sample.labels, n_classes + 1)
        )
        src_loss /= n_px
        src_dlogits = src_dlogits / n_px

        if branch_weights is None:
            tgt_loss, tgt_dlogits = target_seg_loss(x_probs, plm)
        else:
            mixed_plm = PseudoLabelMap(
                classes=branch_classes,
                confidence=plm.confidence,
                weights=branch_weights,
                reliability=1.0,  # q_t already folded into the weights
                tau_p=plm.tau_p,
                tau_t=plm.tau_t,
            )
            tgt_loss, tgt_dlogits = target_seg_loss(x_probs, mixed_plm)
        tgt_loss /= n_px
        tgt_dlogits = tgt_dlogits / n_px

        if toggles.dspd_loss:
            proto_val, s_demb, x_demb = _proto_terms(
                bank, plc, s_emb, source_sample.labels, x_emb, branch_classes,
                paste_mask, plm.reliability if config.proto_qt_weighting else 1.0,
            )
        else:
            proto_val = 0.0
            s_demb = np.zeros_like(s_emb)
            x_demb = np.zeros_like(x_emb)

        breakdown = LossBreakdown.of(src_loss, tgt_loss, float(proto_val))
        if not math.isfinite(breakdown.total):
            raise TrainingDiverged(
                f"non-finite loss at step {step}: source={breakdown.source_seg} "
                f"target={breakdown.target_seg} proto={breakdown.proto} "
                f"(source image {source_ds.ids[s_idx]}, target image {target_ds.ids[t_idx]})"
            )

        # 7. backward over the stacked pair + SGD + EMA
        dl = np.vstack(
            [src_dlogits.reshape(n_px, -1), tgt_dlogits.reshape(n_px, -1)]
        )
        dn = np.vstack([s_demb.reshape(n_px, -1), x_demb.reshape(n_px, -1)])
        grads = student._backward_flat(acts, emb_flat, dl, dn)
        try:
            student.params = sgd_step(student.params, grads, config.lr, config.weight_decay)
        except FloatingPointError as err:
            raise TrainingDiverged(f"{err} at step {step}") from err
        teacher.params = ema_update(teacher.params, student.params, hyper.alpha)

        loss_log.append(
            StepLog(
                step=step,
                source_seg=breakdown.source_seg,
                target_seg=breakdown.target_seg,
                proto=breakdown.proto,
                total=breakdown.total,
                q_t=plm.reliability,
                source_id=source_ds.ids[s_idx],
                target_id=target_ds.ids[t_idx],
            )
        )

        if config.eval_every and step % config.eval_every == 0 and step < config.steps:
            evals.append((step, _evaluate_student(student, target_ds, scenario)))

    report = _evaluate_student(student, target_ds, scenario)
    return TrainResult(
        config=config,
        net=student,
        teacher=teacher,
        bank=bank,
        report=report,
        loss_log=loss_log,
        evals=evals,
        pseudo_records=pseudo_records,
    )


def _proto_terms(
    bank: PrototypeBank,
    plc: ProtoLossConfig,
    source_emb: np.ndarray,
    source_labels: np.ndarray,
    branch_emb: np.ndarray,
    branch_classes: np.ndarray,
    paste_mask: np.ndarray,
    target_scale: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Prototype loss over source pixels and the (possibly mixed) target branch.

    Source pixels and source-pasted branch pixels use their ground-truth class
    against source prototypes; the remaining branch pixels use their pseudo
    class (unknown included) against target prototypes. Returns the per-pixel
    mean plus gradient grids on the normalized embeddings.
    """
    h, w, d = source_emb.shape
    total_px = 2 * h * w

    s_unit = _normalize(source_emb.reshape(-1, d))
    x_unit = _normalize(branch_emb.reshape(-1, d))

    s_loss, s_grad = proto_loss_batch(
        s_unit, source_labels.ravel(), SOURCE, bank, plc
    )

    paste = paste_mask.ravel()
    cls = branch_classes.ravel()
    x_grad = np.zeros_like(x_unit)
    x_sum = 0.0
    if paste.any():
        loss_p, grad_p = proto_loss_batch(x_unit[paste], cls[paste], SOURCE, bank, plc)
        x_grad[paste] = grad_p
        x_sum += loss_p.sum()
    rest = ~paste
    if rest.any():
        loss_t, grad_t = proto_loss_batch(x_unit[rest], cls[rest], TARGET, bank, plc)
        x_grad[rest] = target_scale * grad_t
        x_sum += target_scale * loss_t.sum()

    value = (s_loss.sum() + x_sum) / total_px
    s_demb = (s_grad / total_px).reshape(h, w, d)
    x_demb = (x_grad / total_px).reshape(h, w, d)
    return value, s_demb, x_demb


def _normalize(emb: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(emb, axis=1)
    if np.any(norms == 0.0):
        raise TrainingDiverged("zero pixel embedding during prototype loss")
    return emb / norms[:, None]


def _pseudo_index(
    teacher: PixelNet,
    target_ds: SegDataset,
    bank: PrototypeBank,
    config: ExperimentConfig,
    chunk: int = 16,
) -> SourceIndex:
    """Per-target-image pseudo-label class counts under the current teacher.

    Images are processed in stacked chunks (one tall pixel grid) purely for
    speed; the per-pixel decisions are identical to the per-image path.
    """
    n_classes = target_ds.num_classes
    h, w = target_ds.images[0].shape[:2]
    n_px = h * w
    counts = np.zeros((len(target_ds), n_classes), dtype=np.int64)

    for start in range(0, len(target_ds), chunk):
        images = target_ds.images[start : start + chunk]
        patches = np.vstack([teacher._patches(img) for img in images])
        emb_flat, probs_flat, _ = teacher._forward_flat(patches)
        tall_emb = emb_flat.reshape(len(images) * h, w, teacher.embed_dim)
        tall_probs = probs_flat.reshape(len(images) * h, w, n_classes + 1)

        if config.toggles.dspd_weight:
            candidate = tall_probs[..., :n_classes].argmax(axis=-1) + 1
            weights = weight_map(
                tall_emb, candidate, bank, config.toggles.weight_variant, config.hyper.sigma
            )
        else:
            weights = np.ones(tall_probs.shape[:2])
        plm = assign_pseudo_labels(
            tall_probs,
            weights,
            config.hyper.tau_p,
            config.hyper.tau_t,
            reliability_known_only=config.reliability_known_only,
        )
        classes = plm.classes.reshape(len(images), n_px)
        for row, img_classes in enumerate(classes):
            binned = np.bincount(img_classes, minlength=n_classes + 2)
            counts[start + row] = binned[1 : n_classes + 1]

    return SourceIndex(num_classes=n_classes, ids=target_ds.ids, counts=counts)


def predict_dataset(net: PixelNet, dataset: SegDataset) -> list[np.ndarray]:
    """Student argmax over all C_s+1 heads per image."""
    preds = []
    for i in range(len(dataset)):
        _, probs = net.forward(dataset.image(i))
        preds.append(probs.argmax(axis=-1) + 1)
    return preds


def _evaluate_student(
    net: PixelNet, target_ds: SegDataset, scenario: ScenarioConfig
) -> MetricsReport:
    preds = predict_dataset(net, target_ds)
    gts = [target_ds.eval_label(i) for i in range(len(target_ds))]
    return evaluate(preds, gts, scenario)


# ---------------------------------------------------------------------------
# ablation driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    name: str
    toggles: Toggles
    common: tuple[float, ...]
    private: tuple[float, ...]
    h: tuple[float, ...]

    def stats(self) -> dict[str, tuple[float, float]]:
        out = {}
        for key, vals in (("common", self.common), ("private", self.private), ("h", self.h)):
            arr = np.asarray(vals)
            out[key] = (float(arr.mean()), float(arr.std()))
        return out


def standard_grid() -> list[tuple[str, Toggles]]:
    """The four-row component ladder: baseline, +DSPD, +TIM, full."""
    return [
        ("baseline", Toggles()),
        ("+DSPD", Toggles(dspd_loss=True, dspd_weight=True)),
        ("+TIM", Toggles(tim_matching=True, target_rcs=True)),
        ("full", Toggles.all_on()),
    ]


def weight_variant_grid() -> list[tuple[str, Toggles]]:
    return [(v, Toggles.all_on(weight_variant=v)) for v in ("ours", "abs", "gaussian", "mean")]


def ablate(
    base: ExperimentConfig,
    grid: list[tuple[str, Toggles]],
    seeds: tuple[int, ...] = (0, 1, 2),
    datasets: tuple[SegDataset, SegDataset] | None = None,
) -> list[AblationRow]:
    """Run every toggle combination over the seeds and aggregate the metrics."""
    if not grid:
        raise ValueError("empty ablation grid")
    if not seeds:
        raise ValueError("need at least one seed")
    if datasets is None:
        datasets = generate_domain_pair(base.scenario)
    rows = []
    for name, toggles in grid:
        commons, privates, hs = [], [], []
        for seed in seeds:
            cfg = replace(base, toggles=toggles, seed=seed)
            result = train(cfg, datasets=datasets)
            commons.append(100.0 * result.report.common_miou)
            privates.append(100.0 * result.report.private_iou)
            hs.append(100.0 * result.report.h_score)
        rows.append(
            AblationRow(
                name=name,
                toggles=toggles,
                common=tuple(commons),
                private=tuple(privates),
                h=tuple(hs),
            )
        )
    return rows


def format_ablation_table(rows: list[AblationRow]) -> str:
    """Mean +/- std table over Common / Private / H-score, one config per row."""
    header = f"{'Config':<12}  {'Common':>14}  {'Private':>14}  {'H-score':>14}"
    lines = [header, "-" * len(header)]
    for row in rows:
        stats = row.stats()
        cells = [
            f"{stats[k][0]:6.2f} ± {stats[k][1]:5.2f}" for k in ("common", "private", "h")
        ]
        lines.append(f"{row.name:<12}  {cells[0]:>14}  {cells[1]:>14}  {cells[2]:>14}")
    return "\n".join(lines)
