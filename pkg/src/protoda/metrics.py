"""Evaluation against target ground truth: per-class IoU, common mIoU,
target-private ("unknown") IoU, and their harmonic mean.

Ground-truth target-private classes are collapsed into a single unknown row;
predictions keep all C_s+1 heads as columns, so source-private predictions on
target pixels show up as false positives against whichever class owns the
pixel. Classes with neither ground-truth nor predicted pixels have undefined
IoU and are excluded from the common mean.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .bench import ScenarioConfig


@dataclass(frozen=True)
class MetricsReport:
    per_class_iou: dict[int, float]  # common classes, NaN = undefined
    common_miou: float
    private_iou: float
    h_score: float
    confusion: np.ndarray  # (num_common+1, C_s+1); last row/col = unknown

    def to_json_dict(self) -> dict:
        return {
            "per_class_iou": {
                str(k): (None if math.isnan(v) else v)
                for k, v in self.per_class_iou.items()
            },
            "common_miou": self.common_miou,
            "private_iou": self.private_iou,
            "h_score": self.h_score,
            "confusion": self.confusion.tolist(),
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)


def h_score(common: float, private: float) -> float:
    """Harmonic mean 2cp/(c+p); 0 when both are 0. Units must match."""
    if common < 0 or private < 0:
        raise ValueError("h_score arguments must be nonnegative")
    if common + private == 0:
        return 0.0
    return 2.0 * common * private / (common + private)


def evaluate(predictions, ground_truth, scenario: ScenarioConfig) -> MetricsReport:
    """Score predicted class grids against target ground truth.

    ``predictions`` hold values 1..C_s+1 (C_s+1 = unknown); ``ground_truth``
    holds model-space target ids, whose target-private values are mapped to
    the unknown row here. Aggregation is a single confusion matrix over the
    whole set, so image order is irrelevant.
    """
    preds = [np.asarray(getattr(p, "classes", p)) for p in predictions]
    gts = [np.asarray(g) for g in ground_truth]
    if len(preds) == 0 or len(preds) != len(gts):
        raise ValueError("need equally many (and at least one) predictions and labels")

    n_common = scenario.num_common
    n_src = scenario.num_source_classes
    unknown_col = n_src + 1
    rows, cols = n_common + 1, n_src + 1
    private_ids = set(
        scenario.model_id(c) for c in scenario.target_private
    )

    confusion = np.zeros((rows, cols), dtype=np.int64)
    for pred, gt in zip(preds, gts):
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} vs ground truth {gt.shape}")
        if pred.min() < 1 or pred.max() > unknown_col:
            raise ValueError(f"predictions must lie in 1..{unknown_col}")
        gt_row = _gt_rows(gt, n_common, private_ids)
        flat = (gt_row - 1) * cols + (pred.ravel() - 1)
        confusion += np.bincount(flat, minlength=rows * cols).reshape(rows, cols)

    per_class = {}
    defined = []
    for c in range(1, n_common + 1):
        tp = confusion[c - 1, c - 1]
        fp = confusion[:, c - 1].sum() - tp
        fn = confusion[c - 1, :].sum() - tp
        denom = tp + fp + fn
        iou = float("nan") if denom == 0 else tp / denom
        per_class[c] = float(iou)
        if denom > 0:
            defined.append(iou)
    common_miou = float(np.mean(defined)) if defined else 0.0

    tp = confusion[rows - 1, cols - 1]
    fp = confusion[: rows - 1, cols - 1].sum()
    fn = confusion[rows - 1, : cols - 1].sum()
    denom = tp + fp + fn
    private_iou = 0.0 if denom == 0 else float(tp / denom)

    return MetricsReport(
        per_class_iou=per_class,
        common_miou=common_miou,
        private_iou=private_iou,
        h_score=h_score(common_miou, private_iou),
        confusion=confusion,
    )


def _gt_rows(gt: np.ndarray, n_common: int, private_ids: set[int]) -> np.ndarray:
    flat = gt.ravel()
    rows = np.where(flat <= n_common, flat, n_common + 1)
    bad = ~(np.isin(flat, sorted(private_ids)) | (flat <= n_common)) | (flat < 1)
    if np.any(bad):
        raise ValueError(
            "target ground truth contains classes outside common + target-private"
        )
    return rows


def format_report_table(report: MetricsReport, scenario: ScenarioConfig) -> str:
    """Aligned text table: one column per common class, then the aggregates."""
    headers = [f"c{cid}" for cid in scenario.common_classes]
    values = []
    for c in range(1, scenario.num_common + 1):
        iou = report.per_class_iou[c]
        values.append(" n/a" if math.isnan(iou) else f"{100 * iou:.2f}")
    headers += ["Common", "Private", "H-score"]
    values += [
        f"{100 * report.common_miou:.2f}",
        f"{100 * report.private_iou:.2f}",
        f"{100 * report.h_score:.2f}",
    ]
    widths = [max(len(h), len(v)) for h, v in zip(headers, values)]
    head = "  ".join(h.rjust(w) for h, w in zip(headers, widths))
    body = "  ".join(v.rjust(w) for v, w in zip(values, widths))
    return head + "\n" + body
