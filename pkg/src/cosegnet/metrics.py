"""Mask evaluation: pixel precision and Jaccard index."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass
class GroupMetrics:
    name: str
    precision: list[float]
    jaccard: list[float]

    @property
    def mean_precision(self) -> float:
        return float(np.mean(self.precision))

    @property
    def mean_jaccard(self) -> float:
        return float(np.mean(self.jaccard))


@dataclass
class MetricReport:
    groups: list[GroupMetrics] = field(default_factory=list)

    @property
    def overall_precision(self) -> float:
        return float(np.mean([g.mean_precision for g in self.groups]))

    @property
    def overall_jaccard(self) -> float:
        return float(np.mean([g.mean_jaccard for g in self.groups]))

    def table(self) -> str:
        lines = [f"{'group':<16}{'image':>6}{'precision':>12}{'jaccard':>10}"]
        for g in self.groups:
            for i, (p, j) in enumerate(zip(g.precision, g.jaccard)):
                lines.append(f"{g.name:<16}{i:>6}{p:>12.4f}{j:>10.4f}")
            lines.append(f"{g.name:<16}{'mean':>6}{g.mean_precision:>12.4f}"
                         f"{g.mean_jaccard:>10.4f}")
        lines.append(f"{'overall':<16}{'':>6}{self.overall_precision:>12.4f}"
                     f"{self.overall_jaccard:>10.4f}")
        return "\n".join(lines)


def mask_scores(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """(precision, jaccard) of one binary prediction against one binary mask.

    Precision counts correctly classified pixels of both classes; Jaccard is
    foreground intersection over union, defined as 1 when both masks are
    empty so a perfect prediction always scores 1.
    """
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask_scores: shapes differ, {pred.shape} vs {gt.shape}")
    tp = np.count_nonzero(pred & gt)
    tn = np.count_nonzero(~pred & ~gt)
    union = np.count_nonzero(pred | gt)
    precision = (tp + tn) / pred.size
    jaccard = 1.0 if union == 0 else tp / union
    return float(precision), float(jaccard)


def evaluate(pred_masks: list[np.ndarray], gt_masks: list[np.ndarray],
             name: str = "group") -> GroupMetrics:
    """Score one group of predictions; averaging is per image within the group."""
    if len(pred_masks) != len(gt_masks):
        raise ShapeError(
            f"evaluate: {len(pred_masks)} predictions vs {len(gt_masks)} masks"
        )
    precision, jaccard = [], []
    for pred, gt in zip(pred_masks, gt_masks):
        p, j = mask_scores(pred, gt)
        precision.append(p)
        jaccard.append(j)
    return GroupMetrics(name=name, precision=precision, jaccard=jaccard)
