"""Evaluation metrics: Dice, IoU, accuracy, cup-disc-ratio error, rank-sum test.

Per-class conventions (documented because the literature is silent):
  * both masks empty -> Dice = IoU = 1 (and accuracy 1 by agreement);
  * `iou` is the raw foreground IoU (always <= Dice);
  * `miou` averages the foreground IoU with the background-complement IoU,
    which matches how mIoU is usually tabulated per class and is the
    primary reported column.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

EXACT_RANKSUM_LIMIT = 20  # pooled size at or below which the test enumerates


@dataclass
class MetricsReport:
    dice: np.ndarray = field(default_factory=lambda: np.zeros(2))
    iou: np.ndarray = field(default_factory=lambda: np.zeros(2))
    miou: np.ndarray = field(default_factory=lambda: np.zeros(2))
    acc: np.ndarray = field(default_factory=lambda: np.zeros(2))
    delta: float = 0.0
    n_images: int = 0

    def mean_foreground_dice(self):
        return float(np.mean(self.dice))

    def to_dict(self):
        return {
            "dice_disc": float(self.dice[0]), "dice_cup": float(self.dice[1]),
            "iou_disc": float(self.iou[0]), "iou_cup": float(self.iou[1]),
            "miou_disc": float(self.miou[0]), "miou_cup": float(self.miou[1]),
            "acc_disc": float(self.acc[0]), "acc_cup": float(self.acc[1]),
            "delta": float(self.delta), "n_images": self.n_images,
        }


def binarize(region_probs, threshold=0.5):
    """Threshold the two probability channels; cup is clipped into the disc."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0,1), got {threshold}")
    probs = np.asarray(region_probs)
    if probs.ndim != 3 or probs.shape[2] != 2:
        raise ValueError(f"expected an H×W×2 probability map, got {probs.shape}")
    masks = (probs > threshold).astype(np.uint8)
    masks[..., 1] &= masks[..., 0]
    return masks


def _binary_counts(pred, gt):
    tp = int(np.sum((pred == 1) & (gt == 1)))
    fp = int(np.sum((pred == 1) & (gt == 0)))
    fn = int(np.sum((pred == 0) & (gt == 1)))
    tn = int(np.sum((pred == 0) & (gt == 0)))
    return tp, fp, fn, tn


def dice_miou_acc(pred, gt):
    """Per-class Dice / raw IoU / fg-bg-averaged mIoU / accuracy for one image."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    dice = np.zeros(2)
    iou = np.zeros(2)
    miou = np.zeros(2)
    acc = np.zeros(2)
    for c in range(2):
        tp, fp, fn, tn = _binary_counts(pred[..., c], gt[..., c])
        dice[c] = 1.0 if tp + fp + fn == 0 else 2.0 * tp / (2 * tp + fp + fn)
        iou[c] = 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)
        iou_bg = 1.0 if tn + fp + fn == 0 else tn / (tn + fp + fn)
        miou[c] = (iou[c] + iou_bg) / 2.0
        acc[c] = (tp + tn) / (tp + fp + fn + tn)
    return MetricsReport(dice=dice, iou=iou, miou=miou, acc=acc, n_images=1)


def vertical_diameter(mask):
    """Row extent of the nonzero region (0 for an empty mask)."""
    rows = np.nonzero(np.asarray(mask).any(axis=1))[0]
    if rows.size == 0:
        return 0
    return int(rows.max() - rows.min() + 1)


def cdr_delta(pred, gt):
    """Absolute error between predicted and true vertical cup/disc ratios.

    An empty predicted disc (or cup) contributes a zero predicted ratio; an
    empty ground-truth disc is an annotation error.
    """
    gt_disc = vertical_diameter(gt[..., 0])
    if gt_disc == 0:
        raise ValueError("ground-truth disc is empty; cup-disc ratio undefined")
    gt_ratio = vertical_diameter(gt[..., 1]) / gt_disc
    pred_disc = vertical_diameter(pred[..., 0])
    pred_ratio = 0.0 if pred_disc == 0 else vertical_diameter(pred[..., 1]) / pred_disc
    return abs(pred_ratio - gt_ratio)


def evaluate_masks(pred, gt):
    """Full per-image report (Dice/IoU/mIoU/Acc plus ratio error)."""
    report = dice_miou_acc(pred, gt)
    report.delta = cdr_delta(pred, gt)
    return report


def aggregate_reports(reports):
    """Image-mean of per-image reports."""
    if not reports:
        raise ValueError("cannot aggregate an empty report list")
    return MetricsReport(
        dice=np.mean([r.dice for r in reports], axis=0),
        iou=np.mean([r.iou for r in reports], axis=0),
        miou=np.mean([r.miou for r in reports], axis=0),
        acc=np.mean([r.acc for r in reports], axis=0),
        delta=float(np.mean([r.delta for r in reports])),
        n_images=len(reports),
    )


def _exact_ranksum_p(ranks, n1, t_obs):
    """Two-sided p by enumerating the rank-sum distribution (midranks doubled
    to integers, subset-sum DP over counts)."""
    ranks2 = np.rint(2.0 * np.asarray(ranks)).astype(np.int64)
    total = int(ranks2.sum())
    counts = np.zeros((n1 + 1, total + 1))
    counts[0, 0] = 1.0
    for r in ranks2:
        counts[1:, r:] += counts[:-1, :total + 1 - r].copy()
    dist = counts[n1]
    n_comb = dist.sum()
    t2 = int(np.rint(2.0 * t_obs))
    p_le = dist[:t2 + 1].sum() / n_comb
    p_ge = dist[t2:].sum() / n_comb
    return min(1.0, 2.0 * min(p_le, p_ge))


def _normal_ranksum_p(ranks, n1, t_obs):
    """Tie-corrected normal approximation with continuity correction."""
    n = len(ranks)
    n2 = n - n1
    mean = n1 * (n + 1) / 2.0
    _, tie_counts = np.unique(np.asarray(ranks), return_counts=True)
    tie_term = float(np.sum(tie_counts**3 - tie_counts))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0:
        return 1.0
    diff = t_obs - mean
    z = (abs(diff) - 0.5) / math.sqrt(var) if abs(diff) > 0.5 else 0.0
    return min(1.0, 2.0 * 0.5 * math.erfc(z / math.sqrt(2.0)))


def rank_sum_test(a, b):
    """Two-sided Wilcoxon rank-sum p-value with midrank ties.

    Exact enumeration for pooled sizes up to 20, tie-corrected normal
    approximation beyond that.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("rank-sum test needs non-empty samples on both sides")
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled, method="average")
    t_obs = float(ranks[:a.size].sum())
    if pooled.size <= EXACT_RANKSUM_LIMIT:
        return _exact_ranksum_p(ranks, a.size, t_obs)
    return _normal_ranksum_p(ranks, a.size, t_obs)
