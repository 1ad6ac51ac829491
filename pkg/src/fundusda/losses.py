"""Supervised segmentation losses and composition of the training objective."""

from dataclasses import asdict, dataclass, fields

import torch

from .backbone import ContractError

CLAMP_EPS = 1e-7
DICE_SMOOTH = 1e-7


def class_weights(y):
    """Inverse-frequency weights over the batch: w_l = 1 - sum(Y_l) / sum_all.

    Gives the smaller class (the cup) the larger weight; the two weights sum
    to one. Undefined for an all-background batch.
    """
    if y.dim() != 4 or y.shape[1] != 2:
        raise ContractError(f"labels must be B×2×H×W, got {tuple(y.shape)}")
    sums = y.sum(dim=(0, 2, 3))
    total = sums.sum()
    if total.item() == 0:
        raise ValueError("class weights are undefined for an all-background batch")
    return 1.0 - sums / total


def generalized_dice_loss(y_hat, y, weights):
    """Weighted Dice loss over the two foreground classes, batch-pooled sums.

    The smoothing term sits on the denominator only, so a perfect binary
    match scores an exact-to-float zero.
    """
    if y_hat.shape != y.shape:
        raise ContractError(f"prediction {tuple(y_hat.shape)} vs label {tuple(y.shape)}")
    inter = (y_hat * y).sum(dim=(0, 2, 3))
    totals = (y_hat + y).sum(dim=(0, 2, 3))
    num = (weights * inter).sum()
    den = (weights * totals).sum()
    return 1.0 - 2.0 * num / (den + DICE_SMOOTH)


def dice_loss(y_hat, y):
    """Unweighted per-class Dice loss, averaged over the two classes."""
    inter = (y_hat * y).sum(dim=(0, 2, 3))
    totals = (y_hat + y).sum(dim=(0, 2, 3))
    per_class = 1.0 - 2.0 * inter / (totals + DICE_SMOOTH)
    return per_class.mean()


def bce_prob(y_hat, y):
    """Binary cross-entropy on probabilities, clamped, averaged over everything."""
    p = y_hat.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def region_loss(y_hat, y, variant="gdl"):
    """Cross-entropy plus (generalized) Dice loss on the region prediction."""
    if y_hat.shape != y.shape:
        raise ContractError(f"prediction {tuple(y_hat.shape)} vs label {tuple(y.shape)}")
    ce = bce_prob(y_hat, y)
    if variant == "gdl":
        return ce + generalized_dice_loss(y_hat, y, class_weights(y))
    if variant == "dice":
        return ce + dice_loss(y_hat, y)
    raise ValueError(f"unknown region loss variant '{variant}'")


def edge_loss(b_hat, b):
    """Mean squared error over the M = H*W pixels, averaged over the batch."""
    if b_hat.dim() == 4 and b_hat.shape[1] == 1:
        b_hat = b_hat[:, 0]
    if b.dim() == 4 and b.shape[1] == 1:
        b = b[:, 0]
    if b_hat.shape != b.shape:
        raise ContractError(f"edge map {tuple(b_hat.shape)} vs target {tuple(b.shape)}")
    return (b_hat - b).pow(2).mean(dim=(1, 2)).mean()


def total_objective(l_r, l_e, l_re_s, l_re_t, l_sty, l_adv_r, l_adv_e, weights):
    """L = L_r + L_e + l1*(L_re^s + L_re^t) + l2*L_sty + l3*(L_adv_r + L_adv_e).

    Disabled modules must contribute exact zeros (plain 0.0, absent from the
    autograd graph).
    """
    return (
        l_r + l_e
        + weights.lambda1 * (l_re_s + l_re_t)
        + weights.lambda2 * l_sty
        + weights.lambda3 * (l_adv_r + l_adv_e)
    )


@dataclass
class LossReport:
    """Scalar values of every objective term for one optimization step."""

    l_r: float = 0.0
    l_e: float = 0.0
    l_re_s: float = 0.0
    l_re_t: float = 0.0
    l_sty: float = 0.0
    l_adv_r: float = 0.0
    l_adv_e: float = 0.0
    total: float = 0.0
    l_d_r: float = 0.0
    l_d_e: float = 0.0

    def to_dict(self):
        return asdict(self)

    def values(self):
        return [getattr(self, f.name) for f in fields(self)]

    def finite(self):
        return all(v == v and abs(v) != float("inf") for v in self.values())
