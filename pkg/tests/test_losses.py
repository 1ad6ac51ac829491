import math

import numpy as np
import pytest
import torch

from fundusda.backbone import ContractError
from fundusda.config import LossWeights
from fundusda.losses import (LossReport, bce_prob, class_weights, dice_loss,
                             edge_loss, generalized_dice_loss, region_loss,
                             total_objective)
from gradcheck import finite_diff_check

LN2 = math.log(2.0)


def binary_labels(batch=1, size=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    disc = (torch.rand(batch, 1, size, size, generator=g) > 0.5).float()
    cup = disc * (torch.rand(batch, 1, size, size, generator=g) > 0.5).float()
    return torch.cat([disc, cup], dim=1)


# ---------------------------------------------------------------------------
# class weights


def test_equal_areas_give_half_half():
    y = torch.zeros(1, 2, 4, 4)
    y[0, 0, :2] = 1
    y[0, 1, 2:] = 1
    w = class_weights(y)
    assert torch.allclose(w, torch.tensor([0.5, 0.5]))


def test_three_to_one_ratio():
    y = torch.zeros(1, 2, 2, 2)
    y[0, 0, 0, :] = 1
    y[0, 0, 1, 0] = 1   # disc: 3 px
    y[0, 1, 0, 0] = 1   # cup: 1 px
    w = class_weights(y)
    assert torch.allclose(w, torch.tensor([0.25, 0.75]))


def test_weights_sum_to_one_fuzzed():
    for seed in range(100):
        y = binary_labels(batch=2, seed=seed)
        if y.sum() == 0:
            continue
        w = class_weights(y)
        assert w.sum().item() == pytest.approx(1.0, abs=1e-6)
        assert torch.all(w >= 0) and torch.all(w <= 1)


def test_all_background_batch_rejected():
    with pytest.raises(ValueError, match="all-background"):
        class_weights(torch.zeros(1, 2, 4, 4))


# ---------------------------------------------------------------------------
# generalized dice loss


def test_gdl_perfect_overlap_is_zero():
    y = binary_labels(seed=3)
    y[0, 0, 0, 0] = 1  # guarantee foreground
    loss = generalized_dice_loss(y, y, class_weights(y))
    assert abs(loss.item()) < 1e-6


def test_gdl_disjoint_is_one():
    y = torch.zeros(1, 2, 4, 4)
    y[0, 0, :2] = 1
    y[0, 1, 0, 0] = 1
    y_hat = torch.zeros(1, 2, 4, 4)
    y_hat[0, 0, 2:] = 1
    y_hat[0, 1, 3, 3] = 1
    loss = generalized_dice_loss(y_hat, y, class_weights(y))
    assert abs(loss.item() - 1.0) < 1e-6


def gdl_oracle(y_hat, y):
    """Scalar-loop evaluation of the weighted Dice loss."""
    y_hat = y_hat.numpy().astype(np.float64)
    y = y.numpy().astype(np.float64)
    sums = [y[:, c].sum() for c in range(2)]
    w = [1.0 - s / sum(sums) for s in sums]
    num = den = 0.0
    for c in range(2):
        inter = tot = 0.0
        for n in range(y.shape[0]):
            for i in range(y.shape[2]):
                for j in range(y.shape[3]):
                    inter += y_hat[n, c, i, j] * y[n, c, i, j]
                    tot += y_hat[n, c, i, j] + y[n, c, i, j]
        num += w[c] * inter
        den += w[c] * tot
    return 1.0 - 2.0 * num / (den + 1e-7)


def test_gdl_matches_loop_oracle():
    g = torch.Generator().manual_seed(11)
    y = torch.zeros(1, 2, 2, 2, dtype=torch.float64)
    y[0, 0, 0, :] = 1
    y[0, 1, 0, 0] = 1
    y_hat = torch.rand(1, 2, 2, 2, generator=g, dtype=torch.float64)
    got = generalized_dice_loss(y_hat, y, class_weights(y)).item()
    assert got == pytest.approx(gdl_oracle(y_hat, y), abs=1e-12)


def test_gdl_range_on_fuzzed_inputs():
    g = torch.Generator().manual_seed(12)
    for seed in range(30):
        y = binary_labels(seed=seed + 100)
        if y[:, 0].sum() == 0 or y[:, 1].sum() == 0:
            continue
        y_hat = torch.rand(y.shape, generator=g)
        loss = generalized_dice_loss(y_hat, y, class_weights(y)).item()
        assert -1e-6 <= loss <= 1.0 + 1e-6


# ---------------------------------------------------------------------------
# region / edge losses


def test_region_loss_perfect_binary():
    y = binary_labels(seed=4)
    y[0, 0, 0, 0] = 1
    assert region_loss(y.clone(), y).item() < 1e-5  # clamping residue only


def test_ce_at_half_is_ln2():
    y = binary_labels(seed=5)
    y_hat = torch.full_like(y, 0.5)
    assert bce_prob(y_hat, y).item() == pytest.approx(LN2, abs=1e-7)


def test_region_loss_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(13)
    y = torch.zeros(1, 2, 4, 4, dtype=torch.float64)
    y[0, 0, 1:3, 1:3] = 1
    y[0, 1, 2, 2] = 1
    logits = torch.randn(1, 2, 4, 4, generator=g, dtype=torch.float64,
                         requires_grad=True)

    def loss_fn():
        return region_loss(torch.sigmoid(logits), y)

    finite_diff_check(loss_fn, [logits], rtol=1e-4)


def test_plain_dice_variant():
    y = binary_labels(seed=6)
    y[0, 0, 0, 0] = 1
    assert region_loss(y.clone(), y, variant="dice").item() < 1e-5
    with pytest.raises(ValueError):
        region_loss(y, y, variant="jaccard")


def test_edge_loss_exact_values():
    b = torch.rand(2, 8, 8)
    assert edge_loss(b.clone(), b).item() == 0.0
    assert edge_loss(b + 0.1, b).item() == pytest.approx(0.01, rel=1e-5)


def edge_loss_oracle(b_hat, b):
    b_hat, b = b_hat.numpy(), b.numpy()
    total = 0.0
    for n in range(b.shape[0]):
        acc = 0.0
        for i in range(b.shape[1]):
            for j in range(b.shape[2]):
                acc += (b[n, i, j] - b_hat[n, i, j]) ** 2
        total += acc / (b.shape[1] * b.shape[2])
    return total / b.shape[0]


def test_edge_loss_matches_loop_oracle():
    g = torch.Generator().manual_seed(14)
    b = torch.rand(2, 8, 8, generator=g, dtype=torch.float64)
    b_hat = torch.rand(2, 8, 8, generator=g, dtype=torch.float64)
    assert edge_loss(b_hat, b).item() == pytest.approx(edge_loss_oracle(b_hat, b), abs=1e-12)


def test_edge_loss_accepts_channel_dim_and_rejects_mismatch():
    b = torch.rand(2, 8, 8)
    assert edge_loss(b.unsqueeze(1), b).item() == 0.0
    with pytest.raises(ContractError):
        edge_loss(torch.rand(2, 8, 8), torch.rand(2, 4, 4))


def test_edge_loss_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(15)
    b = torch.rand(1, 8, 8, generator=g, dtype=torch.float64)
    b_hat = torch.rand(1, 8, 8, generator=g, dtype=torch.float64, requires_grad=True)
    finite_diff_check(lambda: edge_loss(b_hat, b), [b_hat], rtol=1e-4)


# ---------------------------------------------------------------------------
# total objective


def test_total_with_unit_components():
    w = LossWeights()  # 0.1 / 0.001 / 0.05
    total = total_objective(1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, w)
    assert total == pytest.approx(2.301, abs=1e-12)


def test_total_baseline_reduces_to_supervised_terms():
    w = LossWeights()
    assert total_objective(0.8, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0, w) == pytest.approx(1.0)


def test_total_linear_in_lambda2():
    w1 = LossWeights(lambda2=0.001)
    w2 = LossWeights(lambda2=0.002)
    l_sty = 3.7
    t1 = total_objective(1, 1, 1, 1, l_sty, 1, 1, w1)
    t2 = total_objective(1, 1, 1, 1, l_sty, 1, 1, w2)
    assert t2 - t1 == pytest.approx(0.001 * l_sty, abs=1e-12)


def test_disabled_terms_are_structurally_absent():
    y = binary_labels(seed=7)
    y[0, 0, 0, 0] = 1
    y_hat = torch.sigmoid(torch.randn(1, 2, 8, 8, requires_grad=True))
    live = region_loss(y_hat, y)
    dead_source = torch.randn(4, requires_grad=True)
    total = total_objective(live, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, LossWeights())
    total.backward()
    assert dead_source.grad is None  # nothing couples the disabled modules in


def test_loss_report_finiteness_flag():
    r = LossReport(l_r=1.0, total=2.0)
    assert r.finite()
    assert not LossReport(l_r=float("nan")).finite()
    assert not LossReport(l_e=float("inf")).finite()
