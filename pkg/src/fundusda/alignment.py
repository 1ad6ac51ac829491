"""Prediction-map alignment: entropy maps, patch discriminators, adversarial losses.

Two structurally identical discriminators with unshared weights judge where
a prediction came from: the region discriminator sees the entropy map of the
region prediction, the edge discriminator sees the raw edge map. Source
patches carry label 1, target patches label 0. The network side is trained
to make target predictions look source-like.
"""

from contextlib import contextmanager

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ContractError

ENTROPY_EPS = 1e-7
MIN_INPUT_SIZE = 32
SOURCE_LABEL, TARGET_LABEL = 1.0, 0.0


def entropy_map(region_map):
    """Per-pixel, per-channel -y*log(y) with natural log; input clamped first."""
    y = region_map.clamp(ENTROPY_EPS, 1.0 - ENTROPY_EPS)
    return -y * torch.log(y)


class PatchDiscriminator(nn.Module):
    """Five 4x4 stride-2 convs; LeakyReLU(0.2) after all but the last.

    Emits a grid of real/fake logits, one per receptive-field patch
    (spatial size = input size / 32).
    """

    def __init__(self, in_channels, widths=(64, 128, 256, 512)):
        super().__init__()
        layers = []
        channels = in_channels
        for width in widths:
            layers += [nn.Conv2d(channels, width, 4, stride=2, padding=1),
                       nn.LeakyReLU(0.2, inplace=True)]
            channels = width
        layers.append(nn.Conv2d(channels, 1, 4, stride=2, padding=1))
        self.layers = nn.Sequential(*layers)
        self.in_channels = in_channels

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ContractError(
                f"discriminator expects {self.in_channels} input channels, got {x.shape[1]}"
            )
        if min(x.shape[2], x.shape[3]) < MIN_INPUT_SIZE:
            raise ContractError(
                f"discriminator input {tuple(x.shape[2:])} is smaller than "
                f"{MIN_INPUT_SIZE} px"
            )
        return self.layers(x)


def _patch_bce(logits, label):
    target = torch.full_like(logits, label)
    return F.binary_cross_entropy_with_logits(logits, target)


def discriminator_loss_region(disc, region_s, region_t):
    """Train the region discriminator on detached entropy maps of both domains."""
    loss_s = _patch_bce(disc(entropy_map(region_s.detach())), SOURCE_LABEL)
    loss_t = _patch_bce(disc(entropy_map(region_t.detach())), TARGET_LABEL)
    return loss_s + loss_t


def adversarial_loss_region(region_t, disc):
    """Push target entropy maps toward the source label; flows into the network."""
    return _patch_bce(disc(entropy_map(region_t)), SOURCE_LABEL)


def discriminator_loss_edge(disc, edge_s, edge_t):
    """Edge discriminator loss on detached raw edge maps (no entropy transform)."""
    loss_s = _patch_bce(disc(edge_s.detach()), SOURCE_LABEL)
    loss_t = _patch_bce(disc(edge_t.detach()), TARGET_LABEL)
    return loss_s + loss_t


def adversarial_loss_edge(edge_t, disc):
    return _patch_bce(disc(edge_t), SOURCE_LABEL)


@contextmanager
def frozen_params(module):
    """Temporarily stop gradient accumulation into a module's parameters."""
    states = [(p, p.requires_grad) for p in module.parameters()]
    for p, _ in states:
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, was in states:
            p.requires_grad_(was)
