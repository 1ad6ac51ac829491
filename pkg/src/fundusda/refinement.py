"""Low-level feature refinement with input-conditioned 1x1 convolutions.

A generator network turns (pooled high-level features, processed latent
code) into the 768 parameters of three per-sample 1x1 conv layers
(24->12->12->24, weights then bias per layer), which are applied to the
low-level features with ReLUs in between. Each batch element gets its own
parameters.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import HIGH_CHANNELS, LOW_CHANNELS, ContractError

MID_CHANNELS = 12
LATENT_FEATURES = 64
CONDITION_DIM = HIGH_CHANNELS + LATENT_FEATURES  # 384

# (out_channels, in_channels) per dynamic layer; layout is weights then bias,
# layers in application order. Frozen: serialized into checkpoints.
DYNAMIC_LAYER_SHAPES = (
    (MID_CHANNELS, LOW_CHANNELS),    # 288 weights + 12 bias = 300
    (MID_CHANNELS, MID_CHANNELS),    # 144 weights + 12 bias = 156
    (LOW_CHANNELS, MID_CHANNELS),    # 288 weights + 24 bias = 312
)
DYNAMIC_PARAM_SIZES = tuple(o * i + o for o, i in DYNAMIC_LAYER_SHAPES)  # (300, 156, 312)
DYNAMIC_PARAM_TOTAL = sum(DYNAMIC_PARAM_SIZES)  # 768


def split_dynamic_params(theta):
    """Slice a (B, 768) parameter vector into [(weight B×out×in, bias B×out), ...]."""
    if theta.shape[-1] != DYNAMIC_PARAM_TOTAL:
        raise ContractError(
            f"dynamic parameter vector must have {DYNAMIC_PARAM_TOTAL} entries, "
            f"got {theta.shape[-1]}"
        )
    layers = []
    offset = 0
    for out_ch, in_ch in DYNAMIC_LAYER_SHAPES:
        n_w = out_ch * in_ch
        weight = theta[:, offset:offset + n_w].reshape(-1, out_ch, in_ch)
        bias = theta[:, offset + n_w:offset + n_w + out_ch]
        layers.append((weight, bias))
        offset += n_w + out_ch
    return layers


def apply_dyconv(f_l, theta):
    """Run the three per-sample 1x1 dynamic convolutions with ReLU activations."""
    if f_l.shape[1] != LOW_CHANNELS:
        raise ContractError(f"expected {LOW_CHANNELS}-channel input, got {f_l.shape[1]}")
    if theta.shape[0] != f_l.shape[0]:
        raise ContractError(
            f"parameter batch {theta.shape[0]} does not match feature batch {f_l.shape[0]}"
        )
    h = f_l
    for weight, bias in split_dynamic_params(theta):
        h = torch.einsum("boi,bihw->bohw", weight, h) + bias[:, :, None, None]
        h = F.relu(h)
    return h


class ConditionNetwork(nn.Module):
    """Builds the 384-d conditioning vector from GAP(F_h) and the latent code.

    The latent code enters through a three-layer MLP (128, 64, 64 units,
    GELU after the first two) and is detached first: refinement gradients
    must not reach the VAE encoder. Without a code (reconstruction branch
    ablated) the latent slot is zero-padded.
    """

    def __init__(self, latent_dim=128):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(latent_dim, 128), nn.GELU(),
            nn.Linear(128, 64), nn.GELU(),
            nn.Linear(64, LATENT_FEATURES),
        )

    def forward(self, f_h, z=None):
        if f_h.shape[1] != HIGH_CHANNELS:
            raise ContractError(f"expected {HIGH_CHANNELS}-channel features, got {f_h.shape[1]}")
        pooled = f_h.mean(dim=(2, 3))
        if z is None:
            latent = pooled.new_zeros(pooled.shape[0], LATENT_FEATURES)
        else:
            latent = self.mlp(z.detach())
        return torch.cat([pooled, latent], dim=1)


class ParamGenerator(nn.Module):
    """Single linear map (a 1x1 conv on a 1x1 grid) from condition to parameters."""

    def __init__(self):
        super().__init__()
        self.proj = nn.Linear(CONDITION_DIM, DYNAMIC_PARAM_TOTAL)

    def forward(self, cond):
        if cond.shape[-1] != CONDITION_DIM:
            raise ContractError(
                f"condition vector must have {CONDITION_DIM} entries, got {cond.shape[-1]}"
            )
        return self.proj(cond)


class Refiner(nn.Module):
    """Condition network + parameter generator + dynamic conv application."""

    def __init__(self, latent_dim=128):
        super().__init__()
        self.condition = ConditionNetwork(latent_dim)
        self.generator = ParamGenerator()

    def forward(self, f_l, f_h, z=None):
        theta = self.generator(self.condition(f_h, z))
        return apply_dyconv(f_l, theta)
