"""Reconstruction branch: VAE over the encoder features plus style consistency.

The VAE reconstructs the input image from a latent code inferred from the
pooled low-level and high-level features; reconstructions from both domains
are pushed toward a shared style via Gram matrices of a frozen feature
extractor. At inference only the encoder half is used (it supplies the
latent mean to the refinement module).
"""

import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import HIGH_CHANNELS, LOW_CHANNELS, ContractError

REDUCED_CHANNELS = 16
LOG_VAR_CLAMP = 10.0

# channel statistics used by common pretrained prefixes
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

STYLE_INIT_SEED = 7250913  # frozen-random fallback is identical across runs


@dataclass
class LatentCode:
    mu: torch.Tensor
    log_var: torch.Tensor
    eps: torch.Tensor = None
    z: torch.Tensor = None

    @property
    def dim(self):
        return self.mu.shape[-1]


class VaeEncoder(nn.Module):
    """(F_l, F_h) -> (mu, log sigma^2), each of latent_dim components.

    F_l is average-pooled to stride 16, concatenated with F_h, reduced to 16
    channels by a 1x1 conv with instance normalization, flattened, and mapped
    by one fully-connected layer to 2*latent_dim values.
    """

    def __init__(self, image_size, latent_dim=128):
        super().__init__()
        if image_size % 16 != 0:
            raise ContractError(f"image size {image_size} is not divisible by 16")
        self.latent_dim = latent_dim
        self.grid = image_size // 16
        self.reduce = nn.Conv2d(LOW_CHANNELS + HIGH_CHANNELS, REDUCED_CHANNELS, 1)
        self.norm = nn.InstanceNorm2d(REDUCED_CHANNELS, affine=True)
        self.head = nn.Linear(REDUCED_CHANNELS * self.grid * self.grid, 2 * latent_dim)

    def forward(self, f_l, f_h):
        if f_l.shape[1] != LOW_CHANNELS:
            raise ContractError(f"expected {LOW_CHANNELS}-channel low-level features")
        if f_h.shape[1] != HIGH_CHANNELS:
            raise ContractError(f"expected {HIGH_CHANNELS}-channel high-level features")
        pooled = F.avg_pool2d(f_l, kernel_size=4)
        if pooled.shape[2:] != f_h.shape[2:]:
            raise ContractError(
                f"pooled low-level {tuple(pooled.shape[2:])} and high-level "
                f"{tuple(f_h.shape[2:])} grids disagree"
            )
        h = self.norm(self.reduce(torch.cat([pooled, f_h], dim=1)))
        flat = h.flatten(1)
        if flat.shape[1] != self.head.in_features:
            raise ContractError(
                f"flattened feature length {flat.shape[1]} does not match the "
                f"configured image size (expected {self.head.in_features})"
            )
        out = self.head(flat)
        mu, log_var = out.chunk(2, dim=1)
        log_var = log_var.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)
        return LatentCode(mu=mu, log_var=log_var)


def reparameterize(code, generator=None, eps=None):
    """Draw z = mu + sigma * eps with eps ~ N(0, 1); eps is kept on the code."""
    if eps is None:
        eps = torch.randn(code.mu.shape, generator=generator, dtype=code.mu.dtype,
                          device=code.mu.device)
    code.eps = eps
    code.z = code.mu + torch.exp(0.5 * code.log_var) * eps
    return code.z


class VaeDecoder(nn.Module):
    """z -> reconstructed image via four upsample-conv blocks and a final conv."""

    def __init__(self, image_size, latent_dim=128, plan=(64, 32, 16, 8)):
        super().__init__()
        if image_size % 16 != 0:
            raise ContractError(f"image size {image_size} is not divisible by 16")
        self.grid = image_size // 16
        self.image_size = image_size
        self.fc = nn.Linear(latent_dim, REDUCED_CHANNELS * self.grid * self.grid)
        blocks = []
        channels = REDUCED_CHANNELS
        for width in plan:
            blocks.append(nn.ModuleDict({
                "conv": nn.Conv2d(channels, width, 3, padding=1),
                "norm": nn.InstanceNorm2d(width, affine=True),
            }))
            channels = width
        self.blocks = nn.ModuleList(blocks)
        self.final = nn.Conv2d(channels, 3, 3, padding=1)

    def forward(self, z):
        h = F.relu(self.fc(z))
        h = h.view(-1, REDUCED_CHANNELS, self.grid, self.grid)
        for block in self.blocks:
            h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = F.relu(block["norm"](block["conv"](h)))
        return torch.sigmoid(self.final(h))


def kl_loss(code):
    """Mean-absolute form of the standard-normal KL penalty, averaged over batch."""
    var = torch.exp(code.log_var)
    per_sample = (code.mu.pow(2) + var - code.log_var - 1.0).abs().sum(dim=1) / code.dim
    return per_sample.mean()


def reconstruction_mse(recon, x):
    """Per-pixel squared error summed over channels, averaged over pixels and batch."""
    if recon.shape != x.shape:
        raise ContractError(
            f"reconstruction {tuple(recon.shape)} and image {tuple(x.shape)} differ"
        )
    return (recon - x).pow(2).sum(dim=1).mean(dim=(1, 2)).mean()


def recon_loss(recon, x, code):
    """Reconstruction objective: KL penalty plus mean squared error."""
    return kl_loss(code) + reconstruction_mse(recon, x)


class StyleEncoder(nn.Module):
    """Frozen 4-conv prefix (VGG19-shaped at faithful widths) for style features.

    Without a weight file the prefix is randomly initialized from a fixed
    seed and frozen; this degrades the style signal but keeps every run
    hermetic and reproducible.
    """

    def __init__(self, widths=(64, 64, 128, 128), weights_path=""):
        super().__init__()
        w1, w2, w3, w4 = widths
        with torch.random.fork_rng():
            torch.manual_seed(STYLE_INIT_SEED)
            self.conv1_1 = nn.Conv2d(3, w1, 3, padding=1)
            self.conv1_2 = nn.Conv2d(w1, w2, 3, padding=1)
            self.conv2_1 = nn.Conv2d(w2, w3, 3, padding=1)
            self.conv2_2 = nn.Conv2d(w3, w4, 3, padding=1)
        self.out_channels = w4
        if weights_path:
            self._load_weights(weights_path)
        else:
            warnings.warn(
                "style encoder running with frozen random weights "
                "(set style_weights to a VGG19 state-dict file)",
                stacklevel=2,
            )
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)

    def _load_weights(self, path):
        state = torch.load(path, map_location="cpu", weights_only=True)
        if any(k.startswith("features.") for k in state):  # full VGG19 checkpoint
            state = {
                "conv1_1.weight": state["features.0.weight"],
                "conv1_1.bias": state["features.0.bias"],
                "conv1_2.weight": state["features.2.weight"],
                "conv1_2.bias": state["features.2.bias"],
                "conv2_1.weight": state["features.5.weight"],
                "conv2_1.bias": state["features.5.bias"],
                "conv2_2.weight": state["features.7.weight"],
                "conv2_2.bias": state["features.7.bias"],
            }
        try:
            self.load_state_dict(state)
        except RuntimeError as exc:
            raise ValueError(f"style weights {path} do not fit the configured widths: {exc}")

    def forward(self, image):
        h = (image - self.mean) / self.std
        h = F.relu(self.conv1_1(h))
        h = F.relu(self.conv1_2(h))
        h = F.max_pool2d(h, 2)
        h = F.relu(self.conv2_1(h))
        h = F.relu(self.conv2_2(h))
        return h


@dataclass
class StyleGram:
    g: torch.Tensor       # C×C (or B×C×C before batch reduction)
    m_feat: int           # pixel count of the style feature map

    @property
    def channels(self):
        return self.g.shape[-1]


def gram(features):
    """Channel co-occurrence matrix: G[j,k] = <vec(F_j), vec(F_k)>, per sample."""
    b, c, h, w = features.shape
    flat = features.reshape(b, c, h * w)
    return StyleGram(g=torch.bmm(flat, flat.transpose(1, 2)), m_feat=h * w)


def style_loss(gram_a, gram_b):
    """Squared Gram distance with the 1 / (4 C^2 M^2) normalization."""
    if gram_a.g.shape != gram_b.g.shape or gram_a.m_feat != gram_b.m_feat:
        raise ContractError("style grams must share channel count and pixel count")
    c = gram_a.channels
    m = gram_a.m_feat
    diff = (gram_a.g - gram_b.g).pow(2).sum()
    return diff / (4.0 * c * c * m * m)


def style_consistency(features_a, features_b):
    """Style loss between batch-mean Grams of two reconstruction sets."""
    ga, gb = gram(features_a), gram(features_b)
    return style_loss(
        StyleGram(g=ga.g.mean(dim=0), m_feat=ga.m_feat),
        StyleGram(g=gb.g.mean(dim=0), m_feat=gb.m_feat),
    )


class ReconstructionBranch(nn.Module):
    """VAE encoder/decoder pair plus the frozen style encoder."""

    def __init__(self, image_size, latent_dim=128, plan=(64, 32, 16, 8),
                 style_widths=(64, 64, 128, 128), style_weights=""):
        super().__init__()
        self.vae_encoder = VaeEncoder(image_size, latent_dim)
        self.vae_decoder = VaeDecoder(image_size, latent_dim, plan=plan)
        self.style_encoder = StyleEncoder(style_widths, weights_path=style_weights)

    def encode(self, f_l, f_h):
        return self.vae_encoder(f_l, f_h)

    def decode(self, z):
        return self.vae_decoder(z)

    def style_features(self, recon):
        return self.style_encoder(recon)
