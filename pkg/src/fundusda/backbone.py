"""Segmentation backbone: shared encoder plus edge and region decoders.

Channel/stride contracts (any input with H, W divisible by 16):
    low-level features   F_l: stride 4,  24 channels
    high-level features  F_h: stride 16, 320 channels
    fused features       F_s: stride 4,  344 channels (upsampled F_h ++ F_r)
Predictions are produced at stride 4 and bilinearly upsampled to input size.

Two encoder variants share these contracts: `faithful` is a MobileNetV2
trunk (output stride 16 via dilation) with a separable ASPP head, suitable
for loading pretrained weights; `toy` is a small strided trunk so the whole
test suite runs quickly on CPU without any downloads.
"""

import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models import mobilenet_v2

LOW_CHANNELS = 24
HIGH_CHANNELS = 320
FUSED_CHANNELS = LOW_CHANNELS + HIGH_CHANNELS  # 344
REGION_CLASSES = 2  # disc, cup


class ContractError(ValueError):
    """A tensor violated one of the architecture's shape contracts."""


@dataclass(frozen=True)
class ArchProfile:
    """Width plan per encoder variant. Shape contracts are identical."""

    decoder_width: int
    style_widths: tuple
    disc_widths: tuple
    vae_plan: tuple

    @staticmethod
    def for_variant(variant):
        if variant == "faithful":
            return ArchProfile(
                decoder_width=256,
                style_widths=(64, 64, 128, 128),
                disc_widths=(64, 128, 256, 512),
                vae_plan=(64, 32, 16, 8),
            )
        if variant == "toy":
            return ArchProfile(
                decoder_width=48,
                style_widths=(8, 8, 16, 16),
                disc_widths=(16, 32, 64, 128),
                vae_plan=(24, 16, 12, 8),
            )
        raise ValueError(f"unknown encoder variant '{variant}'")


@dataclass
class FeatureBundle:
    f_l: torch.Tensor
    f_h: torch.Tensor
    f_r: torch.Tensor = None
    f_s: torch.Tensor = None


@dataclass
class PredictionPair:
    edge: torch.Tensor          # B×1×H×W, values in (0,1)
    region: torch.Tensor        # B×2×H×W, values in (0,1)
    edge_s4: torch.Tensor = None
    region_s4: torch.Tensor = None
    entropy: torch.Tensor = None


def _check_input(x):
    if x.dim() != 4 or x.shape[1] != 3:
        raise ContractError(f"expected a B×3×H×W image tensor, got {tuple(x.shape)}")
    if x.shape[2] % 16 != 0:
        raise ContractError(f"input height {x.shape[2]} is not divisible by 16")
    if x.shape[3] % 16 != 0:
        raise ContractError(f"input width {x.shape[3]} is not divisible by 16")


class ToyEncoder(nn.Module):
    """Small strided-conv trunk with the same output contracts as the faithful one."""

    def __init__(self):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.BatchNorm2d(16), nn.ReLU(inplace=True),
        )
        self.low = nn.Sequential(
            nn.Conv2d(16, LOW_CHANNELS, 3, stride=2, padding=1),
            nn.BatchNorm2d(LOW_CHANNELS), nn.ReLU(inplace=True),
        )
        self.mid = nn.Sequential(
            nn.Conv2d(LOW_CHANNELS, 48, 3, stride=2, padding=1),
            nn.BatchNorm2d(48), nn.ReLU(inplace=True),
            nn.Conv2d(48, 96, 3, stride=2, padding=1),
            nn.BatchNorm2d(96), nn.ReLU(inplace=True),
        )
        self.head = nn.Sequential(
            nn.Conv2d(96, HIGH_CHANNELS, 1),
            nn.BatchNorm2d(HIGH_CHANNELS), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        f_l = self.low(self.stem(x))
        f_h = self.head(self.mid(f_l))
        return f_l, f_h


class SeparableAsppBranch(nn.Module):
    def __init__(self, channels, dilation):
        super().__init__()
        self.depthwise = nn.Conv2d(channels, channels, 3, padding=dilation,
                                   dilation=dilation, groups=channels, bias=False)
        self.pointwise = nn.Conv2d(channels, channels, 1, bias=False)
        self.bn = nn.BatchNorm2d(channels)

    def forward(self, x):
        return F.relu(self.bn(self.pointwise(self.depthwise(x))), inplace=True)


class Aspp(nn.Module):
    """Atrous spatial pyramid pooling with separable branches, 320 in / 320 out."""

    def __init__(self, channels=HIGH_CHANNELS, rates=(6, 12, 18)):
        super().__init__()
        self.conv1x1 = nn.Sequential(
            nn.Conv2d(channels, channels, 1, bias=False),
            nn.BatchNorm2d(channels), nn.ReLU(inplace=True),
        )
        self.branches = nn.ModuleList(SeparableAsppBranch(channels, r) for r in rates)
        # no norm here: the pooled map is 1x1, which BatchNorm cannot handle
        self.pool = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(channels, channels, 1),
            nn.ReLU(inplace=True),
        )
        self.project = nn.Sequential(
            nn.Conv2d(channels * (len(rates) + 2), channels, 1, bias=False),
            nn.BatchNorm2d(channels), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        feats = [self.conv1x1(x)]
        feats += [branch(x) for branch in self.branches]
        pooled = self.pool(x)
        feats.append(pooled.expand(-1, -1, x.shape[2], x.shape[3]))
        return self.project(torch.cat(feats, dim=1))


class FaithfulEncoder(nn.Module):
    """MobileNetV2 trunk at output stride 16 (last stage dilated) + ASPP head.

    F_l taps the second bottleneck stage (24 channels, stride 4); the ASPP
    output over the 320-channel final stage is the encoder output F_h.
    """

    def __init__(self, weights_path=""):
        super().__init__()
        trunk = mobilenet_v2(weights=None).features[:18]
        self._dilate_last_stage(trunk)
        self.low_stages = trunk[:4]      # conv stem + bottlenecks up to 24ch/stride4
        self.high_stages = trunk[4:]     # remaining bottlenecks up to 320ch/stride16
        self.aspp = Aspp()
        if weights_path:
            self._load_trunk_weights(weights_path)
        else:
            warnings.warn(
                "faithful encoder built without pretrained weights "
                "(set encoder_weights to a MobileNetV2 state-dict file)",
                stacklevel=2,
            )

    @staticmethod
    def _dilate_last_stage(trunk):
        # blocks 14..17 originally run at stride 32; keep them at stride 16
        for idx in range(14, 18):
            for mod in trunk[idx].modules():
                if isinstance(mod, nn.Conv2d) and mod.kernel_size == (3, 3):
                    if mod.stride == (2, 2):
                        mod.stride = (1, 1)
                    mod.dilation = (2, 2)
                    mod.padding = (2, 2)

    def _load_trunk_weights(self, path):
        state = torch.load(path, map_location="cpu", weights_only=True)
        if any(k.startswith("features.") for k in state):
            state = {k[len("features."):]: v for k, v in state.items()
                     if k.startswith("features.")}
        trunk_state = {}
        for key, value in state.items():
            idx = int(key.split(".", 1)[0])
            if idx < 4:
                trunk_state[f"low_stages.{key}"] = value
            elif idx < 18:
                rest = key.split(".", 1)[1]
                trunk_state[f"high_stages.{idx - 4}.{rest}"] = value
        missing, unexpected = self.load_state_dict(trunk_state, strict=False)
        missing_trunk = [k for k in missing if not k.startswith("aspp.")]
        if missing_trunk or unexpected:
            raise ValueError(
                f"encoder weights {path} do not match the MobileNetV2 trunk "
                f"(missing {missing_trunk[:3]}..., unexpected {unexpected[:3]}...)"
            )

    def forward(self, x):
        f_l = self.low_stages(x)
        f_h = self.aspp(self.high_stages(f_l))
        return f_l, f_h


class EdgeDecoder(nn.Module):
    """Three convs (width, width, 1); the first two carry BN+ReLU, the last a sigmoid."""

    def __init__(self, width=256):
        super().__init__()
        self.conv1 = nn.Conv2d(FUSED_CHANNELS, width, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, 1, 3, padding=1)

    def forward(self, f_s):
        if f_s.shape[1] != FUSED_CHANNELS:
            raise ContractError(
                f"edge decoder expects {FUSED_CHANNELS} input channels, got {f_s.shape[1]}"
            )
        h = F.relu(self.bn1(self.conv1(f_s)), inplace=True)
        h = F.relu(self.bn2(self.conv2(h)), inplace=True)
        return torch.sigmoid(self.conv3(h))


class RegionDecoder(nn.Module):
    """Single conv over (F_s ++ edge map) with per-channel sigmoids (disc, cup)."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(FUSED_CHANNELS + 1, REGION_CLASSES, 3, padding=1)

    def forward(self, f_s, edge_s4):
        if f_s.shape[1] != FUSED_CHANNELS or edge_s4.shape[1] != 1:
            raise ContractError(
                f"region decoder expects {FUSED_CHANNELS}+1 channels, got "
                f"{f_s.shape[1]}+{edge_s4.shape[1]}"
            )
        if f_s.shape[2:] != edge_s4.shape[2:]:
            raise ContractError(
                f"fused features {tuple(f_s.shape[2:])} and edge map "
                f"{tuple(edge_s4.shape[2:])} must share spatial dims"
            )
        return torch.sigmoid(self.conv(torch.cat([f_s, edge_s4], dim=1)))


def upsample_to(x, size):
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class SegmentationBackbone(nn.Module):
    def __init__(self, variant="faithful", encoder_weights=""):
        super().__init__()
        profile = ArchProfile.for_variant(variant)
        if variant == "faithful":
            self.encoder = FaithfulEncoder(weights_path=encoder_weights)
        else:
            self.encoder = ToyEncoder()
        self.edge_decoder = EdgeDecoder(width=profile.decoder_width)
        self.region_decoder = RegionDecoder()
        self.profile = profile
        self.variant = variant

    def encode(self, x):
        _check_input(x)
        f_l, f_h = self.encoder(x)
        if f_l.shape[1] != LOW_CHANNELS:
            raise ContractError(f"low-level features must have {LOW_CHANNELS} channels")
        if f_h.shape[1] != HIGH_CHANNELS:
            raise ContractError(f"high-level features must have {HIGH_CHANNELS} channels")
        return FeatureBundle(f_l=f_l, f_h=f_h)

    def fuse(self, bundle):
        f_r = bundle.f_r if bundle.f_r is not None else bundle.f_l
        high_up = upsample_to(bundle.f_h, f_r.shape[2:])
        bundle.f_s = torch.cat([high_up, f_r], dim=1)
        return bundle.f_s

    def decode(self, bundle, out_size):
        """Fuse features, run both decoders, upsample the maps to out_size."""
        f_s = self.fuse(bundle)
        edge_s4 = self.edge_decoder(f_s)
        region_s4 = self.region_decoder(f_s, edge_s4)
        return PredictionPair(
            edge=upsample_to(edge_s4, out_size),
            region=upsample_to(region_s4, out_size),
            edge_s4=edge_s4,
            region_s4=region_s4,
        )

    def forward(self, x, refine=None):
        """Full pass: encode, optionally refine F_l, fuse, decode, upsample.

        `refine` maps (f_l, f_h) to the refined features F_r; when absent the
        low-level features pass through unchanged.
        """
        bundle = self.encode(x)
        bundle.f_r = refine(bundle.f_l, bundle.f_h) if refine is not None else bundle.f_l
        return bundle, self.decode(bundle, x.shape[2:])
