"""Full model assembly: backbone plus the optional adaptation modules.

The trainable system has two sides with separate optimizers: the
segmentation network (backbone, reconstruction branch, refiner) and the two
patch discriminators. Only enabled modules are constructed, so a disabled
module contributes neither parameters nor graph edges.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from .alignment import PatchDiscriminator
from .backbone import ArchProfile, SegmentationBackbone
from .reconstruction import ReconstructionBranch, reparameterize
from .refinement import Refiner


@dataclass
class ForwardOut:
    bundle: object
    preds: object
    code: object = None
    recon: object = None


class SegmentationNetwork(nn.Module):
    """Backbone with optional reconstruction and refinement branches."""

    def __init__(self, cfg):
        super().__init__()
        profile = ArchProfile.for_variant(cfg.encoder_variant)
        self.backbone = SegmentationBackbone(
            variant=cfg.encoder_variant, encoder_weights=cfg.encoder_weights,
        )
        self.recon = None
        if cfg.modules.reconstruction:
            self.recon = ReconstructionBranch(
                cfg.image_size, cfg.latent_dim,
                plan=profile.vae_plan,
                style_widths=profile.style_widths,
                style_weights=cfg.style_weights,
            )
        self.refiner = Refiner(cfg.latent_dim) if cfg.modules.refinement else None
        self.profile = profile

    def forward_pass(self, x, sample_latent=False, want_recon=False, eps_generator=None):
        """Encode, infer the latent code, refine, decode.

        Training passes sample z via the reparameterization trick; evaluation
        uses the posterior mean. The reconstruction is produced only when
        requested (it is dead weight at inference).
        """
        bundle = self.backbone.encode(x)
        code = None
        recon = None
        z = None
        if self.recon is not None:
            code = self.recon.encode(bundle.f_l, bundle.f_h)
            if sample_latent:
                z = reparameterize(code, generator=eps_generator)
            else:
                z = code.z = code.mu
            if want_recon:
                recon = self.recon.decode(z)
        if self.refiner is not None:
            bundle.f_r = self.refiner(bundle.f_l, bundle.f_h, z)
        else:
            bundle.f_r = bundle.f_l
        preds = self.backbone.decode(bundle, x.shape[2:])
        return ForwardOut(bundle=bundle, preds=preds, code=code, recon=recon)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


@dataclass
class TrainingSystem:
    network: SegmentationNetwork
    disc_region: PatchDiscriminator = None
    disc_edge: PatchDiscriminator = None

    def modules_dict(self):
        out = {"network": self.network}
        if self.disc_region is not None:
            out["disc_region"] = self.disc_region
        if self.disc_edge is not None:
            out["disc_edge"] = self.disc_edge
        return out

    def train(self):
        for m in self.modules_dict().values():
            m.train()

    def eval(self):
        for m in self.modules_dict().values():
            m.eval()


def build_system(cfg):
    """Construct the network and (when alignment is on) both discriminators.

    Call under a seeded torch RNG for reproducible initialization.
    """
    network = SegmentationNetwork(cfg)
    disc_region = disc_edge = None
    if cfg.modules.alignment:
        profile = network.profile
        disc_region = PatchDiscriminator(2, widths=profile.disc_widths)
        disc_edge = PatchDiscriminator(1, widths=profile.disc_widths)
    return TrainingSystem(network=network, disc_region=disc_region, disc_edge=disc_edge)


def _count(module):
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters())


def parameter_counts(system):
    """Per-module parameter counts plus the reported totals.

    `total` covers the segmentation model as shipped (backbone, reconstruction
    branch including the frozen style encoder, refiner). The discriminators
    are training-only critics and reported separately. `inference` drops the
    layers that never run at test time: the reconstruction decoder and the
    style encoder (the latent encoder stays, it feeds the refiner).
    """
    net = system.network
    counts = {
        "encoder": _count(net.backbone.encoder),
        "edge_decoder": _count(net.backbone.edge_decoder),
        "region_decoder": _count(net.backbone.region_decoder),
        "latent_encoder": _count(net.recon.vae_encoder) if net.recon else 0,
        "reconstruction_decoder": _count(net.recon.vae_decoder) if net.recon else 0,
        "style_encoder": _count(net.recon.style_encoder) if net.recon else 0,
        "refinement": _count(net.refiner),
        "discriminator_region": _count(system.disc_region),
        "discriminator_edge": _count(system.disc_edge),
    }
    counts["total"] = (
        counts["encoder"] + counts["edge_decoder"] + counts["region_decoder"]
        + counts["latent_encoder"] + counts["reconstruction_decoder"]
        + counts["style_encoder"] + counts["refinement"]
    )
    counts["inference"] = (
        counts["total"] - counts["reconstruction_decoder"] - counts["style_encoder"]
    )
    return counts
