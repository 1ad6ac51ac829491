"""Two-step adversarial training loop, checkpointing, and evaluation.

Each optimization step first updates the segmentation network on the full
objective (supervised terms on the labeled stream, reconstruction/style on
both domains, adversarial terms on the target), then updates the two
discriminators on detached predictions. The two sides own separate
optimizers and never touch each other's parameters.

All randomness is drawn from streams derived from (seed, purpose, epoch,
index), so runs are bit-reproducible on CPU and resuming from a checkpoint
replays the exact schedule.
"""

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .alignment import (adversarial_loss_edge, adversarial_loss_region,
                        discriminator_loss_edge, discriminator_loss_region,
                        frozen_params)
from .config import build_config, to_dict
from .data import augment
from .losses import LossReport, edge_loss, region_loss, total_objective
from .metrics import aggregate_reports, binarize, evaluate_masks
from .model import build_system
from .reconstruction import recon_loss, style_consistency
from .rng import RngHandle, derive_seed, seed_all

CHECKPOINT_VERSION = 1
ADAM_BETAS = (0.9, 0.999)
SGD_MOMENTUM = 0.9
DYNAMIC_PARAM_LAYOUT = {
    "sizes": [300, 156, 312],
    "order": "layers in application order; per layer row-major weights "
             "(output x input) followed by bias",
}


class TrainingAbort(RuntimeError):
    """A loss went non-finite; carries the offending step's report."""

    def __init__(self, report, epoch, step):
        super().__init__(
            f"non-finite loss at epoch {epoch} step {step}: {report.to_dict()}"
        )
        self.report = report


def lr_schedule(cfg, epoch):
    """Step-decayed network rate, constant discriminator rate."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    lr_net = cfg.lr_network * cfg.lr_network_decay ** (epoch // cfg.lr_decay_every)
    return lr_net, cfg.lr_discriminator


def to_image_tensor(sample):
    return torch.from_numpy(np.ascontiguousarray(sample.x.transpose(2, 0, 1)))


def batch_tensors(samples, device="cpu"):
    """Stack samples into (x, y, b) tensors; y/b are None for unlabeled batches."""
    x = torch.stack([to_image_tensor(s) for s in samples]).to(device)
    if all(s.labeled for s in samples):
        y = torch.stack([
            torch.from_numpy(np.ascontiguousarray(s.y.transpose(2, 0, 1))).float()
            for s in samples
        ]).to(device)
        b = torch.stack([torch.from_numpy(s.b) for s in samples]).to(device)
        return x, y, b
    return x, None, None


def hash_parameters(module):
    """Order-stable digest of all parameters and buffers (partition checks)."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _maybe_frozen(module):
    return frozen_params(module) if module is not None else _NullContext()


class _NullContext:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


def _check_finite(values, epoch, step, report):
    for v in values:
        if not math.isfinite(v):
            raise TrainingAbort(report, epoch, step)


def train_step(system, opt_net, opt_disc, batch_s, batch_t, cfg,
               eps_generator=None, epoch=0, step=0):
    """One two-step update. Returns the LossReport of the step.

    batch_s is the labeled (x, y, b) triple; batch_t is the unlabeled target
    image tensor or None when the mode/ablation never touches the target.
    """
    flags = cfg.modules
    network = system.network
    network.train()
    x_s, y_s, b_s = batch_s
    use_recon = flags.reconstruction
    use_align = flags.alignment and batch_t is not None

    # step 1: update the segmentation network, discriminators untouched
    with _maybe_frozen(system.disc_region), _maybe_frozen(system.disc_edge):
        out_s = network.forward_pass(
            x_s, sample_latent=True, want_recon=use_recon, eps_generator=eps_generator,
        )
        l_r = region_loss(out_s.preds.region, y_s, cfg.region_loss_variant)
        l_e = edge_loss(out_s.preds.edge, b_s)
        l_re_s = l_re_t = l_sty = l_adv_r = l_adv_e = 0.0
        out_t = None
        if batch_t is not None and (use_recon or use_align):
            out_t = network.forward_pass(
                batch_t, sample_latent=True, want_recon=use_recon,
                eps_generator=eps_generator,
            )
        if use_recon:
            l_re_s = recon_loss(out_s.recon, x_s, out_s.code)
            l_re_t = recon_loss(out_t.recon, batch_t, out_t.code)
            l_sty = style_consistency(
                network.recon.style_features(out_s.recon),
                network.recon.style_features(out_t.recon),
            )
        if use_align:
            l_adv_r = adversarial_loss_region(out_t.preds.region, system.disc_region)
            l_adv_e = adversarial_loss_edge(out_t.preds.edge, system.disc_edge)
        total = total_objective(l_r, l_e, l_re_s, l_re_t, l_sty, l_adv_r, l_adv_e,
                                cfg.loss_weights)

        report = LossReport(
            l_r=float(l_r), l_e=float(l_e),
            l_re_s=float(l_re_s), l_re_t=float(l_re_t), l_sty=float(l_sty),
            l_adv_r=float(l_adv_r), l_adv_e=float(l_adv_e), total=float(total),
        )
        _check_finite(report.values(), epoch, step, report)
        opt_net.zero_grad(set_to_none=True)
        total.backward()
        opt_net.step()

    # step 2: update the discriminators on detached, pre-update predictions
    if use_align:
        l_d_r = discriminator_loss_region(
            system.disc_region, out_s.preds.region, out_t.preds.region,
        )
        l_d_e = discriminator_loss_edge(
            system.disc_edge, out_s.preds.edge, out_t.preds.edge,
        )
        report.l_d_r = float(l_d_r)
        report.l_d_e = float(l_d_e)
        _check_finite(report.values(), epoch, step, report)
        opt_disc.zero_grad(set_to_none=True)
        (l_d_r + l_d_e).backward()
        opt_disc.step()

    return report


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_payload(system, opt_net, opt_disc, cfg, epoch, step_in_epoch,
                       global_step, best_dice, best_epoch):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "package_version": __version__,
        "config": to_dict(cfg),
        "dynamic_param_layout": DYNAMIC_PARAM_LAYOUT,
        "modules": {name: m.state_dict() for name, m in system.modules_dict().items()},
        "opt_net": opt_net.state_dict() if opt_net is not None else None,
        "opt_disc": opt_disc.state_dict() if opt_disc is not None else None,
        "epoch": epoch,
        "step_in_epoch": step_in_epoch,
        "global_step": global_step,
        "best_dice": best_dice,
        "best_epoch": best_epoch,
    }
    return payload


def save_checkpoint(payload, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version} in {path}")
    return payload


def system_from_checkpoint(payload):
    """Rebuild the training system (architecture + weights) from a payload."""
    import warnings
    cfg = build_config(payload["config"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # weight-fallback warnings: states follow
        system = build_system(cfg)
    for name, module in system.modules_dict().items():
        module.load_state_dict(payload["modules"][name])
    return system, cfg


# ---------------------------------------------------------------------------
# evaluation


def predict_probabilities(network, samples, batch_size=16):
    """Deterministic inference: eval mode, posterior mean, no reconstruction.

    Yields (sample, region_probs H×W×2, edge_map H×W) per input sample.
    """
    network.eval()
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            x = torch.stack([to_image_tensor(s) for s in chunk])
            out = network.forward_pass(x, sample_latent=False, want_recon=False)
            region = out.preds.region.permute(0, 2, 3, 1).numpy()
            edge = out.preds.edge[:, 0].numpy()
            for i, s in enumerate(chunk):
                yield s, region[i], edge[i]


def evaluate_predictions(predict_fn, samples, threshold=0.5):
    """Metric aggregation over labeled samples for an arbitrary predictor.

    predict_fn maps a sample to an H×W×2 probability map (soft or binary).
    Returns (aggregate MetricsReport, per-image record list).
    """
    reports = []
    records = []
    for s in samples:
        if not s.labeled:
            raise ValueError(f"evaluation needs labels; sample {s.id} has none")
        probs = predict_fn(s)
        pred = binarize(probs, threshold)
        rep = evaluate_masks(pred, s.y)
        reports.append(rep)
        records.append({"id": s.id, **rep.to_dict()})
    return aggregate_reports(reports), records


def evaluate(network_or_checkpoint, samples, threshold=0.5, batch_size=16):
    """Evaluate a network (or checkpoint payload/path) on a labeled dataset."""
    network = network_or_checkpoint
    if isinstance(network, (str, Path)):
        network = load_checkpoint(network)
    if isinstance(network, dict):
        network = system_from_checkpoint(network)[0].network
    preds = {}
    for s, region, _ in predict_probabilities(network, samples, batch_size):
        preds[id(s)] = region
    return evaluate_predictions(lambda s: preds[id(s)], samples, threshold)


# ---------------------------------------------------------------------------
# fit


@dataclass
class FitResult:
    config: object
    history: list                # one record per optimization step
    eval_records: list           # one record per periodic evaluation
    best_dice: float
    best_epoch: int
    best_payload: dict
    last_payload: dict
    out_dir: str = ""

    @property
    def final_metrics(self):
        return self.eval_records[-1] if self.eval_records else None


def _unlabeled_view(sample):
    return replace(sample, y=None, b=None)


def _select_streams(cfg, source_samples, target_samples):
    """Pick supervised / unlabeled / evaluation sets per training mode."""
    labeled_target = [s for s in target_samples if s.labeled]
    if cfg.mode == "upper_bound":
        if not labeled_target:
            raise ValueError(
                "mode=upper_bound trains supervised on the target domain and "
                "requires a labeled target dataset"
            )
        return labeled_target, [], labeled_target
    labeled_source = [s for s in source_samples if s.labeled]
    if not labeled_source:
        raise ValueError(f"mode={cfg.mode} requires a labeled source dataset")
    wants_target = cfg.mode == "uda" and (
        cfg.modules.reconstruction or cfg.modules.alignment
    )
    unsup = [_unlabeled_view(s) for s in target_samples] if wants_target else []
    if wants_target and not unsup:
        raise ValueError("mode=uda requires target-domain images")
    return labeled_source, unsup, labeled_target


def _epoch_order(rng, tag, epoch, n):
    return rng.numpy("shuffle", tag, epoch).permutation(n)


def _prepare(sample, rng, cfg, tag, epoch, index):
    if not cfg.augment.enabled:
        return sample
    return augment(sample, rng.numpy("augment", tag, epoch, int(index)), cfg.augment)


def fit(cfg, source_samples, target_samples, out_dir=None, resume=None,
        stop_after_steps=None, log_fn=None):
    """Train per config; returns a FitResult with best/last checkpoints.

    `resume` takes a checkpoint payload or path and continues the run with a
    bit-identical schedule. `stop_after_steps` ends the run early after that
    many optimization steps (used for mid-epoch checkpoint tests).
    """
    rng = seed_all(cfg.seed)
    sup_set, unsup_set, eval_set = _select_streams(cfg, source_samples, target_samples)

    torch.manual_seed(derive_seed(cfg.seed, "init"))
    system = build_system(cfg)
    opt_net = torch.optim.Adam(
        system.network.trainable_parameters(), lr=cfg.lr_network, betas=ADAM_BETAS,
    )
    opt_disc = None
    if system.disc_region is not None:
        disc_params = list(system.disc_region.parameters())
        disc_params += list(system.disc_edge.parameters())
        opt_disc = torch.optim.SGD(disc_params, lr=cfg.lr_discriminator,
                                   momentum=SGD_MOMENTUM)

    start_epoch = 0
    start_step = 0
    global_step = 0
    best_dice = -1.0
    best_epoch = -1
    best_payload = None
    if resume is not None:
        payload = resume if isinstance(resume, dict) else load_checkpoint(resume)
        if build_config(payload["config"]) != cfg:
            raise ValueError("resume checkpoint was produced by a different config")
        for name, module in system.modules_dict().items():
            module.load_state_dict(payload["modules"][name])
        opt_net.load_state_dict(payload["opt_net"])
        if opt_disc is not None and payload["opt_disc"] is not None:
            opt_disc.load_state_dict(payload["opt_disc"])
        start_epoch = payload["epoch"]
        start_step = payload["step_in_epoch"]
        global_step = payload["global_step"]
        best_dice = payload["best_dice"]
        best_epoch = payload["best_epoch"]

    bs = cfg.batch_size
    steps_per_epoch = max(1, math.ceil(len(sup_set) / bs))
    history = []
    eval_records = []

    def snapshot(epoch, step_in_epoch):
        return checkpoint_payload(system, opt_net, opt_disc, cfg, epoch,
                                  step_in_epoch, global_step, best_dice, best_epoch)

    stopped = False
    for epoch in range(start_epoch, cfg.epochs):
        lr_net, lr_disc = lr_schedule(cfg, epoch)
        for group in opt_net.param_groups:
            group["lr"] = lr_net
        if opt_disc is not None:
            for group in opt_disc.param_groups:
                group["lr"] = lr_disc

        order_s = _epoch_order(rng, "sup", epoch, len(sup_set))
        order_t = _epoch_order(rng, "unsup", epoch, len(unsup_set)) if unsup_set else None

        for step in range(start_step, steps_per_epoch):
            idx_s = [order_s[(step * bs + k) % len(sup_set)] for k in range(bs)]
            batch_s = batch_tensors([
                _prepare(sup_set[i], rng, cfg, "sup", epoch, i) for i in idx_s
            ])
            batch_t = None
            if unsup_set:
                idx_t = [order_t[(step * bs + k) % len(unsup_set)] for k in range(bs)]
                batch_t = batch_tensors([
                    _prepare(unsup_set[i], rng, cfg, "unsup", epoch, i) for i in idx_t
                ])[0]
            eps_gen = rng.torch("epsilon", epoch, step)
            report = train_step(system, opt_net, opt_disc, batch_s, batch_t, cfg,
                                eps_generator=eps_gen, epoch=epoch, step=step)
            record = {"kind": "step", "epoch": epoch, "step": step,
                      "global_step": global_step, **report.to_dict()}
            history.append(record)
            if log_fn is not None:
                log_fn(record)
            global_step += 1
            if stop_after_steps is not None and global_step >= stop_after_steps:
                stopped = True
                break
        start_step = 0
        if stopped:
            break

        if eval_set and ((epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            aggregate, _ = evaluate(system.network, eval_set, cfg.eval_threshold)
            record = {"kind": "eval", "epoch": epoch, "global_step": global_step,
                      **aggregate.to_dict(),
                      "mean_foreground_dice": aggregate.mean_foreground_dice()}
            eval_records.append(record)
            if log_fn is not None:
                log_fn(record)
            if aggregate.mean_foreground_dice() > best_dice:
                best_dice = aggregate.mean_foreground_dice()
                best_epoch = epoch
                best_payload = snapshot(epoch + 1, 0)

    if stopped:
        last_payload = snapshot(epoch, step + 1)
    else:
        last_payload = snapshot(cfg.epochs, 0)
    if best_payload is None:
        best_dice = max(best_dice, 0.0) if eval_records else best_dice
        best_payload = last_payload

    result = FitResult(
        config=cfg, history=history, eval_records=eval_records,
        best_dice=best_dice, best_epoch=best_epoch,
        best_payload=best_payload, last_payload=last_payload,
        out_dir=str(out_dir) if out_dir else "",
    )
    if out_dir:
        _write_run_artifacts(result, out_dir)
    return result


def _write_run_artifacts(result, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.best_payload, out / "best.pt")
    save_checkpoint(result.last_payload, out / "last.pt")
    with open(out / "run_log.jsonl", "w", encoding="utf-8") as fh:
        for record in result.history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    with open(out / "eval_log.jsonl", "w", encoding="utf-8") as fh:
        for record in result.eval_records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    # wall-clock and environment facts stay out of the reproducible logs
    import time
    metadata = {
        "written_at_unix": time.time(),
        "package_version": __version__,
        "torch_version": torch.__version__,
        "optimizers": {"network": f"Adam betas={ADAM_BETAS}",
                       "discriminators": f"SGD momentum={SGD_MOMENTUM}"},
        "weight_init": "torch defaults (Kaiming-uniform, fan-in) for non-pretrained "
                       "layers; parameter-generator linear at default 1/sqrt(384) scale",
        "elastic_params": {"alpha": result.config.augment.elastic_alpha,
                           "sigma": result.config.augment.elastic_sigma},
        "config": to_dict(result.config),
    }
    with open(out / "metadata.json", "w", encoding="utf-8") as fh:
        json.dump(metadata, fh, indent=2, sort_keys=True)
