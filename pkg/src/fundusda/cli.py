"""Command-line surface: train / eval / predict / synth / info / plot.

Exit codes: 0 success, 1 user error (bad flags, missing or malformed
inputs), 2 internal error. All artifacts land under the --out directory;
wall-clock facts are confined to metadata.json so repeated runs with one
seed produce byte-identical logs.
"""

import argparse
import csv
import json
import sys
import warnings
from pathlib import Path

import numpy as np
import yaml

from .config import ConfigError, build_config, load_config, save_config, to_dict
from .data import (DatasetError, encode_mask, generate_synthetic_pair,
                   load_dataset, roi_center, crop_roi, save_dataset)
from .metrics import binarize
from .model import build_system, parameter_counts
from .trainer import (TrainingAbort, evaluate, fit, load_checkpoint,
                      predict_probabilities, system_from_checkpoint)

USER_ERROR, INTERNAL_ERROR = 1, 2


class CliError(Exception):
    """User-facing error: message printed, exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message)


def _add_common(parser):
    parser.add_argument("--config", help="YAML config file (defaults apply if omitted)")
    parser.add_argument("--out", help="output directory for artifacts")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--mode", choices=("uda", "no_adapt", "upper_bound"))
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int, dest="batch_size")
    parser.add_argument("--image-size", type=int, dest="image_size")
    parser.add_argument("--encoder-variant", choices=("faithful", "toy"),
                        dest="encoder_variant")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override any config key by dotted path, e.g. "
             "--set modules.refinement=false --set loss_weights.lambda1=0.2",
    )


def _overrides_from_args(args):
    overrides = {}
    for flag in ("seed", "mode", "epochs", "batch_size", "image_size", "encoder_variant"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = value
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise CliError(f"--set expects KEY=VALUE, got '{item}'")
        key, raw = item.split("=", 1)
        overrides[key.strip()] = yaml.safe_load(raw)
    return overrides


def _config_from_args(args):
    overrides = _overrides_from_args(args)
    if getattr(args, "config", None):
        return load_config(args.config, overrides=overrides)
    return build_config({}, overrides=overrides)


def _require_out(args):
    if not args.out:
        raise CliError("--out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(root, domain, cfg):
    samples = load_dataset(root, domain, edge_kernel=cfg.edge_blur_kernel,
                           edge_sigma=cfg.edge_blur_sigma)
    prepared = []
    for s in samples:
        if max(s.x.shape[:2]) > cfg.image_size:
            s = crop_roi(s, roi_center(s), cfg.roi_size, cfg.image_size)
        prepared.append(s)
    return prepared


def _training_data(args, cfg):
    if args.synthetic:
        rng = np.random.default_rng(cfg.seed)
        return generate_synthetic_pair(
            cfg.synthetic.source, cfg.synthetic.target, cfg.synthetic.n_images,
            rng, size=cfg.image_size,
        )
    if not args.source or not args.target:
        raise CliError("provide --source and --target dataset roots, or --synthetic")
    return (_load_split(args.source, "source", cfg),
            _load_split(args.target, "target", cfg))


def cmd_train(args):
    cfg = _config_from_args(args)
    out = _require_out(args)
    source, target = _training_data(args, cfg)
    result = fit(cfg, source, target, out_dir=out)
    save_config(cfg, out / "config.yaml")
    final = result.final_metrics
    if final is not None:
        with open(out / "metrics.json", "w", encoding="utf-8") as fh:
            json.dump(final, fh, indent=2, sort_keys=True)
    summary = (f"best mean foreground dice {result.best_dice:.4f} "
               f"(epoch {result.best_epoch})" if result.eval_records
               else "no labeled evaluation data")
    print(f"train: {summary}; artifacts in {out}")
    return 0


def _write_per_image_csv(records, path):
    fields = list(records[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(records)


def cmd_eval(args):
    cfg = _config_from_args(args)
    out = _require_out(args)
    if not Path(args.checkpoint).exists():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    payload = load_checkpoint(args.checkpoint)
    system, ckpt_cfg = system_from_checkpoint(payload)
    samples = _load_split(args.data, "target", ckpt_cfg)
    labeled = [s for s in samples if s.labeled]
    if not labeled:
        raise CliError(f"dataset {args.data} has no labeled samples to evaluate")
    aggregate, records = evaluate(system.network, labeled, cfg.eval_threshold)
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(aggregate.to_dict(), fh, indent=2, sort_keys=True)
    _write_per_image_csv(records, out / "per_image.csv")
    d = aggregate.to_dict()
    print(f"eval: n={d['n_images']} dice_disc={d['dice_disc']:.4f} "
          f"dice_cup={d['dice_cup']:.4f} miou_disc={d['miou_disc']:.4f} "
          f"miou_cup={d['miou_cup']:.4f} acc_disc={d['acc_disc']:.4f} "
          f"acc_cup={d['acc_cup']:.4f} delta={d['delta']:.4f}")
    return 0


def cmd_predict(args):
    cfg = _config_from_args(args)
    out = _require_out(args)
    if not Path(args.checkpoint).exists():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    payload = load_checkpoint(args.checkpoint)
    system, ckpt_cfg = system_from_checkpoint(payload)
    samples = _load_split(args.images, "target", ckpt_cfg)
    if not samples:
        raise CliError(f"no images found under {args.images}")
    from PIL import Image
    n = 0
    for sample, region, _edge in predict_probabilities(system.network, samples):
        masks = binarize(region, cfg.eval_threshold)
        Image.fromarray(encode_mask(masks)).save(out / f"{sample.id}_mask.png")
        np.save(out / f"{sample.id}_prob.npy", region.astype(np.float32))
        n += 1
    print(f"predict: wrote {n} mask/probability pairs to {out}")
    return 0


def cmd_synth(args):
    cfg = _config_from_args(args)
    out = _require_out(args)
    n = args.n or cfg.synthetic.n_images
    rng = np.random.default_rng(cfg.seed)
    source, target = generate_synthetic_pair(
        cfg.synthetic.source, cfg.synthetic.target, n, rng, size=cfg.image_size,
    )
    save_dataset(source, out / "source")
    save_dataset(target, out / "target")
    print(f"synth: wrote {n} source and {n} target samples under {out}")
    return 0


def cmd_info(args):
    if args.checkpoint:
        if not Path(args.checkpoint).exists():
            raise CliError(f"checkpoint not found: {args.checkpoint}")
        system, cfg = system_from_checkpoint(load_checkpoint(args.checkpoint))
    else:
        cfg = _config_from_args(args)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            system = build_system(cfg)
    counts = parameter_counts(system)
    print(f"encoder variant: {cfg.encoder_variant}  image size: {cfg.image_size}")
    order = ("encoder", "edge_decoder", "region_decoder", "latent_encoder",
             "reconstruction_decoder", "style_encoder", "refinement")
    for key in order:
        print(f"  {key:24s} {counts[key]:>12,}")
    print(f"  {'total':24s} {counts['total']:>12,}")
    print(f"  {'inference':24s} {counts['inference']:>12,}")
    print("training-only critics (not in total):")
    for key in ("discriminator_region", "discriminator_edge"):
        print(f"  {key:24s} {counts[key]:>12,}")
    if args.json:
        print(json.dumps(counts, sort_keys=True))
    return 0


def _read_per_image_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {k: (v if k == "id" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def cmd_plot(args):
    from .analysis import embedding_report, plot_dice_boxplot, plot_embedding

    out = _require_out(args)
    if args.kind == "boxplot":
        if not args.runs:
            raise CliError("plot boxplot needs --runs with per_image.csv paths")
        tables = []
        labels = []
        for item in args.runs:
            path = Path(item)
            if path.is_dir():
                path = path / "per_image.csv"
            if not path.exists():
                raise CliError(f"per-image table not found: {path}")
            tables.append(_read_per_image_csv(path))
            labels.append(path.parent.name or str(path))
        target = out / "boxplot.png"
        plot_dice_boxplot(labels, tables, target)
        print(f"plot: wrote {target}")
        return 0

    # embedding
    if not args.checkpoint:
        raise CliError("plot embedding needs --checkpoint")
    if not Path(args.checkpoint).exists():
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    system, cfg = system_from_checkpoint(load_checkpoint(args.checkpoint))
    if args.synthetic:
        rng = np.random.default_rng(cfg.seed)
        source, target = generate_synthetic_pair(
            cfg.synthetic.source, cfg.synthetic.target,
            args.n or 64, rng, size=cfg.image_size,
        )
    else:
        if not args.source or not args.target:
            raise CliError("plot embedding needs --source/--target or --synthetic")
        source = _load_split(args.source, "source", cfg)
        target = _load_split(args.target, "target", cfg)
    report = embedding_report(system.network, source, target)
    target_png = out / "embedding.png"
    plot_embedding(report, target_png)
    distances = {"distance_pre": report["distance_pre"],
                 "distance_post": report["distance_post"]}
    with open(out / "embedding.json", "w", encoding="utf-8") as fh:
        json.dump(distances, fh, indent=2, sort_keys=True)
    print(f"plot: wrote {target_png} "
          f"(centroid distance pre={distances['distance_pre']:.4f}, "
          f"post={distances['distance_post']:.4f})")
    return 0


def build_parser():
    parser = _Parser(prog="fundusda",
                     description="Domain-adaptive optic disc/cup segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model", parents=[])
    _add_common(p_train)
    p_train.add_argument("--source", help="labeled source dataset root")
    p_train.add_argument("--target", help="target dataset root")
    p_train.add_argument("--synthetic", action="store_true",
                         help="train on the built-in synthetic two-domain benchmark")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a labeled dataset")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True, help="labeled dataset root")
    p_eval.set_defaults(func=cmd_eval)

    p_pred = sub.add_parser("predict", help="write masks and probability maps")
    _add_common(p_pred)
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--images", required=True, help="dataset root with images/")
    p_pred.set_defaults(func=cmd_predict)

    p_synth = sub.add_parser("synth", help="write a synthetic two-domain dataset")
    _add_common(p_synth)
    p_synth.add_argument("--n", type=int, help="samples per domain")
    p_synth.set_defaults(func=cmd_synth)

    p_info = sub.add_parser("info", help="report parameter counts")
    _add_common(p_info)
    p_info.add_argument("--checkpoint")
    p_info.add_argument("--json", action="store_true", help="also emit JSON")
    p_info.set_defaults(func=cmd_info)

    p_plot = sub.add_parser("plot", help="emit figure files")
    _add_common(p_plot)
    p_plot.add_argument("kind", choices=("boxplot", "embedding"))
    p_plot.add_argument("--runs", nargs="+", help="run dirs or per_image.csv paths")
    p_plot.add_argument("--checkpoint")
    p_plot.add_argument("--synthetic", action="store_true")
    p_plot.add_argument("--source")
    p_plot.add_argument("--target")
    p_plot.add_argument("--n", type=int)
    p_plot.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USER_ERROR
    except (ConfigError, DatasetError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USER_ERROR
    except TrainingAbort as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return INTERNAL_ERROR
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return INTERNAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
