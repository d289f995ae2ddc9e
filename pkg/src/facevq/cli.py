"""Command-line entry point.

Subcommands: datagen, train, infer, ablate, metrics, probe. Global flags
(--config / --seed / --out) attach to every subcommand; `facevq
--dump-config` prints the full default configuration as JSON. Report
commands write the JSON report, a CSV of per-pair records when there are
any, and PNG figures next to them.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import REFLECTANCE_DOMAINS, __version__
from .checkpoint import container_digest
from .config import DataConfig, dump_config, load_config
from .datagen import DatasetManifest, DomainImage, build_dataset
from .figures import (fig_ablation, fig_metric_distributions,
                      fig_training_curves, fig_weight_summary)
from .losses import Stage1Weights, Stage2Weights
from .metrics import (ablate_codebooks, aggregate, latent_separability,
                      reconstruction_metrics)
from .pipeline import STAGE_DIRS, PipelineModels, load_bank, load_fusion, load_pipeline, load_stage1
from .report import make_report, write_pairs_csv, write_report
from .stitcher import TemplateLibrary, reflectance_infer
from .trainer import STAGES, TrainConfig, run_stage


def _parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    return p


def _load_cfg(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _ckpt_digests(root: Path) -> dict:
    digests = {}
    for stage in STAGE_DIRS:
        stage_dir = Path(root) / stage
        if (stage_dir / "manifest.json").exists():
            digests[stage] = container_digest(stage_dir)
    return digests


def cmd_datagen(args) -> int:
    cfg = _load_cfg(args)
    data_cfg = DataConfig(
        identities=args.identities if args.identities is not None else cfg.data.identities,
        image_size=args.size if args.size is not None else cfg.data.image_size,
        reflectance_ratio=(args.reflectance_ratio if args.reflectance_ratio is not None
                           else cfg.data.reflectance_ratio),
        train_split=cfg.data.train_split,
        seed=cfg.seed if args.seed is not None else cfg.data.seed,
    )
    out = args.out or Path("dataset")
    manifest = build_dataset(data_cfg, out)
    manifest.validate()
    print(f"wrote {len(manifest.entries)} images for {data_cfg.identities} identities "
          f"({len(manifest.captured_identities())} captured) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    stage_cfg = getattr(cfg.train, args.stage)
    tcfg = TrainConfig(
        stage=args.stage,
        manifest=args.manifest,
        out_root=args.out or Path("checkpoints"),
        iterations=args.iterations if args.iterations is not None else stage_cfg.iterations,
        batch_size=stage_cfg.batch_size,
        learning_rate=args.learning_rate if args.learning_rate is not None
        else stage_cfg.learning_rate,
        seed=cfg.seed,
        log_every=stage_cfg.log_every,
        checkpoint_every=stage_cfg.checkpoint_every,
        arch=cfg.arch,
        stage1_weights=Stage1Weights(cfg.loss.eta1, cfg.loss.eta2, cfg.loss.eta3, cfg.loss.beta),
        stage2_weights=Stage2Weights(cfg.loss.lambda1, cfg.loss.lambda2, cfg.loss.lambda3),
    )
    result = run_stage(tcfg, from_checkpoint=args.from_ckpt)
    log_path = Path(result.ckpt_root) / args.stage / "train_log.jsonl"
    if log_path.exists() and result.log.records:
        fig = fig_training_curves(log_path)
        print(f"training curves: {fig}")
    print(f"stage '{args.stage}' finished: checkpoint in {result.ckpt_root / args.stage}")
    if "final_loss" in result.info and result.info["final_loss"] is not None:
        print(f"loss {result.info['initial_loss']:.4f} -> {result.info['final_loss']:.4f}")
    return 0


def cmd_infer(args) -> int:
    cfg = _load_cfg(args)
    models = load_pipeline(args.ckpt)
    size = models.arch.image_size
    with Image.open(args.image) as im:
        pixels = np.asarray(im.convert("RGB").resize((size, size), Image.BILINEAR),
                            dtype=np.float32) / 255.0
    face = DomainImage(pixels=pixels, domain="rgb", view="frontal")
    manifest = DatasetManifest.load(args.library)
    library = TemplateLibrary.from_manifest(manifest, models.embedder, split="train")
    asset = reflectance_infer(face, library, models,
                              uv_size=args.uv_size,
                              view_priority=cfg.stitch.frontal_priority,
                              feather=cfg.stitch.feather_pixels)
    out = args.out or Path("asset")
    asset.save(out)
    print(f"wrote {', '.join(sorted(asset.maps))} UV maps + mask to {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    manifest = DatasetManifest.load(args.manifest)
    body = ablate_codebooks(manifest, args.ckpt, include_templates=not args.no_templates)
    report = make_report("ablation", {
        "seed": cfg.seed,
        "manifest": str(args.manifest),
        "checkpoints": str(args.ckpt),
        "checkpoint_digests": _ckpt_digests(args.ckpt),
    }, body)
    out = args.out or Path("reports")
    path = write_report(report, Path(out) / "ablation.json")
    rows = [{"domain": d,
             "joint_psnr": body["joint_codebook_psnr"][d],
             "multi_domain_psnr": body["multi_domain_psnr"][d],
             "fixed_template_psnr": body.get("fixed_template_psnr", {}).get(d),
             "closest_template_psnr": body.get("closest_template_psnr", {}).get(d)}
            for d in sorted(body["joint_codebook_psnr"])]
    write_pairs_csv(rows, Path(out) / "ablation.csv")
    fig_ablation(report, Path(out) / "ablation.png")
    if "fusion_weight_summary" in body:
        fig_weight_summary(body["fusion_weight_summary"], Path(out) / "fusion_weights.png")
    print(f"ablation report: {path}")
    print(f"reflectance multi-domain gain: {body['reflectance_gap_db']:+.2f} dB")
    return 0


def cmd_metrics(args) -> int:
    cfg = _load_cfg(args)
    manifest = DatasetManifest.load(args.manifest)
    models = load_pipeline(args.ckpt)
    pairs = reconstruction_metrics(manifest, models, split=args.split, path=args.path)
    body = {
        "psnr": aggregate(pairs, "psnr"),
        "psnr_by_domain": aggregate(pairs, "psnr", by="domain"),
        "ssim": aggregate(pairs, "ssim"),
        "perceptual_proxy": aggregate(pairs, "perceptual_proxy"),
        "id_cosine": aggregate(pairs, "id_cosine"),
        "notes": "perceptual column uses the repo's fixed seed-initialized "
                 "extractor (a proxy, not comparable to published LPIPS); all "
                 "metrics are computed on the synthetic split named here",
        "split": args.split,
        "path": args.path,
    }
    report = make_report("metrics", {
        "seed": cfg.seed,
        "manifest": str(args.manifest),
        "checkpoints": str(args.ckpt),
        "checkpoint_digests": _ckpt_digests(args.ckpt),
    }, body, pairs=pairs)
    out = args.out or Path("reports")
    path = write_report(report, Path(out) / "metrics.json")
    write_pairs_csv(pairs, Path(out) / "metrics.csv")
    fig_metric_distributions(pairs, Path(out) / "metrics.png")
    print(f"metrics report: {path}")
    print(f"mean PSNR {body['psnr'].get('all', float('nan')):.2f} dB, "
          f"mean SSIM {body['ssim'].get('all', float('nan')):.3f}")
    return 0


def cmd_probe(args) -> int:
    cfg = _load_cfg(args)
    manifest = DatasetManifest.load(args.manifest)
    body = latent_separability(manifest, args.ckpt, seed=cfg.seed)
    report = make_report("probe", {
        "seed": cfg.seed,
        "manifest": str(args.manifest),
        "checkpoints": str(args.ckpt),
        "checkpoint_digests": _ckpt_digests(args.ckpt),
    }, body)
    out = args.out or Path("reports")
    path = write_report(report, Path(out) / "probe.json")
    print(f"probe report: {path}")
    print(f"domain probe accuracy {body['probe_accuracy']:.3f} (chance {body['chance']:.2f})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="facevq",
        description="multi-domain codebook face reflectance toolkit")
    parser.add_argument("--version", action="version", version=f"facevq {__version__}")
    parser.add_argument("--dump-config", action="store_true",
                        help="print the full default config as JSON and exit")
    sub = parser.add_subparsers(dest="command")
    parent = _parent()

    p = sub.add_parser("datagen", parents=[parent],
                       help="generate the synthetic multi-domain dataset")
    p.add_argument("--identities", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--reflectance-ratio", type=float, default=None)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", parents=[parent], help="run one training stage")
    p.add_argument("stage", choices=STAGES)
    p.add_argument("--manifest", type=Path, required=True, help="dataset directory")
    p.add_argument("--from", dest="from_ckpt", type=Path, default=None,
                   help="checkpoint root holding prerequisite stages")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[parent],
                       help="reconstruct UV reflectance maps for one image")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--library", type=Path, required=True, help="dataset directory")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--uv-size", type=int, default=64)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", parents=[parent],
                       help="joint vs multi-domain and template ablations")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--no-templates", action="store_true",
                   help="skip the template-selection arm (no swapper needed)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("metrics", parents=[parent],
                       help="reconstruction quality metrics on a split")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--path", choices=("joint", "fused"), default="fused")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("probe", parents=[parent],
                       help="linear-probe domain separability of fused latents")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.dump_config:
        print(dump_config(load_config(getattr(args, "config", None))))
        return 0
    if args.command is None:
        parser.print_help()
        return 1
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
