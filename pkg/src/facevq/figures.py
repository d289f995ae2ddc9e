"""Matplotlib renderings of reports and training logs.

Each helper writes a PNG next to the report/log it visualizes and
returns the path. Rendering is headless (Agg)."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import BANK_ORDER


def fig_training_curves(log_path: str | Path, out_path: str | Path | None = None) -> Path:
    """Loss components over iterations from a line-delimited JSON log."""
    log_path = Path(log_path)
    records = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
    if not records:
        raise ValueError(f"empty training log {log_path}")
    out_path = Path(out_path) if out_path else log_path.with_suffix(".png")
    keys = [k for k in records[-1] if k.startswith("loss_") or k == "perplexity"]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    its = [r["iteration"] for r in records]
    for key in keys:
        if key == "perplexity":
            continue
        vals = [r.get(key) for r in records]
        if any(v is None for v in vals):
            continue
        axes[0].plot(its, vals, label=key.replace("loss_", ""))
    axes[0].set_xlabel("iteration")
    axes[0].set_ylabel("loss")
    axes[0].set_yscale("log")
    axes[0].legend(fontsize=7)
    if "perplexity" in records[-1]:
        axes[1].plot(its, [r.get("perplexity", float("nan")) for r in records], color="k")
        axes[1].set_ylabel("codebook perplexity")
    axes[1].set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def fig_ablation(report: dict, out_path: str | Path) -> Path:
    """Grouped per-domain PSNR bars: joint vs multi-domain codebooks, and
    fixed vs closest template when present."""
    body = report["body"]
    domains = sorted(body["joint_codebook_psnr"])
    x = np.arange(len(domains))
    has_templates = "fixed_template_psnr" in body
    fig, axes = plt.subplots(1, 2 if has_templates else 1,
                             figsize=(9 if has_templates else 5, 3.4), squeeze=False)
    ax = axes[0][0]
    ax.bar(x - 0.18, [body["joint_codebook_psnr"][d] for d in domains], 0.36, label="joint")
    ax.bar(x + 0.18, [body["multi_domain_psnr"][d] for d in domains], 0.36, label="multi-domain")
    ax.set_xticks(x, domains, rotation=20)
    ax.set_ylabel("PSNR (dB)")
    ax.set_title("reconstruction")
    ax.legend(fontsize=8)
    if has_templates:
        ax = axes[0][1]
        tdom = sorted(body["fixed_template_psnr"])
        tx = np.arange(len(tdom))
        ax.bar(tx - 0.18, [body["fixed_template_psnr"][d] for d in tdom], 0.36, label="fixed")
        ax.bar(tx + 0.18, [body["closest_template_psnr"][d] for d in tdom], 0.36, label="closest")
        ax.set_xticks(tx, tdom, rotation=20)
        ax.set_title("template swapping")
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def fig_weight_summary(summaries: dict, out_path: str | Path) -> Path:
    """Stacked per-input-domain bars of mean fusion weight per book."""
    domains = list(summaries)
    x = np.arange(len(domains))
    fig, ax = plt.subplots(figsize=(6, 3.4))
    bottom = np.zeros(len(domains))
    for book in BANK_ORDER:
        vals = np.array([summaries[d].get(book, 0.0) for d in domains])
        ax.bar(x, vals, 0.6, bottom=bottom, label=book)
        bottom += vals
    ax.set_xticks(x, domains, rotation=20)
    ax.set_ylabel("mean fusion weight")
    ax.legend(fontsize=7, ncols=2)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def fig_metric_distributions(pairs: list, out_path: str | Path) -> Path:
    """Histograms of per-pair PSNR and SSIM."""
    psnrs = [r["psnr"] for r in pairs if r.get("psnr") is not None]
    ssims = [r["ssim"] for r in pairs if r.get("ssim") is not None]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    axes[0].hist(psnrs, bins=20, color="tab:blue")
    axes[0].set_xlabel("PSNR (dB)")
    axes[1].hist(ssims, bins=20, color="tab:orange")
    axes[1].set_xlabel("SSIM")
    for ax in axes:
        ax.set_ylabel("pairs")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)
