"""Shared fixtures.

The expensive fixture is ``trained_pipeline``: it generates the desk-scale
dataset and runs all five training stages once per session (on the order
of 20 minutes on two CPU cores). Set FACEVQ_TEST_CKPT to a directory to
reuse checkpoints across sessions while iterating locally; the committed
default always trains fresh.
"""

from __future__ import annotations

import os
from pathlib import Path

import pytest

from facevq.config import DataConfig
from facevq.datagen import DatasetManifest, build_dataset
from facevq.pipeline import load_pipeline
from facevq.trainer import TrainConfig, run_stage

# Desk-scale acceptance setup. The codebook ablation only means something
# in the code-scarcity regime the method targets: many identities at the
# 10:1 rgb:reflectance imbalance, with a codebook far smaller than the
# data manifold (the package default N=256 trivially memorizes a toy
# dataset and both ablation arms coincide). Iteration counts all stay
# well under 2K per stage.
from facevq.config import ArchConfig  # noqa: E402

DESK_DATA = DataConfig(identities=400, reflectance_ratio=0.1, seed=11)
DESK_ARCH = ArchConfig(codebook_size=8)
DESK_SEED = 0
STAGE_ITERS = {
    "embedder": 1000,
    "stage1": 1800,
    "domains": 400,
    "fusion": 800,
    "swapper": 800,
}
STAGE_LR = {
    "embedder": 2e-3,
    "stage1": 2e-3,
    "domains": 5e-3,
    "fusion": 1e-3,
    "swapper": 1e-3,
}


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory) -> DatasetManifest:
    """Small, fast dataset for mechanics tests (10 identities, 5 captured)."""
    out = tmp_path_factory.mktemp("tinydata")
    return build_dataset(DataConfig(identities=10, reflectance_ratio=0.5, seed=1), out)


@pytest.fixture(scope="session")
def desk_manifest(tmp_path_factory) -> DatasetManifest:
    out = tmp_path_factory.mktemp("deskdata")
    return build_dataset(DESK_DATA, out)


def train_all_stages(manifest: DatasetManifest, out_root: Path, iters: dict,
                     lrs: dict | None = None, seed: int = DESK_SEED,
                     arch: ArchConfig | None = None) -> dict:
    results = {}
    for stage in ("embedder", "stage1", "domains", "fusion", "swapper"):
        cfg = TrainConfig(
            stage=stage, manifest=manifest.root, out_root=out_root,
            iterations=iters[stage],
            learning_rate=(lrs or STAGE_LR).get(stage, 1e-3),
            seed=seed, log_every=100, checkpoint_every=900,
            arch=arch or ArchConfig(),
        )
        results[stage] = run_stage(cfg)
    return results


@pytest.fixture(scope="session")
def tiny_ckpt(tiny_manifest, tmp_path_factory):
    """A structurally complete but untrained-in-practice checkpoint set
    (3 iterations per stage) for exercising interfaces."""
    out = tmp_path_factory.mktemp("tinyckpt")
    results = train_all_stages(tiny_manifest, out,
                               {s: 3 for s in STAGE_ITERS}, seed=3)
    return out, results


@pytest.fixture(scope="session")
def trained_pipeline(desk_manifest, tmp_path_factory):
    """Full smoke-trained pipeline shared by acceptance and trained-model
    tests. Returns (manifest, ckpt_root, models, stage results)."""
    cache = os.environ.get("FACEVQ_TEST_CKPT")
    if cache and (Path(cache) / "swapper" / "manifest.json").exists():
        root = Path(cache)
        results = {}
    else:
        root = Path(cache) if cache else tmp_path_factory.mktemp("deskckpt")
        results = train_all_stages(desk_manifest, root, STAGE_ITERS, arch=DESK_ARCH)
    models = load_pipeline(root)
    return desk_manifest, root, models, results
