"""Loading and saving the staged model checkpoints.

Each training stage writes one container directory under a checkpoint
root: ``stage1/`` (autoencoder + shared codebook + discriminator),
``domains/`` (codebook bank), ``fusion/`` (fusion net), ``embedder/``
and ``swapper/`` (branches + pyramid discriminators). Later stages and
inference load what they need and fail with a named error when a
prerequisite stage has not run.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import BANK_ORDER
from .checkpoint import ContainerError, load_container, save_container
from .config import ArchConfig
from .fusion import CodebookBank, FusionNet
from .losses import FeaturePyramid, PatchDiscriminator, PyramidDiscriminators
from .swapper import ConvEmbedder, Swapper
from .vqcore import ModelBundle

STAGE_DIRS = ("stage1", "domains", "fusion", "embedder", "swapper")


class PipelineError(RuntimeError):
    """A required stage checkpoint is missing or unreadable."""


def _module_arrays(module, prefix):
    return {f"{prefix}.{k}": v.detach().cpu().numpy()
            for k, v in module.state_dict().items()}


def _load_module(module, arrays, prefix):
    sd = {}
    for k in module.state_dict():
        key = f"{prefix}.{k}"
        if key not in arrays:
            raise PipelineError(f"checkpoint missing tensor '{key}'")
        sd[k] = torch.from_numpy(np.ascontiguousarray(arrays[key]))
    module.load_state_dict(sd)
    return module


def _arch_from_config(cfg: dict) -> ArchConfig:
    arch = dict(cfg["arch"])
    arch["channel_mult"] = tuple(arch["channel_mult"])
    if arch.get("inject_scales") is not None:
        arch["inject_scales"] = tuple(arch["inject_scales"])
    return ArchConfig(**arch)


def save_stage1(root: Path, bundle: ModelBundle, disc: PatchDiscriminator):
    arrays = bundle.state_arrays()
    arrays.update(_module_arrays(disc, "disc"))
    return save_container(Path(root) / "stage1", arrays,
                          config={"arch": asdict(bundle.arch), "stage": "stage1"})


def load_stage1(root: Path):
    try:
        arrays, cfg = load_container(Path(root) / "stage1")
    except ContainerError as exc:
        raise PipelineError(f"stage1 checkpoint not found under {root}: {exc}") from exc
    bundle = ModelBundle(_arch_from_config(cfg))
    bundle.load_state_arrays(arrays)
    disc = PatchDiscriminator()
    _load_module(disc, arrays, "disc")
    return bundle, disc


def save_bank(root: Path, bank: CodebookBank, arch: ArchConfig):
    arrays = {f"bank.{name}": bank[name].codes.detach().cpu().numpy() for name in BANK_ORDER}
    return save_container(Path(root) / "domains", arrays,
                          config={"arch": asdict(arch), "stage": "domains"})


def load_bank(root: Path) -> CodebookBank:
    try:
        arrays, cfg = load_container(Path(root) / "domains")
    except ContainerError as exc:
        raise PipelineError(f"domain codebook checkpoint not found under {root}: {exc}") from exc
    arch = _arch_from_config(cfg)
    bank = CodebookBank(arch.codebook_size, arch.latent_dim)
    for name in BANK_ORDER:
        bank[name].codes.data.copy_(torch.from_numpy(arrays[f"bank.{name}"]))
    return bank


def save_fusion(root: Path, fusion_net: FusionNet, arch: ArchConfig):
    return save_container(Path(root) / "fusion", _module_arrays(fusion_net, "fusion"),
                          config={"arch": asdict(arch), "stage": "fusion"})


def load_fusion(root: Path) -> FusionNet:
    try:
        arrays, cfg = load_container(Path(root) / "fusion")
    except ContainerError as exc:
        raise PipelineError(f"fusion checkpoint not found under {root}: {exc}") from exc
    net = FusionNet(_arch_from_config(cfg))
    return _load_module(net, arrays, "fusion")


def save_embedder(root: Path, embedder: ConvEmbedder, arch: ArchConfig):
    return save_container(Path(root) / "embedder", _module_arrays(embedder, "embedder"),
                          config={"arch": asdict(arch), "stage": "embedder"})


def load_embedder(root: Path) -> ConvEmbedder:
    try:
        arrays, cfg = load_container(Path(root) / "embedder")
    except ContainerError as exc:
        raise PipelineError(f"embedder checkpoint not found under {root}: {exc}") from exc
    emb = ConvEmbedder(_arch_from_config(cfg))
    _load_module(emb, arrays, "embedder")
    emb.eval()
    return emb


def save_swapper(root: Path, swapper: Swapper, discs: PyramidDiscriminators,
                 arch: ArchConfig):
    arrays = _module_arrays(swapper, "swapper")
    arrays.update(_module_arrays(discs, "pyramid_disc"))
    return save_container(Path(root) / "swapper", arrays,
                          config={"arch": asdict(arch), "stage": "swapper",
                                  "scales": list(swapper.scales)})


def load_swapper(root: Path, decoder) -> Swapper:
    try:
        arrays, cfg = load_container(Path(root) / "swapper")
    except ContainerError as exc:
        raise PipelineError(f"swapper checkpoint not found under {root}: {exc}") from exc
    arch = _arch_from_config(cfg)
    sw = Swapper(arch, decoder, scales=tuple(cfg["scales"]))
    return _load_module(sw, arrays, "swapper")


class PipelineModels:
    """Everything inference needs, loaded from a checkpoint root."""

    def __init__(self, bundle=None, bank=None, fusion_net=None,
                 embedder=None, swapper=None):
        self.bundle = bundle
        self.bank = bank
        self.fusion_net = fusion_net
        self.embedder = embedder
        self.swapper = swapper

    @property
    def arch(self) -> ArchConfig:
        return self.bundle.arch

    def eval(self):
        for m in (self.bank, self.fusion_net, self.embedder, self.swapper):
            if m is not None:
                m.eval()
        if self.bundle is not None:
            self.bundle.eval()
        return self


def load_pipeline(root: str | Path) -> PipelineModels:
    """Load all five stages; raises PipelineError naming the first
    missing one."""
    root = Path(root)
    bundle, _ = load_stage1(root)
    models = PipelineModels(
        bundle=bundle,
        bank=load_bank(root),
        fusion_net=load_fusion(root),
        embedder=load_embedder(root),
        swapper=load_swapper(root, bundle.decoder),
    )
    return models.eval()
