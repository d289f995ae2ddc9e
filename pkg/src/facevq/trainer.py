"""The staged training procedures.

Order: embedder and stage1 need only a dataset manifest; ``domains``
fine-tunes per-domain codebooks on top of stage1 with the autoencoder
frozen; ``fusion`` trains only the fusion net; ``swapper`` trains the
identity branches and pyramid discriminators against a frozen base.
Every stage is a pure function of (config, seed, dataset): reruns
reproduce checkpoints bit-exactly. Frozen parameter sets are digest
-checked inside each stage and the digests are returned for auditing.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import BANK_ORDER
from .checkpoint import params_digest
from .config import ArchConfig, LossConfig
from .datagen import DatasetManifest
from .fusion import CodebookBank, FusionNet, fuse, multi_quantize, predict_weights
from .losses import (FeatureExtractor, FeaturePyramid, PatchDiscriminator,
                     PyramidDiscriminators, Stage1Weights, Stage2Weights,
                     adv_stage1, code_loss, identity_loss, perceptual_loss,
                     photo_loss, projected_gan_loss, stage1_total, swap_total)
from .pipeline import (load_bank, load_embedder, load_fusion, load_stage1,
                       save_bank, save_embedder, save_fusion, save_stage1,
                       save_swapper)
from .swapper import ConvEmbedder, CosineClassifier, Swapper
from .vqcore import ModelBundle, codebook_stats, quantize, straight_through

STAGES = ("stage1", "domains", "fusion", "swapper", "embedder")

# Bank entry -> data domain feeding it during fine-tuning.
BOOK_DATA_DOMAIN = {name: ("rgb" if name == "rgb_texture" else name) for name in BANK_ORDER}


class TrainerError(RuntimeError):
    pass


def _f(value) -> float:
    return float(value.detach()) if torch.is_tensor(value) else float(value)


@dataclass
class TrainConfig:
    stage: str
    manifest: str | Path
    out_root: str | Path
    iterations: int = 1000
    batch_size: int = 16
    learning_rate: float = 2e-3
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 500
    device: str = "cpu"
    arch: ArchConfig = field(default_factory=ArchConfig)
    stage1_weights: Stage1Weights = field(default_factory=Stage1Weights)
    stage2_weights: Stage2Weights = field(default_factory=Stage2Weights)

    def validate(self):
        if self.stage not in STAGES:
            raise TrainerError(f"unknown stage '{self.stage}' (expected one of {STAGES})")
        if self.batch_size <= 0 or self.learning_rate <= 0:
            raise TrainerError("batch size and learning rate must be positive")
        if self.iterations < 0 or self.log_every <= 0 or self.checkpoint_every <= 0:
            raise TrainerError("iteration counts and cadences must be positive")
        return self


@dataclass
class TrainLog:
    stage: str
    records: list = field(default_factory=list)

    def add(self, record: dict):
        for key, value in record.items():
            if key == "wall_clock":
                continue
            if isinstance(value, float) and not math.isfinite(value):
                raise TrainerError(f"non-finite '{key}' at iteration {record.get('iteration')}")
        if self.records and record["iteration"] <= self.records[-1]["iteration"]:
            raise TrainerError("log iterations must be strictly increasing")
        self.records.append(record)

    def save(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    stage: str
    ckpt_root: Path
    log: TrainLog
    info: dict


class _Data:
    """All images of a manifest split, in memory as NCHW tensors."""

    def __init__(self, manifest: DatasetManifest, split: str = "train"):
        self.entries = manifest.entries_for(split=split)
        if not self.entries:
            raise TrainerError(f"manifest has no '{split}' entries")
        imgs = [manifest.load_image(e).pixels for e in self.entries]
        self.images = torch.from_numpy(np.stack(imgs)).permute(0, 3, 1, 2).contiguous()
        self.identity = np.array([e.identity for e in self.entries])
        self.domain = np.array([e.domain for e in self.entries])
        self.view = np.array([e.view for e in self.entries])

    def domain_indices(self, domain: str) -> np.ndarray:
        return np.flatnonzero(self.domain == domain)

    def all_indices(self) -> np.ndarray:
        return np.arange(len(self.entries))


def _sample(pool: np.ndarray, n: int, gen: torch.Generator) -> np.ndarray:
    pick = torch.randint(len(pool), (n,), generator=gen).numpy()
    return pool[pick]


def _prepare(cfg: TrainConfig):
    cfg.validate()
    torch.manual_seed(cfg.seed)
    torch.use_deterministic_algorithms(True)
    manifest = DatasetManifest.load(cfg.manifest)
    gen = torch.Generator().manual_seed(cfg.seed)
    return manifest, gen


def _check_frozen(before: dict, modules: dict, stage: str) -> dict:
    after = {name: params_digest({k: v for k, v in mod.state_dict().items()})
             for name, mod in modules.items()}
    for name, digest in after.items():
        if digest != before[name]:
            raise TrainerError(f"{stage}: frozen component '{name}' changed during training")
    return after


def _digests(modules: dict) -> dict:
    return {name: params_digest({k: v for k, v in mod.state_dict().items()})
            for name, mod in modules.items()}


def _freeze(*modules):
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(False)


def train_stage1(cfg: TrainConfig) -> TrainResult:
    """Joint quantized-autoencoder training with the shared codebook on
    the full rgb + reflectance mixture."""
    manifest, gen = _prepare(cfg)
    data = _Data(manifest)
    if len(data.domain_indices("rgb")) == 0:
        raise TrainerError("stage1 needs rgb entries in the manifest")

    bundle = ModelBundle(cfg.arch, seed=cfg.seed)
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed + 1)
        disc = PatchDiscriminator(groups=cfg.arch.norm_groups)
    feat = FeatureExtractor(seed=cfg.arch.feature_seed)
    w = cfg.stage1_weights

    gen_params = (list(bundle.encoder.parameters()) + list(bundle.decoder.parameters())
                  + list(bundle.codebook.parameters()))
    opt_g = torch.optim.Adam(gen_params, lr=cfg.learning_rate)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.learning_rate)

    log = TrainLog(stage="stage1")
    out = Path(cfg.out_root)
    pool = data.all_indices()
    start = time.perf_counter()
    initial_total = None
    for it in range(cfg.iterations):
        x = data.images[_sample(pool, cfg.batch_size, gen)]

        z = bundle.encoder(x).permute(0, 2, 3, 1)
        z_q, idx = quantize(z, bundle.codebook)
        x_hat = bundle.decoder(straight_through(z, z_q).permute(0, 3, 1, 2))

        l_photo = photo_loss(x_hat, x)
        l_per = perceptual_loss(x_hat, x, feat)
        l_adv = adv_stage1(torch.ones(()), disc(x_hat), "generator")
        l_code = code_loss(z, z_q, w.beta)
        total = stage1_total(l_photo, l_per, l_adv, l_code, w)
        if not torch.isfinite(total):
            raise TrainerError(f"stage1: non-finite loss at iteration {it}; "
                               f"last checkpoint in {out / 'stage1'}")
        opt_g.zero_grad()
        total.backward()
        opt_g.step()

        l_disc = adv_stage1(disc(x), disc(x_hat.detach()), "discriminator")
        opt_d.zero_grad()
        l_disc.backward()
        opt_d.step()

        if initial_total is None:
            initial_total = _f(total)
        if (it + 1) % cfg.log_every == 0 or it == 0:
            _, perplexity = codebook_stats(idx, bundle.codebook.size)
            log.add({"iteration": it + 1, "loss_total": _f(total),
                     "loss_photo": _f(l_photo), "loss_perceptual": _f(l_per),
                     "loss_adv": _f(l_adv), "loss_code": _f(l_code),
                     "loss_disc": _f(l_disc), "perplexity": perplexity,
                     "wall_clock": time.perf_counter() - start})
        if (it + 1) % cfg.checkpoint_every == 0:
            save_stage1(out, bundle, disc)

    save_stage1(out, bundle, disc)
    log.save(out / "stage1" / "train_log.jsonl")
    final_total = log.records[-1]["loss_total"] if log.records else None
    return TrainResult("stage1", out, log,
                       {"initial_loss": initial_total, "final_loss": final_total})


def finetune_domain_codebooks(cfg: TrainConfig, base_checkpoint: str | Path | None = None) -> TrainResult:
    """Fine-tune one codebook per domain with encoder and decoder frozen.

    Only the code-level term that touches the codebook is active, so each
    book relaxes onto its domain's encoder statistics. cfg.iterations is
    per domain."""
    manifest, gen = _prepare(cfg)
    data = _Data(manifest)
    ckpt_root = Path(base_checkpoint) if base_checkpoint else Path(cfg.out_root)
    bundle, _ = load_stage1(ckpt_root)
    _freeze(bundle.encoder, bundle.decoder)
    frozen = {"encoder": bundle.encoder, "decoder": bundle.decoder}
    before = _digests(frozen)

    missing = [name for name in BANK_ORDER
               if len(data.domain_indices(BOOK_DATA_DOMAIN[name])) == 0]
    if missing:
        raise TrainerError(
            "domain fine-tuning is missing training data for: " + ", ".join(missing))

    bank = CodebookBank.from_shared(bundle.codebook)
    log = TrainLog(stage="domains")
    out = Path(cfg.out_root)
    start = time.perf_counter()
    step = 0
    for name in BANK_ORDER:
        idx_pool = data.domain_indices(BOOK_DATA_DOMAIN[name])
        with torch.no_grad():
            latents = bundle.encoder(data.images[idx_pool]).permute(0, 2, 3, 1)
        book = bank[name]
        opt = torch.optim.Adam(book.parameters(), lr=cfg.learning_rate)
        for it in range(cfg.iterations):
            z = latents[_sample(np.arange(len(latents)), cfg.batch_size, gen)]
            z_q, idx = quantize(z, book)
            loss = cfg.stage1_weights.eta3 * (z.detach() - z_q).pow(2).sum(-1).mean()
            if not torch.isfinite(loss):
                raise TrainerError(f"domains: non-finite loss on '{name}' at iteration {it}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            if (it + 1) % cfg.log_every == 0 or it == 0:
                _, perplexity = codebook_stats(idx, book.size)
                log.add({"iteration": step, "book": name, "loss_code": _f(loss),
                         "perplexity": perplexity,
                         "wall_clock": time.perf_counter() - start})

    after = _check_frozen(before, frozen, "domains")
    save_bank(out, bank, bundle.arch)
    log.save(out / "domains" / "train_log.jsonl")
    return TrainResult("domains", out, log,
                       {"frozen_digests": after})


def train_fusion(cfg: TrainConfig, checkpoints: str | Path | None = None) -> TrainResult:
    """Train the fusion-weight predictor with everything else fixed,
    sampling domains in a balanced rotation."""
    manifest, gen = _prepare(cfg)
    data = _Data(manifest)
    ckpt_root = Path(checkpoints) if checkpoints else Path(cfg.out_root)
    bundle, _ = load_stage1(ckpt_root)
    bank = load_bank(ckpt_root)
    _freeze(bundle.encoder, bundle.decoder, bundle.codebook, bank)
    frozen = {"encoder": bundle.encoder, "decoder": bundle.decoder,
              "codebook": bundle.codebook, "bank": bank}
    before = _digests(frozen)

    fusion_net = FusionNet(cfg.arch, seed=cfg.seed)
    feat = FeatureExtractor(seed=cfg.arch.feature_seed)
    opt = torch.optim.Adam(fusion_net.parameters(), lr=cfg.learning_rate)

    # Frozen encoder: cache latents and per-book quantizations up front.
    domain_latents, domain_quant, domain_pools = {}, {}, {}
    for name in BANK_ORDER:
        pool = data.domain_indices(BOOK_DATA_DOMAIN[name])
        if len(pool) == 0:
            raise TrainerError(f"fusion training has no data for '{name}'")
        with torch.no_grad():
            z = bundle.encoder(data.images[pool]).permute(0, 2, 3, 1)
            domain_latents[name] = z
            domain_quant[name] = torch.stack(multi_quantize(z, bank), dim=-1)
        domain_pools[name] = pool

    log = TrainLog(stage="fusion")
    out = Path(cfg.out_root)
    start = time.perf_counter()
    initial_total = None
    per_domain = max(1, cfg.batch_size // len(BANK_ORDER))
    for it in range(cfg.iterations):
        zs, zqs, xs = [], [], []
        for name in BANK_ORDER:
            sel = torch.randint(len(domain_pools[name]), (per_domain,), generator=gen)
            zs.append(domain_latents[name][sel])
            zqs.append(domain_quant[name][sel])
            xs.append(data.images[domain_pools[name][sel.numpy()]])
        z = torch.cat(zs)
        z_q_stack = torch.cat(zqs)          # (B, h, w, d, K)
        x = torch.cat(xs)

        weights = predict_weights(z, fusion_net)
        fused = fuse([z_q_stack[..., k] for k in range(len(BANK_ORDER))], weights)
        x_hat = bundle.decoder(fused.permute(0, 3, 1, 2))
        l_photo = photo_loss(x_hat, x)
        l_per = perceptual_loss(x_hat, x, feat)
        total = l_photo + cfg.stage1_weights.eta1 * l_per
        if not torch.isfinite(total):
            raise TrainerError(f"fusion: non-finite loss at iteration {it}")
        opt.zero_grad()
        total.backward()
        opt.step()

        if initial_total is None:
            initial_total = _f(total)
        if (it + 1) % cfg.log_every == 0 or it == 0:
            log.add({"iteration": it + 1, "loss_total": _f(total),
                     "loss_photo": _f(l_photo), "loss_perceptual": _f(l_per),
                     "wall_clock": time.perf_counter() - start})
        if (it + 1) % cfg.checkpoint_every == 0:
            save_fusion(out, fusion_net, bundle.arch)

    after = _check_frozen(before, frozen, "fusion")
    save_fusion(out, fusion_net, bundle.arch)
    log.save(out / "fusion" / "train_log.jsonl")
    final_total = log.records[-1]["loss_total"] if log.records else None
    return TrainResult("fusion", out, log,
                       {"initial_loss": initial_total, "final_loss": final_total,
                        "frozen_digests": after})


def train_embedder(cfg: TrainConfig) -> TrainResult:
    """Train the identity embedder as a cosine-softmax classifier over the
    training identities (rgb images, all views)."""
    manifest, gen = _prepare(cfg)
    data = _Data(manifest)
    pool = data.domain_indices("rgb")
    if len(pool) == 0:
        raise TrainerError("embedder training needs rgb entries")
    ids = sorted(set(data.identity[pool].tolist()))
    class_of = {ident: i for i, ident in enumerate(ids)}
    labels = torch.tensor([class_of[i] for i in data.identity[pool]])

    embedder = ConvEmbedder(cfg.arch, seed=cfg.seed)
    head = CosineClassifier(cfg.arch.embed_dim, len(ids), seed=cfg.seed + 1)
    opt = torch.optim.Adam(list(embedder.parameters()) + list(head.parameters()),
                           lr=cfg.learning_rate)

    log = TrainLog(stage="embedder")
    out = Path(cfg.out_root)
    start = time.perf_counter()
    for it in range(cfg.iterations):
        sel = torch.randint(len(pool), (cfg.batch_size,), generator=gen)
        x = data.images[pool[sel.numpy()]]
        logits = head(embedder(x))
        loss = torch.nn.functional.cross_entropy(logits, labels[sel])
        if not torch.isfinite(loss):
            raise TrainerError(f"embedder: non-finite loss at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (it + 1) % cfg.log_every == 0 or it == 0:
            acc = float((logits.argmax(-1) == labels[sel]).float().mean())
            log.add({"iteration": it + 1, "loss_total": _f(loss),
                     "train_accuracy": acc,
                     "wall_clock": time.perf_counter() - start})

    save_embedder(out, embedder, cfg.arch)
    log.save(out / "embedder" / "train_log.jsonl")
    return TrainResult("embedder", out, log, {})


def train_swapper(cfg: TrainConfig, checkpoints: str | Path | None = None) -> TrainResult:
    """Train identity-injection branches (and pyramid discriminators) in
    the rgb domain over a fully frozen base."""
    manifest, gen = _prepare(cfg)
    data = _Data(manifest)
    ckpt_root = Path(checkpoints) if checkpoints else Path(cfg.out_root)
    bundle, _ = load_stage1(ckpt_root)
    bank = load_bank(ckpt_root)
    fusion_net = load_fusion(ckpt_root)
    embedder = load_embedder(ckpt_root)
    _freeze(bundle.encoder, bundle.decoder, bundle.codebook, bank, fusion_net, embedder)
    frozen = {"encoder": bundle.encoder, "decoder": bundle.decoder,
              "codebook": bundle.codebook, "bank": bank,
              "fusion": fusion_net, "embedder": embedder}
    before = _digests(frozen)

    swapper = Swapper(cfg.arch, bundle.decoder, seed=cfg.seed)
    pyramid = FeaturePyramid(seed=cfg.arch.feature_seed + 1)
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed + 2)
        discs = PyramidDiscriminators(pyramid)
    feat = FeatureExtractor(seed=cfg.arch.feature_seed)
    w = cfg.stage2_weights

    pool = data.domain_indices("rgb")
    if len(pool) == 0:
        raise TrainerError("swapper training needs rgb entries")
    identities = sorted(set(data.identity[pool].tolist()))
    by_identity = {ident: pool[data.identity[pool] == ident] for ident in identities}

    # Base is frozen: fused latents and identity embeddings are constants.
    with torch.no_grad():
        z_all = bundle.encoder(data.images[pool]).permute(0, 2, 3, 1)
        fused_all = fuse(multi_quantize(z_all, bank), predict_weights(z_all, fusion_net))
        emb_all = embedder(data.images[pool])
    pos_of = {int(g): i for i, g in enumerate(pool)}

    opt_s = torch.optim.Adam(swapper.parameters(), lr=cfg.learning_rate)
    opt_d = torch.optim.Adam(discs.parameters(), lr=cfg.learning_rate)

    log = TrainLog(stage="swapper")
    out = Path(cfg.out_root)
    start = time.perf_counter()
    for it in range(cfg.iterations):
        same_identity = it % 2 == 0
        t_sel = torch.randint(len(pool), (cfg.batch_size,), generator=gen).numpy()
        id_sel = []
        for t in t_sel:
            ident = data.identity[pool[t]]
            if same_identity:
                choices = [i for i in by_identity[ident] if i != pool[t]]
                pick = choices[int(torch.randint(len(choices), (1,), generator=gen))]
            else:
                others = [g for g in identities if g != ident]
                other = others[int(torch.randint(len(others), (1,), generator=gen))]
                cand = by_identity[other]
                pick = cand[int(torch.randint(len(cand), (1,), generator=gen))]
            id_sel.append(pos_of[int(pick)])
        id_sel = np.array(id_sel)

        templates = data.images[pool[t_sel]]
        fused = fused_all[t_sel]
        z_id = emb_all[id_sel]

        swapped = bundle.decoder(fused.permute(0, 3, 1, 2), swapper=swapper, z_id=z_id)
        l_id = identity_loss(z_id, embedder(swapped))
        l_photo = photo_loss(swapped, templates)
        l_lpips = perceptual_loss(swapped, templates, feat)
        l_adv = projected_gan_loss(templates, swapped, pyramid, discs, "generator")
        total = swap_total(l_id, l_photo, l_lpips, l_adv, same_identity, w)
        if not torch.isfinite(total):
            raise TrainerError(f"swapper: non-finite loss at iteration {it}; "
                               f"last checkpoint in {out / 'swapper'}")
        opt_s.zero_grad()
        total.backward()
        opt_s.step()

        l_disc = projected_gan_loss(templates, swapped.detach(), pyramid, discs,
                                    "discriminator")
        opt_d.zero_grad()
        l_disc.backward()
        opt_d.step()

        if (it + 1) % cfg.log_every == 0 or it == 0:
            log.add({"iteration": it + 1, "loss_total": _f(total),
                     "loss_identity": _f(l_id), "loss_photo": _f(l_photo),
                     "loss_lpips": _f(l_lpips), "loss_adv": _f(l_adv),
                     "loss_disc": _f(l_disc),
                     "same_identity": bool(same_identity),
                     "wall_clock": time.perf_counter() - start})
        if (it + 1) % cfg.checkpoint_every == 0:
            save_swapper(out, swapper, discs, bundle.arch)

    after = _check_frozen(before, frozen, "swapper")
    save_swapper(out, swapper, discs, bundle.arch)
    log.save(out / "swapper" / "train_log.jsonl")
    return TrainResult("swapper", out, log, {"frozen_digests": after})


def run_stage(cfg: TrainConfig, from_checkpoint: str | Path | None = None) -> TrainResult:
    """Dispatch a stage by name (the CLI entry)."""
    cfg.validate()
    if cfg.stage == "stage1":
        return train_stage1(cfg)
    if cfg.stage == "domains":
        return finetune_domain_codebooks(cfg, from_checkpoint)
    if cfg.stage == "fusion":
        return train_fusion(cfg, from_checkpoint)
    if cfg.stage == "embedder":
        return train_embedder(cfg)
    return train_swapper(cfg, from_checkpoint)
