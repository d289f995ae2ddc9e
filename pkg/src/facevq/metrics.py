"""Quality metrics and the ablation/probe harnesses.

PSNR and SSIM are self-contained; SSIM uses a 7x7 uniform window on the
BT.601 luminance channel with the original constants (K1=0.01, K2=0.03).
"Perceptual" distances use the repo's fixed seed-initialized extractor
and are labeled as a proxy: they are not comparable to published LPIPS
numbers. Identity cosine uses whichever embedder is passed (trained conv
embedder or the oracle)."""

from __future__ import annotations

import numpy as np
import torch
from scipy.ndimage import uniform_filter

from . import BANK_ORDER, REFLECTANCE_DOMAINS, VIEWS
from .datagen import DatasetManifest, DomainImage
from .fusion import fused_forward, predict_weights, weight_summary
from .losses import FeatureExtractor, perceptual_loss
from .pipeline import PipelineModels, load_bank, load_fusion, load_pipeline, load_stage1
from .stitcher import TemplateLibrary, select_template
from .swapper import OracleEmbedder, embed_identity, swap
from .vqcore import encode, decode, quantize, to_tensor

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])


class MetricError(ValueError):
    pass


def _pixels(img) -> np.ndarray:
    if isinstance(img, DomainImage):
        return img.pixels
    if torch.is_tensor(img):
        return img.detach().cpu().numpy()
    return np.asarray(img)


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    """10*log10(1/MSE) for [0, 1] images, capped for near-identical pairs."""
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise MetricError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse < 1e-10:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def _luminance(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3:
        return img.astype(np.float64) @ LUMA
    return img.astype(np.float64)


def ssim(a, b, window: int = 7, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM over the luminance channel.

    Uniform window, unbiased covariance normalization, border crop of
    half the window (matching the standard reference formulation with
    gaussian weighting disabled)."""
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise MetricError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    x, y = _luminance(a), _luminance(b)
    np_w = window ** 2
    cov_norm = np_w / (np_w - 1)
    ux = uniform_filter(x, window)
    uy = uniform_filter(y, window)
    uxx = uniform_filter(x * x, window)
    uyy = uniform_filter(y * y, window)
    uxy = uniform_filter(x * y, window)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux ** 2 + uy ** 2 + c1) * (vx + vy + c2))
    pad = (window - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean())


_default_extractor = None


def perceptual_distance(a, b, feat_net: FeatureExtractor | None = None) -> float:
    """Fixed-extractor feature distance ("perceptual (proxy)")."""
    global _default_extractor
    if feat_net is None:
        if _default_extractor is None:
            _default_extractor = FeatureExtractor()
        feat_net = _default_extractor
    ta = to_tensor(_pixels(a)).unsqueeze(0)
    tb = to_tensor(_pixels(b)).unsqueeze(0)
    return float(perceptual_loss(ta, tb, feat_net))


def id_similarity(face_a, face_b, embedder) -> float:
    """Cosine similarity of identity embeddings of two rgb-like images."""
    if isinstance(embedder, OracleEmbedder):
        ea, eb = embedder(face_a), embedder(face_b)
    else:
        with torch.no_grad():
            ea = embedder(to_tensor(_pixels(face_a)).unsqueeze(0))[0]
            eb = embedder(to_tensor(_pixels(face_b)).unsqueeze(0))[0]
    cos = float((ea * eb).sum() / (ea.norm() * eb.norm()))
    return max(-1.0, min(1.0, cos))


# ---------------------------------------------------------------------------
# harnesses


def _reconstruct(img: DomainImage, models: PipelineModels, path: str) -> np.ndarray:
    with torch.no_grad():
        z = encode(img, models.bundle)
        if path == "joint":
            z_q, _ = quantize(z, models.bundle.codebook)
        elif path == "fused":
            z_q = fused_forward(z, models.bank, models.fusion_net)
        else:
            raise MetricError(f"unknown reconstruction path '{path}'")
        out = decode(z_q, models.bundle)
    return out.numpy()


def reconstruction_metrics(manifest: DatasetManifest, models: PipelineModels,
                           split: str = "test", path: str = "fused",
                           domains=None) -> list:
    """Per-image reconstruction quality records on a manifest split."""
    records = []
    for entry in manifest.entries_for(split=split):
        if domains is not None and entry.domain not in domains:
            continue
        img = manifest.load_image(entry)
        recon = _reconstruct(img, models, path)
        records.append({
            "identity": entry.identity, "domain": entry.domain, "view": entry.view,
            "path": path,
            "psnr": psnr(recon, img.pixels),
            "ssim": ssim(recon, img.pixels),
            "perceptual_proxy": perceptual_distance(recon, img.pixels),
            "id_cosine": id_similarity(recon, img.pixels, models.embedder)
            if models.embedder is not None else None,
        })
    return records


def aggregate(records: list, key: str, by: str | None = None) -> dict:
    vals = {}
    for r in records:
        if r.get(key) is None:
            continue
        group = r[by] if by else "all"
        vals.setdefault(group, []).append(r[key])
    return {g: float(np.mean(v)) for g, v in sorted(vals.items())}


def ablate_codebooks(manifest: DatasetManifest, ckpt_root,
                     include_templates: bool = True) -> dict:
    """Reconstruction through the shared codebook vs the fused multi-domain
    path on held-out reflectance images, plus fixed- vs closest-template
    swapping quality when the swapper stages exist.

    Returns the body of an ablation report (per-domain PSNR columns)."""
    bundle, _ = load_stage1(ckpt_root)
    models = PipelineModels(bundle=bundle, bank=load_bank(ckpt_root),
                            fusion_net=load_fusion(ckpt_root))
    joint, fused = {}, {}
    for entry in manifest.entries_for(split="test"):
        if entry.domain not in REFLECTANCE_DOMAINS:
            continue
        img = manifest.load_image(entry)
        joint.setdefault(entry.domain, []).append(psnr(_reconstruct(img, models, "joint"), img.pixels))
        fused.setdefault(entry.domain, []).append(psnr(_reconstruct(img, models, "fused"), img.pixels))
    if not joint:
        raise MetricError("no held-out reflectance images to ablate")
    body = {
        "joint_codebook_psnr": {d: float(np.mean(v)) for d, v in sorted(joint.items())},
        "multi_domain_psnr": {d: float(np.mean(v)) for d, v in sorted(fused.items())},
    }
    body["reflectance_gap_db"] = float(
        np.mean([body["multi_domain_psnr"][d] - body["joint_codebook_psnr"][d]
                 for d in body["joint_codebook_psnr"]]))

    if include_templates:
        full = load_pipeline(ckpt_root)
        library = TemplateLibrary.from_manifest(manifest, full.embedder, split="train")
        fixed_entry = min(library.entries, key=lambda t: t.identity_id)
        fixed_scores, closest_scores = {}, {}
        for ident in manifest.captured_identities(split="test"):
            face = manifest.load_image(
                manifest.entries_for(domain="rgb", view="frontal", identity=ident)[0])
            closest_entry = select_template(embed_identity(face, full.embedder), library)
            for domain in REFLECTANCE_DOMAINS:
                for view in VIEWS:
                    gt = manifest.load_image(
                        manifest.entries_for(domain=domain, view=view, identity=ident)[0])
                    for arm, tpl in (("fixed", fixed_entry), ("closest", closest_entry)):
                        out = swap(tpl.images[(domain, view)], face, full)
                        score = psnr(out.pixels, gt.pixels)
                        (fixed_scores if arm == "fixed" else closest_scores) \
                            .setdefault(domain, []).append(score)
        body["fixed_template_psnr"] = {d: float(np.mean(v)) for d, v in sorted(fixed_scores.items())}
        body["closest_template_psnr"] = {d: float(np.mean(v)) for d, v in sorted(closest_scores.items())}

        # Mean fusion weights routed per book, per input domain (the
        # cross-domain usage picture).
        summaries = {}
        with torch.no_grad():
            for domain in ("rgb",) + REFLECTANCE_DOMAINS:
                entries = manifest.entries_for(split="test", domain=domain)[:8]
                if not entries:
                    continue
                ws = []
                for e in entries:
                    z = encode(manifest.load_image(e), models.bundle)
                    ws.append(weight_summary(predict_weights(z, models.fusion_net)))
                summaries[domain] = {book: float(v) for book, v in
                                     zip(BANK_ORDER, np.mean(ws, axis=0))}
        body["fusion_weight_summary"] = summaries
    return body


def extract_fused_latents(manifest: DatasetManifest, models: PipelineModels,
                          split: str):
    """Mean-pooled fused latents plus domain labels for probing."""
    feats, labels = [], []
    domain_index = {d: i for i, d in enumerate(("rgb",) + REFLECTANCE_DOMAINS)}
    with torch.no_grad():
        for entry in manifest.entries_for(split=split):
            z = encode(manifest.load_image(entry), models.bundle)
            fused = fused_forward(z, models.bank, models.fusion_net)
            feats.append(fused.mean(dim=(0, 1)))
            labels.append(domain_index[entry.domain])
    return torch.stack(feats), torch.tensor(labels)


def linear_probe_accuracy(train_x: torch.Tensor, train_y: torch.Tensor,
                          test_x: torch.Tensor, test_y: torch.Tensor,
                          classes: int = 5, steps: int = 300, seed: int = 0) -> float:
    """Fit a linear softmax classifier and return held-out accuracy."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        probe = torch.nn.Linear(train_x.shape[1], classes)
    opt = torch.optim.Adam(probe.parameters(), lr=5e-2)
    mu, sd = train_x.mean(0), train_x.std(0) + 1e-6
    xs = (train_x - mu) / sd
    for _ in range(steps):
        loss = torch.nn.functional.cross_entropy(probe(xs), train_y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        pred = probe((test_x - mu) / sd).argmax(-1)
    return float((pred == test_y).float().mean())


def latent_separability(manifest: DatasetManifest, ckpt_root, seed: int = 0) -> dict:
    """Domain separability of fused latents via a linear probe (stands in
    for a 2-D embedding eyeball check; deterministic and assertable)."""
    bundle, _ = load_stage1(ckpt_root)
    models = PipelineModels(bundle=bundle, bank=load_bank(ckpt_root),
                            fusion_net=load_fusion(ckpt_root))
    train_x, train_y = extract_fused_latents(manifest, models, "train")
    test_x, test_y = extract_fused_latents(manifest, models, "test")
    acc = linear_probe_accuracy(train_x, train_y, test_x, test_y, seed=seed)
    return {
        "probe_accuracy": acc,
        "chance": 1.0 / 5.0,
        "train_samples": int(len(train_y)),
        "test_samples": int(len(test_y)),
    }
