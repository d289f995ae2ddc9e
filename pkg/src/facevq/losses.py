"""Training objectives, all as pure scalar functions.

The perceptual metric and the projected-GAN feature pyramid are fixed,
seed-initialized convolutional extractors (no pretrained weights); they
are frozen at construction and shared across the repo so "perceptual
distance" means the same thing everywhere. Adversarial terms take
discriminator probabilities, clamp them away from {0, 1}, and use the
non-saturating generator form.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

PROB_EPS = 1e-6


class LossError(ValueError):
    pass


@dataclass
class Stage1Weights:
    """Reconstruction-stage weights: total = photo + eta1*perceptual +
    eta2*adversarial + eta3*code."""

    eta1: float = 1.5
    eta2: float = 0.2
    eta3: float = 1.0
    beta: float = 0.25

    def __post_init__(self):
        if min(self.eta1, self.eta2, self.eta3, self.beta) < 0:
            raise LossError("stage-1 loss weights must be non-negative")


@dataclass
class Stage2Weights:
    """Swapping-stage weights: total = identity + lambda1*1[same]*photo +
    lambda2*lpips + lambda3*adversarial."""

    lambda1: float = 1.5
    lambda2: float = 0.1
    lambda3: float = 0.1

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise LossError("stage-2 loss weights must be non-negative")


def _check_shapes(a, b, what):
    if a.shape != b.shape:
        raise LossError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def photo_loss(x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Mean absolute reconstruction error."""
    _check_shapes(x_hat, x, "photo_loss")
    return (x_hat - x).abs().mean()


def code_loss(z_e: torch.Tensor, z_q: torch.Tensor, beta: float = 0.25) -> torch.Tensor:
    """Codebook/commitment loss with stop-gradients.

    Mean squared distance over grid cells. The first term moves only the
    codes (encoder output detached); the second, scaled by beta, moves
    only the encoder (codes detached).
    """
    _check_shapes(z_e, z_q, "code_loss")
    to_codes = (z_e.detach() - z_q).pow(2).mean()
    to_encoder = (z_q.detach() - z_e).pow(2).mean()
    return to_codes + beta * to_encoder


def adv_stage1(d_real: torch.Tensor, d_fake: torch.Tensor, side: str) -> torch.Tensor:
    """Vanilla GAN objective on discriminator probabilities.

    side="discriminator": -[log d_real + log(1 - d_fake)], to minimize.
    side="generator": non-saturating -log d_fake.
    """
    d_real = d_real.clamp(PROB_EPS, 1.0 - PROB_EPS)
    d_fake = d_fake.clamp(PROB_EPS, 1.0 - PROB_EPS)
    if side == "discriminator":
        return -(d_real.log().mean() + (1.0 - d_fake).log().mean())
    if side == "generator":
        return -d_fake.log().mean()
    raise LossError(f"unknown side '{side}'")


def stage1_total(photo, perceptual, adversarial, code, w: Stage1Weights):
    return photo + w.eta1 * perceptual + w.eta2 * adversarial + w.eta3 * code


def identity_loss(e_target: torch.Tensor, e_output: torch.Tensor) -> torch.Tensor:
    """Cosine distance between identity embeddings, in [0, 2]."""
    nt = e_target.norm(dim=-1)
    no = e_output.norm(dim=-1)
    if (nt == 0).any() or (no == 0).any():
        raise LossError("identity_loss: zero-norm embedding")
    cos = (e_target * e_output).sum(-1) / (nt * no)
    return (1.0 - cos).mean()


def swap_total(identity, photo, lpips, adversarial, same_identity: bool,
               w: Stage2Weights):
    indicator = 1.0 if same_identity else 0.0
    return identity + w.lambda1 * indicator * photo + w.lambda2 * lpips \
        + w.lambda3 * adversarial


# ---------------------------------------------------------------------------
# fixed feature networks and discriminators


def _images_to_nchw(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.shape[-1] == 3 and x.shape[1] != 3:
        x = x.permute(0, 3, 1, 2)
    return x


class FeatureExtractor(nn.Module):
    """Frozen multi-level conv features used as the perceptual proxy.

    Weights are a pure function of the seed; distances from different
    seeds are not comparable.
    """

    def __init__(self, seed: int = 1234, widths=(16, 24, 32)):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            layers, c_in = [], 3
            for w in widths:
                layers.append(nn.Conv2d(c_in, w, 3, stride=2, padding=1))
                c_in = w
            self.levels = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x):
        h = _images_to_nchw(x)
        feats = []
        for conv in self.levels:
            h = nn.functional.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return feats


def perceptual_loss(x_hat: torch.Tensor, x: torch.Tensor,
                    feat_net: FeatureExtractor) -> torch.Tensor:
    """Sum over levels of mean squared feature differences."""
    _check_shapes(x_hat, x, "perceptual_loss")
    fa = feat_net(x_hat)
    fb = feat_net(x)
    total = x_hat.new_zeros(())
    for a, b in zip(fa, fb):
        total = total + (a - b).pow(2).mean()
    return total


class FeaturePyramid(nn.Module):
    """Frozen four-scale feature pyramid for the projected adversary."""

    def __init__(self, seed: int = 4321, widths=(16, 32, 48, 64)):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            layers, c_in = [], 3
            for w in widths:
                layers.append(nn.Conv2d(c_in, w, 3, stride=2, padding=1))
                c_in = w
            self.levels = nn.ModuleList(layers)
        self.widths = tuple(widths)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x):
        h = _images_to_nchw(x)
        feats = []
        for conv in self.levels:
            h = nn.functional.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return feats


class LevelDiscriminator(nn.Module):
    """Small patch discriminator over one pyramid level; outputs
    probabilities."""

    def __init__(self, c_in: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(c_in, 32, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(32, 32, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(32, 1, 3, padding=1),
        )

    def forward(self, f):
        return torch.sigmoid(self.net(f))


class PyramidDiscriminators(nn.Module):
    def __init__(self, pyramid: FeaturePyramid):
        super().__init__()
        self.heads = nn.ModuleList(LevelDiscriminator(w) for w in pyramid.widths)

    def __len__(self):
        return len(self.heads)

    def __iter__(self):
        return iter(self.heads)


def projected_gan_loss(x: torch.Tensor, x_hat: torch.Tensor,
                       proj_net: FeaturePyramid, discriminators,
                       side: str) -> torch.Tensor:
    """Sum over pyramid levels of the adversarial objective on projected
    features. Real features are always detached; fake features keep the
    generator's graph on the generator side."""
    heads = list(discriminators)
    f_real = proj_net(x)
    f_fake = proj_net(x_hat)
    if len(heads) != len(f_real):
        raise LossError(
            f"pyramid has {len(f_real)} levels but {len(heads)} discriminators")
    total = x_hat.new_zeros(())
    for head, fr, ff in zip(heads, f_real, f_fake):
        if side == "discriminator":
            ff = ff.detach()
        total = total + adv_stage1(head(fr.detach()), head(ff), side)
    return total


class PatchDiscriminator(nn.Module):
    """4-layer patch discriminator for stage-1 training; outputs
    probabilities."""

    def __init__(self, base: int = 32, groups: int = 8):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, base, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(base, base * 2, 4, stride=2, padding=1),
            nn.GroupNorm(groups, base * 2), nn.LeakyReLU(0.2),
            nn.Conv2d(base * 2, base * 2, 4, padding=1),
            nn.GroupNorm(groups, base * 2), nn.LeakyReLU(0.2),
            nn.Conv2d(base * 2, 1, 4, padding=1),
        )

    def forward(self, x):
        return torch.sigmoid(self.net(_images_to_nchw(x)))
