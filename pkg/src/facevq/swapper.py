"""Identity embedding and identity-conditioned decoding.

The swapper is a set of parallel branches, one per configured decoder tap
scale. A branch reads the small-scale feature, passes it through three
injection blocks (conv + AdaIN modulated by the identity embedding +
leaky activation), upsamples, and emits a residual that the decoder adds
to its own upsampled feature. Branch output convs are zero-initialized,
so an untrained swapper reproduces the frozen autoencoder exactly.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .config import ArchConfig
from .datagen import DomainImage
from .vqcore import Decoder, decode, encode, to_tensor
from .fusion import fused_forward

ADAIN_EPS = 1e-5


class SwapperError(ValueError):
    pass


def adain(f: torch.Tensor, sigma: torch.Tensor, mu: torch.Tensor,
          eps: float = ADAIN_EPS) -> torch.Tensor:
    """Renormalize channel statistics of f to (mu, sigma).

    f is (B, C, H, W); sigma and mu broadcast over (B, C). Uses the
    population standard deviation, stabilized by eps, so the output's
    measured channel stats equal the modulation parameters up to eps.
    """
    if f.dim() != 4:
        raise SwapperError(f"adain expects (B, C, H, W), got {tuple(f.shape)}")
    mean = f.mean(dim=(2, 3), keepdim=True)
    std = f.std(dim=(2, 3), unbiased=False, keepdim=True)
    sigma = sigma.reshape(*sigma.shape, 1, 1) if sigma.dim() == 2 else sigma.reshape(1, -1, 1, 1)
    mu = mu.reshape(*mu.shape, 1, 1) if mu.dim() == 2 else mu.reshape(1, -1, 1, 1)
    return sigma * (f - mean) / (std + eps) + mu


class IdentityInjectionBlock(nn.Module):
    """conv -> AdaIN(z_id) -> leaky ReLU.

    The modulation pair is produced by one affine map per parameter; the
    scale map is biased at 1 so an untrained block is statistics-neutral.
    """

    def __init__(self, channels: int, embed_dim: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.to_sigma = nn.Linear(embed_dim, channels)
        self.to_mu = nn.Linear(embed_dim, channels)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, f, z_id):
        h = self.conv(f)
        sigma = 1.0 + self.to_sigma(z_id)
        mu = self.to_mu(z_id)
        return self.act(adain(h, sigma, mu))


class SwapperBranch(nn.Module):
    """Residual generator for one decoder upsampling stage."""

    def __init__(self, c_in: int, c_out: int, embed_dim: int, n_blocks: int = 3):
        super().__init__()
        self.blocks = nn.ModuleList(
            IdentityInjectionBlock(c_in, embed_dim) for _ in range(n_blocks))
        self.out = nn.Conv2d(c_in, c_out, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, f_small, z_id):
        if z_id.dim() == 1:
            z_id = z_id.unsqueeze(0).expand(f_small.shape[0], -1)
        h = f_small
        for block in self.blocks:
            h = block(h, z_id)
        h = nn.functional.interpolate(h, scale_factor=2, mode="nearest")
        return self.out(h)


class Swapper(nn.Module):
    """Branches keyed by decoder tap scale.

    Default configuration injects at every tap scale except the final
    (largest) one; injecting at the largest scale trades identity for
    texture detail.
    """

    def __init__(self, arch: ArchConfig, decoder: Decoder,
                 scales=None, seed: int = 0):
        super().__init__()
        tap_scales = decoder.tap_scales
        if scales is None:
            scales = arch.inject_scales if arch.inject_scales is not None else tuple(tap_scales[:-1])
        unknown = [s for s in scales if s not in tap_scales]
        if unknown:
            raise SwapperError(f"inject scales {unknown} not among decoder taps {tap_scales}")
        self.scales = tuple(int(s) for s in scales)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            branches = {}
            for scale, (c_in, c_out) in zip(tap_scales, decoder.stage_channels):
                if scale in self.scales:
                    branches[str(scale)] = SwapperBranch(c_in, c_out, arch.embed_dim)
            self.branches = nn.ModuleDict(branches)

    def branch_at(self, scale: int) -> SwapperBranch:
        return self.branches[str(scale)]


def inject(taps, z_id, swapper: Swapper, decoder: Decoder):
    """Apply one upsampling step to every tap, adding the identity
    residual at configured scales.

    Returns the post-upsample feature per tap; at unconfigured scales the
    result equals the decoder's plain upsample of that tap, so an empty
    configuration (or zero-initialized branches) passes features through
    unchanged relative to reconstruction.
    """
    if len(taps) != len(decoder.stages):
        raise SwapperError(f"{len(taps)} taps for {len(decoder.stages)} decoder stages")
    out = []
    for tap, scale, (_, up) in zip(taps, decoder.tap_scales, decoder.stages):
        h = up(nn.functional.interpolate(tap, scale_factor=2, mode="nearest"))
        if swapper is not None and scale in swapper.scales:
            h = h + swapper.branch_at(scale)(tap, z_id)
        out.append(h)
    return out


# ---------------------------------------------------------------------------
# identity embedders


class ConvEmbedder(nn.Module):
    """Small convolutional identity embedder; outputs unit-norm vectors."""

    def __init__(self, arch: ArchConfig, seed: int = 0):
        super().__init__()
        g = arch.norm_groups
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.net = nn.Sequential(
                nn.Conv2d(3, 32, 3, stride=2, padding=1), nn.GroupNorm(g, 32), nn.SiLU(),
                nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.GroupNorm(g, 64), nn.SiLU(),
                nn.Conv2d(64, 64, 3, stride=2, padding=1), nn.GroupNorm(g, 64), nn.SiLU(),
                nn.Conv2d(64, 64, 3, stride=2, padding=1), nn.GroupNorm(g, 64), nn.SiLU(),
            )
            self.fc = nn.Linear(64, arch.embed_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = images
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.shape[-1] == 3 and x.shape[1] != 3:
            x = x.permute(0, 3, 1, 2)
        h = self.net(x).mean(dim=(2, 3))
        e = self.fc(h)
        return nn.functional.normalize(e, dim=-1)


class CosineClassifier(nn.Module):
    """Normalized-softmax head (margin 0) for embedder training."""

    def __init__(self, embed_dim: int, n_classes: int, scale: float = 16.0, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.weight = nn.Parameter(torch.randn(n_classes, embed_dim) * 0.02)
        self.scale = scale

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        w = nn.functional.normalize(self.weight, dim=-1)
        return self.scale * embeddings @ w.t()


class OracleEmbedder:
    """Hashes an image's identity label into a fixed unit vector.

    Depends only on identity_id, never on pixels, so tests of downstream
    machinery cannot be confounded by embedder quality.
    """

    def __init__(self, embed_dim: int = 64):
        self.embed_dim = embed_dim

    def __call__(self, face: DomainImage) -> torch.Tensor:
        if face.identity_id is None:
            raise SwapperError("oracle embedder needs an identity-labeled image")
        rng = np.random.default_rng(int(face.identity_id) * 7919 + 17)
        v = rng.standard_normal(self.embed_dim)
        v = v / np.linalg.norm(v)
        return torch.from_numpy(v).float()


def embed_identity(face: DomainImage, embedder) -> torch.Tensor:
    """Unit-norm identity embedding of an rgb face."""
    if isinstance(face, DomainImage) and face.domain != "rgb":
        raise SwapperError(f"identity embedding needs an rgb face, got '{face.domain}'")
    if isinstance(embedder, OracleEmbedder):
        return embedder(face)
    with torch.no_grad():
        was_training = embedder.training
        embedder.eval()
        e = embedder(to_tensor(face))[0]
        if was_training:
            embedder.train()
    return e


def swap(template: DomainImage, id_face: DomainImage, models) -> DomainImage:
    """Full identity swap: the template supplies domain, view and pose,
    id_face supplies the identity.

    models must provide bundle, bank, fusion_net, swapper and embedder
    (see pipeline.PipelineModels); a missing component raises.
    """
    for part in ("bundle", "bank", "fusion_net", "swapper", "embedder"):
        if getattr(models, part, None) is None:
            raise SwapperError(f"swap needs a trained '{part}' in the checkpoint")
    z_id = embed_identity(id_face, models.embedder)
    with torch.no_grad():
        z = encode(template, models.bundle)
        fused = fused_forward(z, models.bank, models.fusion_net)
        pixels = decode(fused, models.bundle, swapper=models.swapper, z_id=z_id)
    return DomainImage(pixels=pixels.numpy(), domain=template.domain,
                       view=template.view, identity_id=id_face.identity_id)
