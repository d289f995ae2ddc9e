"""Quantized autoencoder: encoder, codebook, quantizer, decoder.

Latent grids are channels-last ``(h, w, d)`` (or ``(B, h, w, d)``) tensors
at the public API; images are ``(H, W, 3)`` in [0, 1]. The decoder exposes
its per-stage feature taps (small to large) so identity-injection branches
can add residuals after each upsampling step.
"""

from __future__ import annotations

from dataclasses import asdict

import numpy as np
import torch
from torch import nn

from .checkpoint import load_container, save_container
from .config import ArchConfig
from .datagen import DomainImage


class VQCoreError(ValueError):
    """Shape or wiring mismatch in the autoencoder."""


def to_tensor(image) -> torch.Tensor:
    """DomainImage / numpy / tensor -> float32 (H, W, 3) tensor."""
    if isinstance(image, DomainImage):
        image = image.pixels
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image))
    return image.float()


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x):
        h = self.conv1(self.act(self.norm1(x)))
        h = self.conv2(self.act(self.norm2(h)))
        return self.skip(x) + h


class Encoder(nn.Module):
    """Downsamples by 2 per stage; len(channel_mult) stages.

    Each stage halves resolution first and runs its residual blocks at
    the reduced size, which keeps full-resolution work to the stem."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        chans = [arch.base_channels * m for m in arch.channel_mult]
        self.stem = nn.Conv2d(3, chans[0], 3, padding=1)
        stages = []
        prev = chans[0]
        for c in chans:
            down = nn.Conv2d(prev, c, 3, stride=2, padding=1)
            blocks = [ResBlock(c, c, arch.norm_groups) for _ in range(arch.res_blocks_per_stage)]
            stages.append(nn.ModuleList([down, nn.Sequential(*blocks)]))
            prev = c
        self.stages = nn.ModuleList(stages)
        self.head = nn.Sequential(
            nn.GroupNorm(arch.norm_groups, chans[-1]), nn.SiLU(),
            nn.Conv2d(chans[-1], arch.latent_dim, 1),
        )

    def forward(self, x):
        h = self.stem(x)
        for down, blocks in self.stages:
            h = blocks(down(h))
        return self.head(h)


class Decoder(nn.Module):
    """Mirror of the encoder with exposed multi-scale taps.

    ``tap_scales`` lists the spatial size of the feature grid captured
    right before each upsampling step, ordered small to large; a swapper
    adds its identity-conditioned residual to the upsampled feature.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        chans = [arch.base_channels * m for m in arch.channel_mult]
        rev = list(reversed(chans))                       # e.g. [64, 64, 32]
        self.stem = nn.Conv2d(arch.latent_dim, rev[0], 1)
        self.stage_channels = []
        stages = []
        for i, c in enumerate(rev):
            blocks = [ResBlock(c, c, arch.norm_groups) for _ in range(arch.res_blocks_per_stage)]
            nxt = rev[min(i + 1, len(rev) - 1)]
            up = nn.Conv2d(c, nxt, 3, padding=1)
            stages.append(nn.ModuleList([nn.Sequential(*blocks), up]))
            self.stage_channels.append((c, nxt))
        self.stages = nn.ModuleList(stages)
        self.head = nn.Sequential(
            nn.GroupNorm(arch.norm_groups, rev[-1]), nn.SiLU(),
            nn.Conv2d(rev[-1], 3, 3, padding=1),
        )
        base = arch.image_size // arch.compression
        self.tap_scales = [base * (2 ** i) for i in range(len(rev))]

    def forward(self, z_q, swapper=None, z_id=None, want_taps=False):
        h = self.stem(z_q)
        taps = []
        for i, (blocks, up) in enumerate(self.stages):
            h = blocks(h)
            taps.append(h)
            h = up(nn.functional.interpolate(h, scale_factor=2, mode="nearest"))
            if swapper is not None and self.tap_scales[i] in swapper.scales:
                h = h + swapper.branch_at(self.tap_scales[i])(taps[-1], z_id)
        out = torch.sigmoid(self.head(h))
        if want_taps:
            return out, taps
        return out


class Codebook(nn.Module):
    """N learnable code vectors of width d, tagged with a domain."""

    def __init__(self, size: int, dim: int, domain: str = "shared"):
        super().__init__()
        if size < 2:
            raise VQCoreError("codebook needs at least 2 codes")
        self.codes = nn.Parameter(torch.empty(size, dim).uniform_(-1.0 / size, 1.0 / size))
        self.domain = domain

    @property
    def size(self):
        return self.codes.shape[0]

    @property
    def dim(self):
        return self.codes.shape[1]


def _codes_of(cb) -> torch.Tensor:
    return cb.codes if isinstance(cb, Codebook) else cb


def quantize(z: torch.Tensor, codebook, chunk: int = 4096):
    """Replace each latent cell by its nearest code (squared Euclidean).

    Ties break toward the lowest code index. Returns ``(quantized,
    indices)`` with quantized shaped like z and indices shaped like its
    cell grid.
    """
    codes = _codes_of(codebook)
    if z.shape[-1] != codes.shape[1]:
        raise VQCoreError(
            f"latent dim {z.shape[-1]} does not match codebook dim {codes.shape[1]}")
    flat = z.reshape(-1, z.shape[-1])
    idx_parts = []
    for start in range(0, flat.shape[0], chunk):
        part = flat[start:start + chunk]
        diff = part.detach().unsqueeze(1) - codes.detach().unsqueeze(0)
        d = diff.mul_(diff).sum(-1)
        idx_parts.append(d.argmin(dim=1))
    indices = torch.cat(idx_parts) if idx_parts else flat.new_empty((0,), dtype=torch.long)
    quantized = codes[indices].reshape(z.shape)
    return quantized, indices.reshape(z.shape[:-1])


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z, z_q):
        return z_q.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def straight_through(z: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    """Forward value is exactly z_q; gradients pass unchanged to z.

    The quantized side receives no gradient through this path (the
    codebook is trained by the code loss instead).
    """
    if z.shape != z_q.shape:
        raise VQCoreError(f"shape mismatch {tuple(z.shape)} vs {tuple(z_q.shape)}")
    return _StraightThrough.apply(z, z_q)


def codebook_stats(indices: torch.Tensor, codebook_size: int):
    """Usage histogram and perplexity of a batch of code indices."""
    flat = indices.reshape(-1)
    if flat.numel() == 0:
        raise VQCoreError("codebook_stats needs a non-empty batch")
    hist = torch.bincount(flat, minlength=codebook_size).float()
    p = hist / hist.sum()
    entropy = -(p[p > 0] * p[p > 0].log()).sum()
    return hist, float(entropy.exp())


class ModelBundle:
    """Encoder + decoder + shared codebook + the architecture they assume."""

    def __init__(self, arch: ArchConfig, seed: int = 0):
        self.arch = arch
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.encoder = Encoder(arch)
            self.decoder = Decoder(arch)
            self.codebook = Codebook(arch.codebook_size, arch.latent_dim, domain="shared")

    def modules(self) -> dict:
        return {"encoder": self.encoder, "decoder": self.decoder, "codebook": self.codebook}

    def eval(self):
        for m in self.modules().values():
            m.eval()
        return self

    def state_arrays(self, prefix: str = "") -> dict:
        out = {}
        for name, module in self.modules().items():
            for k, v in module.state_dict().items():
                out[f"{prefix}{name}.{k}"] = v.detach().cpu().numpy()
        return out

    def load_state_arrays(self, arrays: dict, prefix: str = ""):
        for name, module in self.modules().items():
            sd = {}
            for k in module.state_dict():
                key = f"{prefix}{name}.{k}"
                if key not in arrays:
                    raise VQCoreError(f"checkpoint missing tensor '{key}'")
                sd[k] = torch.from_numpy(np.ascontiguousarray(arrays[key]))
            module.load_state_dict(sd)
        return self

    def save(self, path):
        return save_container(path, self.state_arrays(), config={"arch": asdict(self.arch)})

    @classmethod
    def load(cls, path) -> "ModelBundle":
        arrays, cfg = load_container(path)
        arch_cfg = dict(cfg["arch"])
        arch_cfg["channel_mult"] = tuple(arch_cfg["channel_mult"])
        if arch_cfg.get("inject_scales") is not None:
            arch_cfg["inject_scales"] = tuple(arch_cfg["inject_scales"])
        bundle = cls(ArchConfig(**arch_cfg))
        bundle.load_state_arrays(arrays)
        return bundle


def _as_batched_image(image, arch: ArchConfig):
    x = to_tensor(image)
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    if x.shape[1] != arch.image_size or x.shape[2] != arch.image_size or x.shape[3] != 3:
        raise VQCoreError(
            f"expected {arch.image_size}x{arch.image_size}x3 image, got {tuple(x.shape[1:])}")
    return x.permute(0, 3, 1, 2), single


def encode(image, model: ModelBundle) -> torch.Tensor:
    """Image(s) -> latent grid(s), channels-last."""
    x, single = _as_batched_image(image, model.arch)
    z = model.encoder(x).permute(0, 2, 3, 1)
    return z[0] if single else z


def decode(z_q: torch.Tensor, model: ModelBundle, want_taps: bool = False,
           swapper=None, z_id=None):
    """Latent grid(s) -> image(s) in [0, 1]; optionally multi-scale taps."""
    single = z_q.dim() == 3
    if single:
        z_q = z_q.unsqueeze(0)
    h = model.arch.image_size // model.arch.compression
    if z_q.shape[1] != h or z_q.shape[2] != h or z_q.shape[3] != model.arch.latent_dim:
        raise VQCoreError(
            f"expected {h}x{h}x{model.arch.latent_dim} latent, got {tuple(z_q.shape[1:])}")
    out = model.decoder(z_q.permute(0, 3, 1, 2), swapper=swapper, z_id=z_id,
                        want_taps=want_taps)
    taps = None
    if want_taps:
        out, taps = out
    pixels = out.permute(0, 2, 3, 1)
    if single:
        pixels = pixels[0]
    return (pixels, taps) if want_taps else pixels
