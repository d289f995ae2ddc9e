"""Multi-domain codebook machinery: the domain codebook bank, per-cell
fusion-weight prediction, and the weighted code fusion itself.

The fused latent at each cell is a convex combination of that cell's
nearest codes from the K domain-specific books, with weights predicted
per cell by a small self-attention stack over the latent tokens.
"""

from __future__ import annotations

import copy

import numpy as np
import torch
from torch import nn

from . import BANK_ORDER
from .config import ArchConfig
from .vqcore import Codebook, VQCoreError, quantize


class FusionError(ValueError):
    pass


class CodebookBank(nn.Module):
    """The K=5 domain-specific codebooks in fixed order."""

    def __init__(self, size: int, dim: int):
        super().__init__()
        self.books = nn.ModuleDict({d: Codebook(size, dim, domain=d) for d in BANK_ORDER})

    @classmethod
    def from_shared(cls, shared: Codebook) -> "CodebookBank":
        """Start every domain book from the stage-1 shared codebook."""
        bank = cls(shared.size, shared.dim)
        for name in BANK_ORDER:
            bank.books[name].codes.data.copy_(shared.codes.data)
        return bank

    def __len__(self):
        return len(BANK_ORDER)

    def __getitem__(self, key) -> Codebook:
        if isinstance(key, int):
            key = BANK_ORDER[key]
        return self.books[key]

    @property
    def dim(self):
        return self[0].dim


def multi_quantize(z: torch.Tensor, bank: CodebookBank) -> list:
    """Quantize one latent grid against every book in the bank."""
    return [quantize(z, bank[k])[0] for k in range(len(bank))]


class AttentionBlock(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, width * 2), nn.GELU(), nn.Linear(width * 2, width))

    def forward(self, tokens):
        h = self.norm1(tokens)
        tokens = tokens + self.attn(h, h, h, need_weights=False)[0]
        return tokens + self.mlp(self.norm2(tokens))


class FusionNet(nn.Module):
    """Predicts a per-cell simplex over the K books from the continuous
    latent. Token-wise self-attention, terminal K-way softmax."""

    def __init__(self, arch: ArchConfig, seed: int = 0):
        super().__init__()
        self.grid = arch.image_size // arch.compression
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.proj = nn.Linear(arch.latent_dim, arch.fusion_width)
            self.pos = nn.Parameter(torch.zeros(1, self.grid * self.grid, arch.fusion_width))
            nn.init.normal_(self.pos, std=0.02)
            self.blocks = nn.ModuleList(
                AttentionBlock(arch.fusion_width, arch.fusion_heads)
                for _ in range(arch.fusion_blocks))
            self.head = nn.Sequential(
                nn.LayerNorm(arch.fusion_width),
                nn.Linear(arch.fusion_width, len(BANK_ORDER)))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        single = z.dim() == 3
        if single:
            z = z.unsqueeze(0)
        b, h, w, d = z.shape
        if h != self.grid or w != self.grid:
            raise FusionError(f"expected {self.grid}x{self.grid} latent, got {h}x{w}")
        tokens = self.proj(z.reshape(b, h * w, d)) + self.pos
        for block in self.blocks:
            tokens = block(tokens)
        weights = torch.softmax(self.head(tokens), dim=-1).reshape(b, h, w, len(BANK_ORDER))
        return weights[0] if single else weights


def predict_weights(z: torch.Tensor, fusion_net: FusionNet) -> torch.Tensor:
    return fusion_net(z)


def fuse(z_q_list, weights: torch.Tensor) -> torch.Tensor:
    """Per-cell convex combination of the K quantized grids (Eq. of the
    weighted code fusion): out[..., :] = sum_k w[..., k] * z_qk[..., :]."""
    k = weights.shape[-1]
    if len(z_q_list) != k:
        raise FusionError(f"{len(z_q_list)} grids but {k} weight channels")
    for zq in z_q_list:
        if zq.shape != z_q_list[0].shape:
            raise FusionError("quantized grids disagree in shape")
    if weights.shape[:-1] != z_q_list[0].shape[:-1]:
        raise FusionError(
            f"weight grid {tuple(weights.shape[:-1])} does not match "
            f"latent grid {tuple(z_q_list[0].shape[:-1])}")
    stacked = torch.stack(z_q_list, dim=-1)          # (..., d, K)
    return (stacked * weights.unsqueeze(-2)).sum(-1)


def weight_summary(weights: torch.Tensor) -> np.ndarray:
    """Mean weight per book over all cells; sums to 1. Reported per domain
    so cross-domain codebook usage can be inspected."""
    w = weights.detach().reshape(-1, weights.shape[-1])
    return w.mean(0).cpu().numpy()


def fused_forward(image_latent: torch.Tensor, bank: CodebookBank,
                  fusion_net: FusionNet) -> torch.Tensor:
    """Latent -> fused quantized latent (the stage-2 inference path)."""
    return fuse(multi_quantize(image_latent, bank), predict_weights(image_latent, fusion_net))
