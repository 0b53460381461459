"""High-level (context) and low-level (pixel) vision encoders.

Both are small vision transformers trained from scratch. The high-level
encoder sees the whole frame squashed to a fixed size; the low-level encoder
sees K native-resolution patches and pools them into one token sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError, EncoderConfig
from .layers import Block

HIGH, LOW, TEXT = "HIGH", "LOW", "TEXT"


@dataclass
class EmbeddingSequence:
    tokens: torch.Tensor  # (T, D)
    segment: str
    frame_index: int = 0

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValueError(f"tokens must be T x D, got shape {tuple(self.tokens.shape)}")
        if self.segment not in (HIGH, LOW, TEXT):
            raise ValueError(f"unknown segment {self.segment!r}")

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


class ViT(nn.Module):
    """Patch-token vision transformer with learned positional embeddings."""

    def __init__(self, image_size: tuple[int, int], cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        h, w = image_size
        p = cfg.patch_embed_size
        if h % p or w % p:
            raise ConfigError(f"image {h}x{w} not divisible by patch_embed_size={p}")
        self.image_size = (h, w)
        self.num_tokens = (h // p) * (w // p)
        self.embed = nn.Conv2d(3, cfg.model_dim, kernel_size=p, stride=p)
        self.pos = nn.Parameter(torch.randn(1, self.num_tokens, cfg.model_dim) * 0.02)
        self.blocks = nn.ModuleList(
            Block(cfg.model_dim, cfg.heads, cfg.mlp_dim) for _ in range(cfg.layers)
        )
        self.norm = nn.LayerNorm(cfg.model_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-2:]) != self.image_size or x.shape[-3] != 3:
            raise ConfigError(
                f"expected images of shape (3, {self.image_size[0]}, {self.image_size[1]}), "
                f"got {tuple(x.shape[-3:])}"
            )
        t = self.embed(x).flatten(2).transpose(1, 2) + self.pos
        for blk in self.blocks:
            t = blk(t)
        return self.norm(t)


class HighLevelEncoder(nn.Module):
    def __init__(self, image_size: tuple[int, int], cfg: EncoderConfig, d_model: int):
        super().__init__()
        self.vit = ViT(image_size, cfg)
        self.proj = nn.Linear(cfg.model_dim, d_model)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """``(B, 3, Hh, Wh)`` -> ``(B, T_h, D)``."""
        return self.proj(self.vit(frames))


class LowLevelEncoder(nn.Module):
    """Encode each patch, project to D, average over patches, layer-normalize."""

    def __init__(self, patch: int, num_patches: int, cfg: EncoderConfig, d_model: int):
        super().__init__()
        self.num_patches = num_patches
        self.vit = ViT((patch, patch), cfg)
        self.proj = nn.Linear(cfg.model_dim, d_model)
        self.norm_weight = nn.Parameter(torch.ones(d_model))
        self.norm_bias = nn.Parameter(torch.zeros(d_model))

    def pooled(self, patches: torch.Tensor) -> torch.Tensor:
        """Patch-averaged projection, normalized but before the learned affine."""
        if patches.ndim != 5 or patches.shape[1] != self.num_patches:
            raise ValueError(
                f"expected (B, {self.num_patches}, 3, P, P) patches, got {tuple(patches.shape)}"
            )
        b, k = patches.shape[:2]
        h = self.proj(self.vit(patches.flatten(0, 1)))
        h = h.view(b, k, *h.shape[1:]).mean(dim=1)
        # small eps keeps rows at unit variance even when features are tiny
        return F.layer_norm(h, h.shape[-1:], eps=1e-6)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        """``(B, K, 3, P, P)`` -> ``(B, T_l, D)``."""
        return self.pooled(patches) * self.norm_weight + self.norm_bias


def encode_high(encoder: HighLevelEncoder, frame: torch.Tensor, frame_index: int = 0) -> EmbeddingSequence:
    """Single-frame convenience wrapper around :class:`HighLevelEncoder`."""
    return EmbeddingSequence(encoder(frame[None])[0], HIGH, frame_index)


def encode_low(encoder: LowLevelEncoder, patches: torch.Tensor, frame_index: int = 0) -> EmbeddingSequence:
    if patches.ndim != 4:
        raise ValueError(f"expected (K, 3, P, P) patches, got {tuple(patches.shape)}")
    return EmbeddingSequence(encoder(patches[None])[0], LOW, frame_index)
