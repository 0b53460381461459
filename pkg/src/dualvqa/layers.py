"""Transformer building blocks shared by the vision encoders and the decoder."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError


def apply_lora(base: torch.Tensor, a: torch.Tensor, b: torch.Tensor, scale: float) -> torch.Tensor:
    """Effective weight ``base + scale * a @ b``; ``base`` is never modified."""
    rank = a.shape[1]
    if rank > min(base.shape):
        raise ConfigError(f"LoRA rank {rank} exceeds min weight dim {min(base.shape)}")
    if a.shape[0] != base.shape[0] or b.shape != (rank, base.shape[1]):
        raise ConfigError(
            f"LoRA factors {tuple(a.shape)}x{tuple(b.shape)} incompatible with {tuple(base.shape)}"
        )
    return base + scale * (a @ b)


class LoRALinear(nn.Module):
    """A linear layer with a rank-R additive adapter on its weight.

    Scale is ``1 / rank``. ``a`` starts small-random and ``b`` at zero so the
    adapter is a no-op until trained.
    """

    def __init__(self, base: nn.Linear, rank: int):
        super().__init__()
        out_f, in_f = base.weight.shape
        if rank < 1 or rank > min(out_f, in_f):
            raise ConfigError(f"LoRA rank {rank} invalid for a {out_f}x{in_f} projection")
        self.base = base
        self.rank = rank
        self.scale = 1.0 / rank
        self.lora_a = nn.Parameter(torch.randn(out_f, rank) / math.sqrt(rank) * 0.02)
        self.lora_b = nn.Parameter(torch.zeros(rank, in_f))

    @property
    def weight(self) -> torch.Tensor:
        return apply_lora(self.base.weight, self.lora_a, self.lora_b, self.scale)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.base(x)
        return out + self.scale * F.linear(F.linear(x, self.lora_b), self.lora_a)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, lora_rank: int = 0):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        if lora_rank:
            self.q = LoRALinear(self.q, lora_rank)
            self.k = LoRALinear(self.k, lora_rank)
            self.v = LoRALinear(self.v, lora_rank)
        self.out = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, s, _ = x.shape
        return x.view(b, s, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, mask=None, cache=None):
        """``mask`` is boolean ``(B, Sq, Sk)``, True where attention is allowed.

        With ``cache`` (a dict), keys/values are appended to it and the query
        attends over everything cached so far.
        """
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        if cache is not None:
            if "k" in cache:
                k = torch.cat([cache["k"], k], dim=2)
                v = torch.cat([cache["v"], v], dim=2)
            cache["k"], cache["v"] = k, v
        if mask is not None:
            # rows with no allowed key (padding) would softmax to NaN; let them
            # attend everywhere instead. Nothing ever attends to them.
            mask = (mask | ~mask.any(dim=-1, keepdim=True))[:, None]
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        y = y.transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        return self.out(y)


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_dim: int, lora_rank: int = 0):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, lora_rank)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_dim)

    def forward(self, x, mask=None, cache=None):
        x = x + self.attn(self.ln1(x), mask, cache)
        return x + self.mlp(self.ln2(x))
