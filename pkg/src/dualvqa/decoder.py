"""Prefix-LM language decoder, byte tokenizer and greedy generation."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .encoders import TEXT, EmbeddingSequence
from .layers import Block

DESCRIBE_PROMPT = (
    "Based on the provided video frames, create a three-sentence summary. "
    "First, describe the visual content of the video in detail. "
    "Second, identify the style of the video. "
    "Third, assess the technical quality."
)
# Our own template for the two-video input; nothing upstream fixes its wording.
COMPARE_PROMPT = (
    "Two videos are provided. Compare their technical quality and "
    "describe the first video in three sentences."
)


class NumericError(FloatingPointError):
    pass


class ContextOverflow(ValueError):
    pass


class ByteTokenizer:
    """256 byte tokens plus PAD, BOS and EOS."""

    PAD, BOS, EOS = 256, 257, 258
    vocab_size = 259

    def encode(self, text: str, bos: bool = False, eos: bool = False) -> list[int]:
        ids = list(text.encode("utf-8"))
        return ([self.BOS] if bos else []) + ids + ([self.EOS] if eos else [])

    def decode(self, ids) -> str:
        data = bytes(int(i) for i in ids if int(i) < 256)
        return data.decode("utf-8", errors="replace")


TOKENIZER = ByteTokenizer()


@dataclass
class AttentionMask:
    matrix: torch.Tensor  # (S, S) bool, True = may attend
    prefix_len: int
    valid: torch.Tensor  # (S,) bool, False for padding positions


def prefix_lm_mask(length: int, prefix_len: int, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Bidirectional over ``[0, prefix_len)``, causal afterwards.

    ``valid`` may be ``(S,)`` or batched ``(B, S)``; invalid positions get
    all-False rows and columns.
    """
    idx = torch.arange(length)
    m = (idx[None, :] <= idx[:, None]) | (idx[None, :] < prefix_len)
    if valid is None:
        return m
    return m & valid[..., :, None] & valid[..., None, :]


class Decoder(nn.Module):
    def __init__(self, vocab: int, dim: int, heads: int, mlp_dim: int, layers: int, context: int, lora_rank: int):
        super().__init__()
        self.context = context
        self.embed = nn.Embedding(vocab, dim)
        nn.init.normal_(self.embed.weight, std=0.02)
        self.pos = nn.Parameter(torch.randn(context, dim) * 0.02)
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_dim, lora_rank) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)
        self.lm_head = nn.Linear(dim, vocab)

    def embed_text(self, ids) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.embed.num_embeddings):
            raise ValueError(f"token id out of range [0, {self.embed.num_embeddings})")
        return self.embed(ids)

    def forward(self, x: torch.Tensor, mask: torch.Tensor, caches=None, start: int = 0) -> torch.Tensor:
        """Logits ``(B, S, V)`` for embeddings ``x`` ``(B, S, D)`` placed at ``start``."""
        s = x.shape[1]
        if start + s > self.context:
            raise ContextOverflow(f"sequence length {start + s} exceeds decoder context {self.context}")
        h = x + self.pos[start : start + s]
        for i, blk in enumerate(self.blocks):
            h = blk(h, mask, None if caches is None else caches[i])
            if not torch.isfinite(h).all():
                raise NumericError(f"non-finite activations after decoder layer {i}")
        return self.lm_head(self.norm(h))


def build_prefix_sequence(
    visuals: list[EmbeddingSequence],
    prompt: torch.Tensor,
    target: torch.Tensor | None = None,
    pad_blocks=(),
    context: int | None = None,
):
    """Lay out ``[visual blocks..., prompt, target]`` with a prefix-LM mask.

    ``prompt`` and ``target`` are already-embedded ``(L, D)`` tensors. Visual
    blocks whose index is in ``pad_blocks`` are kept in place but masked out of
    every row and column.
    """
    dims = {v.dim for v in visuals} | {prompt.shape[-1]}
    if target is not None:
        dims.add(target.shape[-1])
    if len(dims) != 1:
        raise ValueError(f"embedding dims disagree: {sorted(dims)}")
    parts = [v.tokens for v in visuals] + [prompt]
    valid = [torch.full((v.length,), i not in pad_blocks) for i, v in enumerate(visuals)]
    valid.append(torch.ones(prompt.shape[0], dtype=torch.bool))
    prefix_len = sum(p.shape[0] for p in parts)
    if target is not None:
        parts.append(target)
        valid.append(torch.ones(target.shape[0], dtype=torch.bool))
    seq = torch.cat(parts, dim=0)
    if context is not None and seq.shape[0] > context:
        raise ContextOverflow(f"sequence length {seq.shape[0]} exceeds decoder context {context}")
    valid = torch.cat(valid)
    mask = prefix_lm_mask(seq.shape[0], prefix_len, valid)
    return seq, AttentionMask(mask, prefix_len, valid), prefix_len


@dataclass
class Generation:
    ids: list[int]
    text: str
    truncated: bool = False


@torch.no_grad()
def generate(
    decoder: Decoder,
    prefix: torch.Tensor,
    prefix_valid: torch.Tensor,
    max_len: int,
    strategy: str = "greedy",
    temperature: float = 1.0,
    generator: torch.Generator | None = None,
) -> Generation:
    """Autoregressive decoding from an embedded prefix ``(S, D)`` with a KV cache."""
    if max_len <= 0:
        return Generation([], "")
    if strategy not in ("greedy", "sample"):
        raise ValueError(f"unknown decoding strategy {strategy!r}")
    s = prefix.shape[0]
    if s > decoder.context:
        raise ContextOverflow(f"prefix length {s} exceeds decoder context {decoder.context}")
    caches = [{} for _ in decoder.blocks]
    mask = prefix_lm_mask(s, s, prefix_valid)[None]
    logits = decoder(prefix[None], mask, caches)[0, -1]
    key_valid = prefix_valid.clone()
    out: list[int] = []
    truncated = False
    while True:
        if strategy == "greedy":
            tok = int(logits.argmax())
        else:
            probs = torch.softmax(logits / temperature, dim=-1)
            tok = int(torch.multinomial(probs, 1, generator=generator))
        if tok == TOKENIZER.EOS:
            break
        out.append(tok)
        if len(out) >= max_len:
            break
        pos = s + len(out) - 1
        if pos >= decoder.context:
            truncated = True
            break
        key_valid = torch.cat([key_valid, torch.ones(1, dtype=torch.bool)])
        step_emb = decoder.embed_text([tok])[None]
        logits = decoder(step_emb, key_valid[None, None, :], caches, start=pos)[0, -1]
    return Generation(out, TOKENIZER.decode(out), truncated)


def text_sequence(ids, decoder: Decoder, frame_index: int = 0) -> EmbeddingSequence:
    return EmbeddingSequence(decoder.embed_text(ids), TEXT, frame_index)
