"""The full model: two vision encoders, the quality head and the language decoder."""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import ModelConfig
from .decoder import (
    COMPARE_PROMPT,
    DESCRIBE_PROMPT,
    TOKENIZER,
    Decoder,
    Generation,
    generate,
    prefix_lm_mask,
)
from .encoders import HIGH, LOW, EmbeddingSequence, HighLevelEncoder, LowLevelEncoder
from .media import FrameBundle
from .quality_head import QualityHead, QualityScore, aggregate

PROMPT_LEN = max(len(TOKENIZER.encode(p, bos=True)) for p in (DESCRIBE_PROMPT, COMPARE_PROMPT))


def prompt_ids(text: str) -> tuple[torch.Tensor, torch.Tensor]:
    """Left-pad a prompt to a fixed length so both prompts end at the same position."""
    ids = TOKENIZER.encode(text, bos=True)
    if len(ids) > PROMPT_LEN:
        raise ValueError(f"prompt longer than {PROMPT_LEN} tokens")
    pad = PROMPT_LEN - len(ids)
    return (
        torch.tensor([TOKENIZER.PAD] * pad + ids),
        torch.tensor([False] * pad + [True] * len(ids)),
    )


class VQAModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.d_model
        m = cfg.media
        self.high = HighLevelEncoder(m.high_size, cfg.high, d)
        self.low = LowLevelEncoder(m.patch, m.num_patches, cfg.low, d)
        self.head = QualityHead(d, cfg.head_hidden or d, cfg.head_bias_init)
        self.decoder = Decoder(
            cfg.vocab_size, d, cfg.decoder_heads, cfg.decoder_mlp_dim,
            cfg.decoder_layers, cfg.context, cfg.lora_rank,
        )

    # -- vision + score --------------------------------------------------

    def encode(self, high: torch.Tensor, low: torch.Tensor):
        """``(B, M, 3, Hh, Wh)``, ``(B, M, K, 3, P, P)`` -> u ``(B, M, T_h, D)``, v ``(B, M, T_l, D)``."""
        b, m = high.shape[:2]
        u = self.high(high.flatten(0, 1))
        v = self.low(low.flatten(0, 1))
        return u.view(b, m, *u.shape[1:]), v.view(b, m, *v.shape[1:])

    def score(self, u: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        per_frame = self.head(u, v)
        return per_frame, per_frame.mean(dim=-1)

    @staticmethod
    def visual_tokens(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        """Interleave per key frame: ``[u_0, v_0, u_1, v_1, ...]`` -> ``(B, M*(T_h+T_l), D)``."""
        return torch.cat([u, v], dim=2).flatten(1, 2)

    def encode_video(self, bundle: FrameBundle) -> list[tuple[EmbeddingSequence, EmbeddingSequence]]:
        high, low = bundle.tensors()
        dtype = next(self.parameters()).dtype
        u, v = self.encode(high[None].to(dtype), low[None].to(dtype))
        return [
            (EmbeddingSequence(u[0, i], HIGH, i), EmbeddingSequence(v[0, i], LOW, i))
            for i in range(bundle.m)
        ]

    # -- text ------------------------------------------------------------

    def text_logits(self, vis_a, vis_b, b_pad, prompts, prompt_valid, tgt_in, tgt_valid):
        """Logits predicting each target token.

        Sequence layout is ``[video a, video b, prompt, target[:-1]]``; video b
        is masked out entirely where ``b_pad`` is set. Returns logits of shape
        ``(B, T_in + 1, V)`` aligned with the full target (caption + EOS).
        """
        bsz, nv = vis_a.shape[:2]
        dec = self.decoder
        x = torch.cat([vis_a, vis_b, dec.embed_text(prompts), dec.embed_text(tgt_in)], dim=1)
        ones = torch.ones(bsz, nv, dtype=torch.bool)
        valid = torch.cat([ones, ~b_pad[:, None].expand(bsz, nv), prompt_valid, tgt_valid], dim=1)
        prefix_len = 2 * nv + prompts.shape[1]
        mask = prefix_lm_mask(x.shape[1], prefix_len, valid)
        logits = dec(x, mask)
        return logits[:, prefix_len - 1 :]

    # -- inference -------------------------------------------------------

    @torch.no_grad()
    def assess(self, high, low, high_b=None, low_b=None, max_len: int = 256, prompt: str | None = None):
        """Score one clip (or two) and generate a description of the first.

        Returns ``(scores, generation)`` where ``scores`` holds one
        :class:`QualityScore` per input clip.
        """
        dtype = next(self.parameters()).dtype
        u, v = self.encode(high[None].to(dtype), low[None].to(dtype))
        per_a, _ = self.score(u, v)
        scores = [aggregate(per_a[0].tolist())]
        vis_a = self.visual_tokens(u, v)[0]
        if high_b is None:
            vis_b, pad = vis_a, True
            prompt = prompt or DESCRIBE_PROMPT
        else:
            ub, vb = self.encode(high_b[None].to(dtype), low_b[None].to(dtype))
            per_b, _ = self.score(ub, vb)
            scores.append(aggregate(per_b[0].tolist()))
            vis_b, pad = self.visual_tokens(ub, vb)[0], False
            prompt = prompt or COMPARE_PROMPT
        ids, pvalid = prompt_ids(prompt)
        prefix = torch.cat([vis_a, vis_b, self.decoder.embed_text(ids)])
        n = vis_a.shape[0]
        valid = torch.cat([torch.ones(n, dtype=torch.bool), torch.full((n,), not pad), pvalid])
        gen: Generation = generate(self.decoder, prefix, valid, max_len)
        return scores, gen

    # -- parameter groups -----------------------------------------------

    def configure_trainable(self, freeze_mode: str = "frozen", decoder_mode: str = "full") -> None:
        """Set ``requires_grad`` per the high-encoder freeze mode and decoder mode.

        ``frozen``: high-level ViT fixed; ``head``: only its last block and
        final norm train; ``all``: everything trains. The projection into the
        decoder width is always trainable.
        """
        for p in self.parameters():
            p.requires_grad_(True)
        vit = self.high.vit
        if freeze_mode in ("frozen", "head"):
            for p in vit.parameters():
                p.requires_grad_(False)
        if freeze_mode == "head":
            for p in list(vit.blocks[-1].parameters()) + list(vit.norm.parameters()):
                p.requires_grad_(True)
        if self.cfg.low.frozen:
            for p in self.low.vit.parameters():
                p.requires_grad_(False)
        if decoder_mode != "full":
            for name, p in self.decoder.named_parameters():
                p.requires_grad_(decoder_mode == "lora" and ".lora_" in name)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]
