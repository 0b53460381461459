"""Per-frame quality regressor and the key-frame average."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .encoders import HIGH, LOW, EmbeddingSequence

SCORE_MIN, SCORE_MAX = 1.0, 5.0


class QualityHead(nn.Module):
    """Mean over the concatenated token axis, then Linear -> ReLU -> Linear."""

    def __init__(self, dim: int, hidden: int | None = None, bias_init: float = 0.0):
        super().__init__()
        hidden = hidden or dim
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        nn.init.constant_(self.fc2.bias, bias_init)

    def forward(self, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        """``u`` (..., T_h, D) and ``v`` (..., T_l, D) -> score of shape (...)."""
        if u.shape[-1] != v.shape[-1]:
            raise ValueError(f"embedding dims differ: {u.shape[-1]} vs {v.shape[-1]}")
        pooled = torch.cat([u, v], dim=-2).mean(dim=-2)
        return self.fc2(torch.relu(self.fc1(pooled))).squeeze(-1)


@dataclass
class QualityScore:
    value: float
    raw: float
    per_frame: list[float]


def calibrate(x):
    if isinstance(x, torch.Tensor):
        return x.clamp(SCORE_MIN, SCORE_MAX)
    return min(max(float(x), SCORE_MIN), SCORE_MAX)


def score_frame(head: QualityHead, u: EmbeddingSequence, v: EmbeddingSequence) -> torch.Tensor:
    if u.segment != HIGH or v.segment != LOW:
        raise ValueError(f"expected (HIGH, LOW) segments, got ({u.segment}, {v.segment})")
    return head(u.tokens, v.tokens)


def aggregate(per_frame: list[float]) -> QualityScore:
    if not per_frame:
        raise ValueError("need at least one key frame")
    per_frame = [float(x) for x in per_frame]
    raw = sum(per_frame) / len(per_frame)
    value = sum(calibrate(x) for x in per_frame) / len(per_frame)
    return QualityScore(value=value, raw=raw, per_frame=per_frame)


@torch.no_grad()
def score_video(head: QualityHead, pairs: list[tuple[EmbeddingSequence, EmbeddingSequence]]) -> QualityScore:
    return aggregate([float(score_frame(head, u, v)) for u, v in pairs])
