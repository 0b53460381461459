"""Multi-task losses, mixed single/pairwise batches and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import TrainingConfig
from .datagen import Record
from .dataset import ClipStore
from .decoder import COMPARE_PROMPT, DESCRIBE_PROMPT, TOKENIZER
from .model import VQAModel, prompt_ids

log = logging.getLogger(__name__)

PAIRWISE, SINGLE = "PAIRWISE", "SINGLE"


class NonFiniteLoss(FloatingPointError):
    pass


# -- losses --------------------------------------------------------------------


def _t(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def loss_rank(pred1, pred2, q1, q2, margin: float = 0.0) -> torch.Tensor:
    """Pairwise hinge: mean of ``max(0, -(q1 - q2) * (pred1 - pred2))``.

    A positive ``margin`` asks for ``(q1 - q2)(pred1 - pred2) >= margin * |q1 - q2|``.
    """
    pred1 = _t(pred1)
    pred2, q1, q2 = _t(pred2, pred1), _t(q1, pred1), _t(q2, pred1)
    dq = q1 - q2
    return torch.relu(margin * dq.abs() - dq * (pred1 - pred2)).mean()


def loss_mse(pred1, q1, is_original) -> torch.Tensor:
    """Squared error on the first slot, averaged over slots holding an original."""
    pred1 = _t(pred1)
    q1 = _t(q1, pred1)
    ind = torch.as_tensor(is_original, dtype=torch.bool)
    sq = torch.where(ind, (q1 - pred1) ** 2, torch.zeros_like(pred1))
    return sq.sum() / max(int(ind.sum()), 1)


def loss_text(logits: torch.Tensor, labels: torch.Tensor, label_mask: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Token-level negative log-likelihood summed over targets, divided by total target length."""
    logp = torch.log_softmax(logits, dim=-1).gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    floor = math.log(eps)
    if bool(((logp < floor) & label_mask).any()):
        log.warning("target token probability below %g; clamping its log", eps)
    logp = logp.clamp(min=floor)
    n = label_mask.sum()
    return -(logp * label_mask).sum() / n.clamp(min=1)


def total_loss(l1, l2, l3, weights=(1.0, 1.0, 1.0)):
    w1, w2, w3 = weights
    if min(weights) < 0:
        raise ValueError("loss weights must be non-negative")
    return w1 * l1 + w2 * l2 + w3 * l3


# -- batches ---------------------------------------------------------------------


@dataclass
class QualityPair:
    video_a: Record
    video_b: Record
    q_a: float
    q_b: float
    a_is_original: bool
    caption_a: str
    caption_b: str
    pair_kind: str

    @property
    def b_is_pad(self) -> bool:
        return self.pair_kind == SINGLE


def single(rec: Record) -> QualityPair:
    return QualityPair(rec, rec, rec.mos, rec.mos, rec.is_original, rec.caption, rec.caption, SINGLE)


def pairwise(a: Record, b: Record) -> QualityPair:
    if a.source_id != b.source_id or a.severity == b.severity:
        raise ValueError("pairwise samples need two severities of the same source")
    return QualityPair(a, b, a.mos, b.mos, a.is_original, a.caption, b.caption, PAIRWISE)


def assemble_batch(sources: dict[str, list[Record]], cfg: TrainingConfig, rng: np.random.Generator) -> list[QualityPair]:
    """``round(mix * B)`` pairwise slots, the rest single originals.

    Which variant of a pair goes first is a coin flip, so originals reach
    the first slot (and the regression loss) at their natural rate.
    """
    if not sources:
        raise ValueError("empty dataset")
    ids = sorted(sources)
    n_pair = int(round(cfg.single_pair_mix * cfg.batch_size))
    out: list[QualityPair] = []
    while len(out) < n_pair:
        recs = sources[ids[rng.integers(len(ids))]]
        if len(recs) < 2:
            log.info("source %s has a single variant; resampling", recs[0].source_id)
            if all(len(r) < 2 for r in sources.values()):
                raise ValueError("no source has two variants to pair")
            continue
        i, j = rng.choice(len(recs), size=2, replace=False)
        a, b = recs[i], recs[j]
        if rng.random() < 0.5:
            a, b = b, a
        out.append(pairwise(a, b))
    originals = [next(r for r in sources[s] if r.is_original) for s in ids]
    while len(out) < cfg.batch_size:
        out.append(single(originals[rng.integers(len(originals))]))
    return out


# -- trainer ---------------------------------------------------------------------


class Trainer:
    def __init__(self, model: VQAModel, store: ClipStore, cfg: TrainingConfig, log_path: str | Path | None = None):
        cfg.validate()
        self.model = model
        self.store = store
        self.cfg = cfg
        model.configure_trainable(cfg.encoder_freeze_mode, cfg.decoder_mode)
        self.params = model.trainable_parameters()
        self.opt = torch.optim.Adam(self.params, lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
        self.rng = np.random.default_rng(cfg.seed)
        self.step_count = 0
        self.log_path = Path(log_path) if log_path else None
        self.sources = store.manifest.sources("train")
        self._prompts = {kind: prompt_ids(p) for kind, p in ((SINGLE, DESCRIBE_PROMPT), (PAIRWISE, COMPARE_PROMPT))}
        self._captions: dict[str, list[int]] = {}

    @property
    def dtype(self):
        return next(self.model.parameters()).dtype

    def _caption_ids(self, text: str) -> list[int]:
        if text not in self._captions:
            self._captions[text] = TOKENIZER.encode(text, eos=True)
        return self._captions[text]

    def compute_losses(self, pairs: list[QualityPair]) -> dict[str, torch.Tensor]:
        model, w = self.model, self.cfg.loss_weights
        index: dict[str, int] = {}
        recs: list[Record] = []
        for p in pairs:
            for r in (p.video_a,) if p.b_is_pad else (p.video_a, p.video_b):
                if r.clip_path not in index:
                    index[r.clip_path] = len(recs)
                    recs.append(r)
        high, low = self.store.stack(recs, self.dtype)
        u, v = model.encode(high, low)
        _, q = model.score(u, v)
        ia = torch.tensor([index[p.video_a.clip_path] for p in pairs])
        ib = torch.tensor([index[(p.video_a if p.b_is_pad else p.video_b).clip_path] for p in pairs])
        q1 = torch.tensor([p.q_a for p in pairs], dtype=q.dtype)
        q2 = torch.tensor([p.q_b for p in pairs], dtype=q.dtype)
        orig = torch.tensor([p.a_is_original for p in pairs])
        l1 = loss_rank(q[ia], q[ib], q1, q2, self.cfg.rank_margin)
        l2 = loss_mse(q[ia], q1, orig)
        if w[2] > 0:
            vis = model.visual_tokens(u, v)
            b_pad = torch.tensor([p.b_is_pad for p in pairs])
            prompts = torch.stack([self._prompts[p.pair_kind][0] for p in pairs])
            pvalid = torch.stack([self._prompts[p.pair_kind][1] for p in pairs])
            caps = [self._caption_ids(p.caption_a) for p in pairs]
            tmax = max(len(c) for c in caps)
            labels = torch.full((len(pairs), tmax), TOKENIZER.PAD, dtype=torch.long)
            for i, c in enumerate(caps):
                labels[i, : len(c)] = torch.tensor(c)
            lmask = labels != TOKENIZER.PAD
            logits = model.text_logits(vis[ia], vis[ib], b_pad, prompts, pvalid, labels[:, :-1], lmask[:, :-1])
            l3 = loss_text(logits, labels, lmask)
        else:
            l3 = torch.zeros((), dtype=q.dtype)
        return {"l1": l1, "l2": l2, "l3": l3, "total": total_loss(l1, l2, l3, w)}

    def train_step(self, pairs: list[QualityPair]) -> dict[str, float]:
        self.model.train()
        losses = self.compute_losses(pairs)
        if not torch.isfinite(losses["total"]):
            ids = sorted({p.video_a.clip_path for p in pairs} | {p.video_b.clip_path for p in pairs})
            raise NonFiniteLoss(f"non-finite loss at step {self.step_count}; samples: {ids}")
        self.opt.zero_grad(set_to_none=True)
        losses["total"].backward()
        self.opt.step()
        self.step_count += 1
        out = {k: float(v.detach()) for k, v in losses.items()}
        out["step"] = self.step_count
        out["lr"] = self.opt.param_groups[0]["lr"]
        return out

    def next_batch(self) -> list[QualityPair]:
        return assemble_batch(self.sources, self.cfg, self.rng)

    def total_steps(self) -> int:
        if self.cfg.epochs > 0:
            per_epoch = math.ceil(len(self.store.manifest.split("train")) / self.cfg.batch_size)
            return self.cfg.epochs * per_epoch
        return self.cfg.steps

    def fit(self, steps: int | None = None, callback=None) -> list[dict]:
        steps = self.total_steps() if steps is None else steps
        history = []
        t0 = time.time()
        fh = open(self.log_path, "a", encoding="utf-8") if self.log_path else None
        try:
            for _ in range(steps):
                rec = self.train_step(self.next_batch())
                history.append(rec)
                if fh:
                    fh.write(
                        f"{rec['step']} {rec['l1']:.6g} {rec['l2']:.6g} {rec['l3']:.6g} "
                        f"{rec['total']:.6g} {rec['lr']:.3g}\n"
                    )
                    fh.flush()
                if self.cfg.log_every and rec["step"] % self.cfg.log_every == 0:
                    log.info(
                        "step %d  l1 %.4f  l2 %.4f  l3 %.4f  total %.4f  (%.1fs)",
                        rec["step"], rec["l1"], rec["l2"], rec["l3"], rec["total"], time.time() - t0,
                    )
                if callback is not None:
                    callback(self, rec)
        finally:
            if fh:
                fh.close()
        return history
