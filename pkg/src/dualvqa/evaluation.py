"""SRCC / PLCC / flip rate and the benchmark report."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .datagen import DatasetManifest, Record
from .dataset import ClipStore

log = logging.getLogger(__name__)

DEFAULT_DIFFS = (2, 4, 6, 8, 10, 20)


class MetricError(ValueError):
    pass


def _check(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 1:
        raise MetricError(f"pred and gt must be equal-length vectors, got {p.shape} and {g.shape}")
    if p.size < 2:
        raise MetricError("need at least two items")
    return p, g


def rankdata(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    start = 0
    n = len(x)
    while start < n:
        stop = start + 1
        while stop < n and sx[stop] == sx[start]:
            stop += 1
        ranks[order[start:stop]] = 0.5 * (start + stop - 1) + 1.0
        start = stop
    return ranks


def _pearson(p: np.ndarray, g: np.ndarray) -> float:
    pc, gc = p - p.mean(), g - g.mean()
    sp, sg = np.sqrt(np.dot(pc, pc)), np.sqrt(np.dot(gc, gc))
    if sp == 0 or sg == 0:
        raise MetricError("correlation undefined for constant input")
    r = float(np.dot(pc, gc) / (sp * sg))
    return max(-1.0, min(1.0, r))


def srcc(pred, gt) -> float:
    p, g = _check(pred, gt)
    return _pearson(rankdata(p), rankdata(g))


def logistic_fit(pred, gt) -> np.ndarray:
    """Map predictions through a fitted 4-parameter logistic."""
    from scipy.optimize import curve_fit

    p, g = _check(pred, gt)

    def f(x, b1, b2, b3, b4):
        return (b1 - b2) / (1.0 + np.exp(-(x - b3) / np.abs(b4))) + b2

    p0 = [g.max(), g.min(), float(np.mean(p)), float(np.std(p)) or 1.0]
    params, _ = curve_fit(f, p, g, p0=p0, maxfev=20000)
    return f(p, *params)


def plcc(pred, gt, logistic: bool = False) -> float:
    p, g = _check(pred, gt)
    if logistic:
        p = logistic_fit(p, g)
    return _pearson(p, g)


def flip_rate(pairs: Sequence[tuple[float, float]], ties_as_flips: bool = True) -> float:
    """Share of ``(score_low_severity, score_high_severity)`` pairs that are misordered.

    With ``ties_as_flips`` a tie counts as a flip; otherwise ties are dropped.
    """
    if len(pairs) == 0:
        raise MetricError("flip rate of an empty pair list")
    arr = np.asarray(pairs, dtype=np.float64)
    lo, hi = arr[:, 0], arr[:, 1]
    if ties_as_flips:
        return float(np.mean(lo <= hi))
    keep = lo != hi
    if not keep.any():
        raise MetricError("all pairs tied")
    return float(np.mean(lo[keep] < hi[keep]))


def build_diff_pairs(records: Sequence[Record], diffs: Sequence[int]) -> dict[int, list[tuple[Record, Record]]]:
    """All intra-source ``(lower severity, higher severity)`` pairs exactly ``d`` apart."""
    by_source: dict[str, dict[int, Record]] = {}
    for r in records:
        by_source.setdefault(r.source_id, {})[r.severity] = r
    out: dict[int, list[tuple[Record, Record]]] = {}
    for d in diffs:
        bucket = []
        for sid in sorted(by_source):
            ladder = by_source[sid]
            for s in sorted(ladder):
                if s + d in ladder:
                    bucket.append((ladder[s], ladder[s + d]))
        if not bucket:
            log.warning("no pairs with severity difference %d", d)
        out[d] = bucket
    return out


@dataclass
class EvalReport:
    dataset_id: str
    srcc: float | None
    plcc: float | None
    fr_by_diff: dict[int, float | None]
    n_items: int
    n_pairs: int
    dmos_srcc: float | None = None
    dmos_plcc: float | None = None
    n_skipped: int = 0
    errors: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fr_by_diff"] = {str(k): v for k, v in self.fr_by_diff.items()}
        return d

    def render(self) -> str:
        def fmt(x):
            return "n/a" if x is None else f"{x:.6f}"

        lines = [
            f"dataset_id: {self.dataset_id}",
            f"srcc: {fmt(self.srcc)}",
            f"plcc: {fmt(self.plcc)}",
            f"dmos_srcc: {fmt(self.dmos_srcc)}",
            f"dmos_plcc: {fmt(self.dmos_plcc)}",
        ]
        lines += [f"fr_diff_{d}: {fmt(v)}" for d, v in self.fr_by_diff.items()]
        lines += [f"n_items: {self.n_items}", f"n_pairs: {self.n_pairs}", f"n_skipped: {self.n_skipped}"]
        lines += [f"error: {e}" for e in self.errors]
        lines += ["--- json ---", json.dumps(self.to_dict(), sort_keys=True)]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "EvalReport":
        blob = json.loads(text.split("--- json ---", 1)[1])
        blob["fr_by_diff"] = {int(k): v for k, v in blob["fr_by_diff"].items()}
        return cls(**blob)


Scorer = Callable[[list[Record]], Sequence[float]]


def model_scorer(model, store: ClipStore, batch: int = 32) -> Scorer:
    """Raw (unclamped) mean-over-key-frame scores from ``model``."""

    @torch.no_grad()
    def score(recs: list[Record]) -> list[float]:
        model.eval()
        dtype = next(model.parameters()).dtype
        out: list[float] = []
        for i in range(0, len(recs), batch):
            high, low = store.stack(recs[i : i + batch], dtype)
            u, v = model.encode(high, low)
            out.extend(model.score(u, v)[1].tolist())
        return out

    return score


def _safe(fn, errors: list[str], label: str):
    try:
        return fn()
    except MetricError as exc:
        errors.append(f"{label}: {exc}")
        return None


def evaluate_scores(
    records: list[Record],
    scores: Sequence[float],
    diffs: Sequence[int] = DEFAULT_DIFFS,
    dataset_id: str = "test",
    ties_as_flips: bool = True,
    logistic: bool = False,
    n_skipped: int = 0,
) -> EvalReport:
    errors: list[str] = []
    gt = [r.mos for r in records]
    by_path = {r.clip_path: s for r, s in zip(records, scores)}
    s_ = _safe(lambda: srcc(scores, gt), errors, "srcc")
    p_ = _safe(lambda: plcc(scores, gt, logistic), errors, "plcc")
    # differential scores against each source's original
    orig = {r.source_id: r for r in records if r.is_original}
    d_pred, d_gt = [], []
    for r, s in zip(records, scores):
        o = orig.get(r.source_id)
        if o is not None and not r.is_original:
            d_pred.append(by_path[o.clip_path] - s)
            d_gt.append(o.mos - r.mos)
    ds = _safe(lambda: srcc(d_pred, d_gt), errors, "dmos_srcc") if len(d_pred) >= 2 else None
    dp = _safe(lambda: plcc(d_pred, d_gt), errors, "dmos_plcc") if len(d_pred) >= 2 else None
    buckets = build_diff_pairs(records, diffs)
    fr: dict[int, float | None] = {}
    n_pairs = 0
    for d, pairs in buckets.items():
        n_pairs += len(pairs)
        if pairs:
            fr[d] = flip_rate([(by_path[a.clip_path], by_path[b.clip_path]) for a, b in pairs], ties_as_flips)
        else:
            fr[d] = None
            errors.append(f"fr_diff_{d}: empty bucket")
    return EvalReport(dataset_id, s_, p_, fr, len(records), n_pairs, ds, dp, n_skipped, errors)


def run_benchmark(
    scorer: Scorer,
    store: ClipStore,
    split: str | None = "test",
    diffs: Sequence[int] = DEFAULT_DIFFS,
    ties_as_flips: bool = True,
    logistic: bool = False,
    out_dir: str | Path | None = None,
    plots: bool = False,
) -> EvalReport:
    """Score every item of a split once and compute all metrics.

    Items whose media cannot be read are skipped and counted.
    """
    recs = store.records if split is None else store.manifest.split(split)
    recs, skipped = store.available(recs)
    scores = list(scorer(recs))
    report = evaluate_scores(recs, scores, diffs, split or "all", ties_as_flips, logistic, skipped)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"report_{report.dataset_id}.txt").write_text(report.render(), encoding="utf-8")
        if plots:
            write_plots(recs, scores, out_dir / f"plots_{report.dataset_id}")
    return report


def write_plots(records: list[Record], scores: Sequence[float], out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter([r.mos for r in records], scores, s=10)
    ax.set_xlabel("ground truth")
    ax.set_ylabel("predicted")
    fig.tight_layout()
    paths.append(out_dir / "scatter.png")
    fig.savefig(paths[-1])
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 4))
    by_src: dict[str, list[tuple[int, float]]] = {}
    for r, s in zip(records, scores):
        by_src.setdefault(r.source_id, []).append((r.severity, s))
    for sid, pts in sorted(by_src.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=".", label=sid)
    ax.set_xlabel("severity")
    ax.set_ylabel("predicted score")
    ax.legend(fontsize=6)
    fig.tight_layout()
    paths.append(out_dir / "ladders.png")
    fig.savefig(paths[-1])
    plt.close(fig)
    return paths
