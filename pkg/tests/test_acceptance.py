"""Acceptance criteria 1-9. Each test records one PASS/FAIL line for the summary."""

import dataclasses
import itertools
import json
import math
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES, toy_model_config
from dualvqa.checkpoint import load_checkpoint, save_checkpoint
from dualvqa.cli import main as cli_main
from dualvqa.config import RunConfig, TrainingConfig
from dualvqa.datagen import Record, build_corpus
from dualvqa.dataset import ClipStore
from dualvqa.decoder import TOKENIZER, Decoder, build_prefix_sequence
from dualvqa.encoders import HIGH, LOW, EmbeddingSequence
from dualvqa.evaluation import EvalReport, evaluate_scores, flip_rate, model_scorer, plcc, run_benchmark, srcc
from dualvqa.model import VQAModel
from dualvqa.training import Trainer, loss_mse, loss_rank, loss_text, pairwise, total_loss
from helpers import fd_check

f64 = torch.float64


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


# -- 1. loss oracles -----------------------------------------------------------


def test_criterion_1_loss_oracles():
    l1 = loss_rank(torch.tensor([2.5], dtype=f64), torch.tensor([2.8], dtype=f64), [3.0], [2.0]).item()
    l2 = loss_mse(torch.tensor([3.5], dtype=f64), [4.0], [True]).item()
    labels = torch.tensor([[0, 1], [2, 3]])
    target_prob = [[0.5, 0.5], [0.25, 1.0]]
    logits = torch.empty(2, 2, 4, dtype=f64)
    for i, k in itertools.product(range(2), range(2)):
        p = target_prob[i][k]
        row = torch.full((4,), max((1.0 - p) / 3, 1e-300), dtype=f64)
        row[labels[i, k]] = p
        logits[i, k] = torch.log(row)
    l3 = loss_text(logits, labels, torch.ones(2, 2, dtype=torch.bool)).item()
    uniform = loss_text(torch.zeros(1, 3, 259, dtype=f64), torch.tensor([[5, 6, 7]]), torch.ones(1, 3, dtype=torch.bool)).item()
    errs = {
        "rank 0.3": abs(l1 - 0.3),
        "mse 0.25": abs(l2 - 0.25),
        "text": abs(l3 - (-(2 * math.log(0.5) + math.log(0.25)) / 4)),
        "uniform log V": abs(uniform - math.log(259)),
        "total 1.24": abs(total_loss(0.3, 0.25, 0.69) - 1.24),
    }
    worst = max(errs.values())
    ok = worst <= 1e-9 and abs(l3 - 0.6931) <= 5e-5
    record(1, ok, f"max abs error {worst:.2e} over {sorted(errs)} (tol 1e-9)")
    assert ok, errs


# -- 2. gradient correctness ----------------------------------------------------


def test_criterion_2_full_model_gradient(tiny_corpus):
    cfg = toy_model_config(d=8, key_frames=1)
    store = ClipStore.open(tiny_corpus[0], cfg.media)
    torch.manual_seed(2)
    model = VQAModel(cfg).double()
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("lora_b"):
                p.normal_(0, 0.1)
    trainer = Trainer(model, store, TrainingConfig(encoder_freeze_mode="all", decoder_mode="full"))
    recs = next(iter(store.manifest.sources("train").values()))
    pair = pairwise(recs[0], recs[-1])
    pair = dataclasses.replace(pair, caption_a="a")
    assert len(TOKENIZER.encode(pair.caption_a, eos=True)) == 2
    # put the pair on the wrong side of the hinge so every loss term carries gradient
    with torch.no_grad():
        q = model_scorer(model, store)([pair.video_a, pair.video_b])
    if q[0] > q[1]:
        with torch.no_grad():
            model.head.fc2.weight.neg_()
    params = list(model.parameters())

    def fn():
        losses = trainer.compute_losses([pair])
        assert losses["l1"].item() > 0 and losses["l2"].item() > 0 and losses["l3"].item() > 0
        return losses["total"]

    err = fd_check(fn, params, n_coords=3, eps=1e-6)
    ok = err <= 1e-3
    record(2, ok, f"max relative gradient error {err:.2e} over {len(params)} tensors (tol 1e-3)")
    assert ok


# -- 3. mask properties ------------------------------------------------------------


@torch.no_grad()
def test_criterion_3_mask_properties():
    worst = {"causal": 0.0, "pad": 0.0}
    min_prefix_reaction = math.inf
    failures = 0
    for trial in range(100):
        g = torch.Generator().manual_seed(trial)
        dim = 8
        torch.manual_seed(trial)
        dec = Decoder(259, dim, 2, 16, 2, 256, 2).double().eval()
        th, tl = int(torch.randint(1, 5, (1,), generator=g)), int(torch.randint(1, 5, (1,), generator=g))
        n_prompt, n_tgt = int(torch.randint(1, 6, (1,), generator=g)), int(torch.randint(2, 6, (1,), generator=g))

        def seqs(scale=1.0):
            return [EmbeddingSequence(scale * torch.randn(t, dim, generator=g, dtype=f64), s) for t, s in ((th, HIGH), (tl, LOW))]

        real = seqs()
        prompt = dec.embed_text(torch.randint(0, 256, (n_prompt,), generator=g).tolist())
        target = dec.embed_text(torch.randint(0, 256, (n_tgt,), generator=g).tolist())
        pad_a, pad_b = seqs(), seqs(10.0)
        outs = []
        for pad in (pad_a, pad_b):
            seq, mask, plen = build_prefix_sequence(real + pad, prompt, target, pad_blocks=(2, 3))
            outs.append(dec(seq[None], mask.matrix[None])[0])
        valid = mask.valid
        worst["pad"] = max(worst["pad"], float((outs[0][valid] - outs[1][valid]).abs().max()))

        # prefix rows see every valid prefix column and no suffix column
        m = mask.matrix
        pre = valid.clone()
        pre[plen:] = False
        failures += int(not m[pre][:, pre].all()) + int(m[:plen, plen:].any())
        # suffix rows are causal
        suf = m[plen:]
        for r in range(suf.shape[0]):
            failures += int(suf[r, plen + r + 1 :].any()) + int(not suf[r, plen : plen + r + 1].all())

        # perturbing the last prefix token moves the first prefix output: attention is bidirectional there
        seq, mask, plen = build_prefix_sequence(real, prompt, target)
        base = dec(seq[None], mask.matrix[None])[0]
        moved = seq.clone()
        moved[plen - 1] += torch.randn(dim, generator=g, dtype=f64)
        out = dec(moved[None], mask.matrix[None])[0]
        min_prefix_reaction = min(min_prefix_reaction, float((out[0] - base[0]).abs().max()))
        # perturbing suffix token k leaves every earlier output unchanged
        k = plen + int(torch.randint(0, n_tgt, (1,), generator=g))
        moved = seq.clone()
        moved[k:] += torch.randn_like(moved[k:])
        out = dec(moved[None], mask.matrix[None])[0]
        worst["causal"] = max(worst["causal"], float((out[:k] - base[:k]).abs().max()))
    ok = failures == 0 and worst["pad"] <= 1e-6 and worst["causal"] <= 1e-6 and min_prefix_reaction > 1e-6
    record(3, ok, f"100 trials: mask violations {failures}, pad delta {worst['pad']:.1e}, "
                  f"suffix delta {worst['causal']:.1e}, smallest prefix reaction to a later prefix token {min_prefix_reaction:.1e}")
    assert ok


# -- 4. metric oracles ---------------------------------------------------------------


def _brute_ranks(x):
    return [sum(v < a for v in x) + (sum(v == a for v in x) + 1) / 2 for a in x]


def _brute_pearson(x, y):
    n = len(x)
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    num = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    den = math.sqrt(math.fsum((a - mx) ** 2 for a in x) * math.fsum((b - my) ** 2 for b in y))
    return num / den


def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(1000):
        n = int(rng.integers(3, 40))
        x = rng.integers(0, 8, n).astype(float) if i % 3 == 0 else rng.standard_normal(n)
        y = rng.standard_normal(n)
        if np.ptp(x) == 0:
            x[0] += 1.0
        worst = max(worst, abs(srcc(x, y) - _brute_pearson(_brute_ranks(list(x)), _brute_ranks(list(y)))))
        worst = max(worst, abs(plcc(x, y) - _brute_pearson(list(x), list(y))))
    fr_bad = 0
    for levels in range(1, 21):
        recs = [Record(f"s/{s}", "s", "BLOCK_QUANT", s, levels, 4.0 - 3.0 * s / levels, s == 0, "") for s in range(levels + 1)]
        scores = rng.integers(0, 5, levels + 1).astype(float)
        rep = evaluate_scores(recs, scores, diffs=range(1, levels + 1))
        for d in range(1, levels + 1):
            pairs = [(i, j) for i, j in itertools.combinations(range(levels + 1), 2) if j - i == d]
            expected = sum(scores[i] <= scores[j] for i, j in pairs) / len(pairs)
            fr_bad += int(rep.fr_by_diff[d] != expected)
            fr_bad += int(flip_rate([(scores[i], scores[j]) for i, j in pairs]) != expected)
    ok = worst <= 1e-12 and fr_bad == 0
    record(4, ok, f"srcc/plcc max deviation {worst:.1e} on 1000 vectors (tol 1e-12); flip-rate mismatches {fr_bad} on ladders of 1-20 steps")
    assert ok


# -- 5-8. desk-scale training ---------------------------------------------------------

_RUNS: dict = {}


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory):
    d = RunConfig().data
    root = tmp_path_factory.mktemp("desk_corpus")
    build_corpus(root, d.sources, d.levels, d.kinds, d.seed, (d.height, d.width), d.frames, d.test_sources)
    return root


def desk_run(root, mix: float, seed: int):
    key = (mix, seed)
    if key not in _RUNS:
        cfg = RunConfig()
        cfg.train.single_pair_mix = mix
        cfg.train.seed = seed
        store = ClipStore.open(root, cfg.model.media)
        torch.manual_seed(seed)
        model = VQAModel(cfg.model)
        vit0 = {k: v.clone() for k, v in model.high.vit.state_dict().items()}
        t0 = time.time()
        trainer = Trainer(model, store, cfg.train)
        trainer.fit()
        report = run_benchmark(model_scorer(model, store), store, "test", cfg.eval.diffs)
        _RUNS[key] = dict(cfg=cfg, model=model, store=store, report=report, vit0=vit0, seconds=time.time() - t0)
    return _RUNS[key]


def _mean_fr(rep: EvalReport) -> float:
    return float(np.mean([v for v in rep.fr_by_diff.values() if v is not None]))


@pytest.mark.slow
def test_criterion_5_desk_learning(desk_corpus):
    run = desk_run(desk_corpus, RunConfig().train.single_pair_mix, 0)
    rep, steps = run["report"], run["cfg"].train.steps
    fr4, fr20 = rep.fr_by_diff[4], rep.fr_by_diff[20]
    ok = (
        200 <= steps <= 500
        and rep.srcc is not None and rep.srcc >= 0.8
        and fr4 <= 0.15 and fr20 <= 0.02
        and run["seconds"] <= 30 * 60
    )
    record(5, ok, f"{steps} steps, {run['seconds'] / 60:.1f} min: held-out srcc {rep.srcc:.3f} (>= 0.8), "
                  f"fr@4 {fr4:.3f} (<= 0.15), fr@20 {fr20:.3f} (<= 0.02)")
    assert ok


@pytest.mark.slow
def test_criterion_6_mix_ablation(desk_corpus):
    mixes = (0.0, 0.5, 1.0)
    srccs = {m: [] for m in mixes}
    frs = {m: [] for m in mixes}
    for m in mixes:
        for seed in range(3):
            rep = desk_run(desk_corpus, m, seed)["report"]
            srccs[m].append(rep.srcc if rep.srcc is not None else 0.0)
            frs[m].append(_mean_fr(rep))
    s = {m: float(np.mean(v)) for m, v in srccs.items()}
    f = {m: float(np.mean(v)) for m, v in frs.items()}
    ok_srcc = s[0.5] >= max(s[0.0], s[1.0]) - 0.02
    ok_fr = f[1.0] < min(f[0.0], f[0.5])
    record(6, ok_srcc and ok_fr, "mean over 3 seeds, srcc " + ", ".join(f"mix {m}: {s[m]:.3f}" for m in mixes)
           + "; mean fr " + ", ".join(f"mix {m}: {f[m]:.3f}" for m in mixes))
    assert ok_srcc and ok_fr


@pytest.mark.slow
def test_criterion_7_frozen_high_encoder(desk_corpus):
    run = desk_run(desk_corpus, RunConfig().train.single_pair_mix, 0)
    assert run["cfg"].train.encoder_freeze_mode == "frozen"
    after = run["model"].high.vit.state_dict()
    identical = all(torch.equal(run["vit0"][k], after[k]) for k in after)
    rep = run["report"]
    meets = rep.srcc is not None and rep.srcc >= 0.8 and rep.fr_by_diff[4] <= 0.15 and rep.fr_by_diff[20] <= 0.02
    record(7, identical and meets, f"high-level ViT bit-identical after training: {identical}; criterion 5 thresholds met: {meets}")
    assert identical and meets


@pytest.mark.slow
def test_criterion_8_checkpoint_round_trip(desk_corpus, tmp_path):
    run = desk_run(desk_corpus, RunConfig().train.single_pair_mix, 0)
    store = run["store"]
    items = store.manifest.split("test")[:20]
    before = model_scorer(run["model"], store)(items)
    loaded = load_checkpoint(save_checkpoint(run["model"], tmp_path / "m.ckpt"), run["cfg"].model)
    after = model_scorer(loaded, store)(items)
    ok = len(items) == 20 and before == after
    record(8, ok, f"{len(items)} scores bit-identical after save/load: {before == after}")
    assert ok


@pytest.mark.slow
def test_trained_model_infer_and_compare(desk_corpus, tmp_path, capsys):
    """Post-training behaviour of the infer and compare commands on the desk model."""
    run = desk_run(desk_corpus, RunConfig().train.single_pair_mix, 0)
    ckpt = save_checkpoint(run["model"], tmp_path / "m.ckpt")
    manifest = run["store"].manifest
    for rec in [r for r in manifest.records if r.is_original and r.split == "train"]:
        orig = str(manifest.path_of(rec))
        heavy = str(manifest.path_of(next(r for r in manifest.records if r.source_id == rec.source_id and r.severity == r.levels)))
        assert cli_main(["infer", "--checkpoint", str(ckpt), orig, "--json", "--max-len", "4"]) == 0
        res = json.loads(capsys.readouterr().out)
        assert abs(res["score"] - rec.mos) <= 0.75, (rec.source_id, res["score"], rec.mos)
        assert cli_main(["compare", "--checkpoint", str(ckpt), orig, heavy, "--json", "--max-len", "4"]) == 0
        assert json.loads(capsys.readouterr().out)["winner"] == "A"
        assert cli_main(["compare", "--checkpoint", str(ckpt), heavy, orig, "--json", "--max-len", "4"]) == 0
        assert json.loads(capsys.readouterr().out)["winner"] == "B"


# -- 9. CLI -----------------------------------------------------------------------------


def test_criterion_9_cli_end_to_end(tmp_path, capsys):
    work = tmp_path / "empty"
    work.mkdir()
    data, run = work / "data", work / "run"
    codes = {}
    codes["gen-data"] = cli_main(["gen-data", "--out", str(data), "--sources", "3", "--levels", "4", "--set", "data.test_sources=1"])
    codes["train"] = cli_main(["train", "--data", str(data), "--out", str(run), "--steps", "4"])
    capsys.readouterr()
    codes["eval"] = cli_main(["eval", "--checkpoint", str(run / "model.ckpt"), "--data", str(data), "--out", str(work / "eval")])
    report_text = capsys.readouterr().out
    clip = data / "clips" / sorted(p.name for p in (data / "clips").iterdir())[0]
    codes["infer"] = cli_main(["infer", "--checkpoint", str(run / "model.ckpt"), str(clip / "s00"), "--max-len", "16"])
    codes["compare"] = cli_main(["compare", "--checkpoint", str(run / "model.ckpt"), str(clip / "s00"), str(clip / "s04"), "--max-len", "16"])
    fields = [f.name for f in dataclasses.fields(EvalReport)]
    parsed = EvalReport.parse(report_text)
    missing = [name for name in fields if getattr(parsed, name, None) is None and name not in ("srcc", "plcc", "dmos_srcc", "dmos_plcc")]
    shown = [k for k in ("dataset_id", "srcc", "plcc", "n_items", "n_pairs") if f"{k}:" in report_text]
    ok = all(c == 0 for c in codes.values()) and not missing and len(shown) == 5 and len(parsed.fr_by_diff) == 6
    record(9, ok, f"exit codes {codes}; report fields present: {len(fields) - len(missing)}/{len(fields)}")
    assert ok
