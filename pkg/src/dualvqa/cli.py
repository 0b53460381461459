"""Command-line entry point: gen-data, train, eval, infer, compare."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, to_dict
from .datagen import build_corpus
from .dataset import ClipStore
from .evaluation import model_scorer, run_benchmark
from .media import MediaError, load_clip, make_bundle
from .model import VQAModel
from .training import Trainer

log = logging.getLogger("dualvqa")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, e.g. train.learning_rate=3e-4 (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualvqa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a distortion-ladder corpus")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--sources", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--kinds", help="comma-separated: BLOCK_QUANT,GAUSS_BLUR,ADD_NOISE")
    p.add_argument("--force", action="store_true", help="write into an existing directory")

    p = sub.add_parser("train", help="train a model on a corpus")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--mix", type=float, help="fraction of pairwise slots per batch")
    p.add_argument("--loss-weights", help="w1,w2,w3")
    p.add_argument("--freeze-mode", choices=["frozen", "head", "all"])
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("eval", help="benchmark a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", help="train, test or all")
    p.add_argument("--diffs", help="comma-separated severity differences")
    p.add_argument("--out")
    p.add_argument("--plots", action="store_true")
    p.add_argument("--min-srcc", type=float)
    p.add_argument("--max-fr", type=float, help="threshold applied to every flip-rate bucket")

    p = sub.add_parser("infer", help="score and describe one video")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("video")
    p.add_argument("--max-len", type=int, default=256)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("compare", help="compare two videos")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("video_a")
    p.add_argument("video_b")
    p.add_argument("--max-len", type=int, default=256)
    p.add_argument("--json", action="store_true")
    return parser


def resolve_config(args) -> RunConfig:
    ov = list(args.overrides)
    if args.seed is not None:
        ov += [f"train.seed={args.seed}", f"data.seed={args.seed}"]
    for flag, key in (("sources", "data.sources"), ("levels", "data.levels"), ("kinds", "data.kinds"),
                      ("steps", "train.steps"), ("mix", "train.single_pair_mix"),
                      ("loss_weights", "train.loss_weights"), ("freeze_mode", "train.encoder_freeze_mode"),
                      ("diffs", "eval.diffs"), ("min_srcc", "eval.min_srcc"), ("max_fr", "eval.max_fr")):
        value = getattr(args, flag, None)
        if value is not None:
            ov.append(f"{key}={value}")
    if getattr(args, "plots", False):
        ov.append("eval.plots=true")
    return load_config(args.config, ov)


def _start_run_log(cfg: RunConfig, out: Path | None, command: str) -> None:
    line = "config: " + json.dumps({"command": command, **to_dict(cfg)}, sort_keys=True)
    log.info(line)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(out / "run.log", mode="w", encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(message)s"))
        log.addHandler(handler)
        handler.stream.write(line + "\n")


def _check_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise SystemExit(f"error: output directory {out} exists and is not empty (use --force)")


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    _check_out(out, args.force)
    _start_run_log(cfg, out, "gen-data")
    d = cfg.data
    manifest = build_corpus(
        out, d.sources, d.levels, d.kinds, d.seed, (d.height, d.width), d.frames, d.test_sources, d.encoder_cmd,
    )
    path = out / "manifest.jsonl"
    n_orig = sum(r.is_original for r in manifest.records)
    print(f"manifest: {path}")
    print(f"records: {len(manifest.records)} (originals {n_orig}, variants {len(manifest.records) - n_orig})")
    print(f"train: {len(manifest.split('train'))}  test: {len(manifest.split('test'))}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    _check_out(out, args.force)
    _start_run_log(cfg, out, "train")
    (out / "config.json").write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True), encoding="utf-8")
    store = ClipStore.open(args.data, cfg.model.media)
    torch.manual_seed(cfg.train.seed)
    model = VQAModel(cfg.model)
    trainer = Trainer(model, store, cfg.train, log_path=out / "train.log")
    has_test = bool(store.manifest.split("test"))

    def periodic(tr, rec):
        every = cfg.train.eval_every
        if every and has_test and rec["step"] % every == 0:
            r = run_benchmark(model_scorer(model, store), store, "test", cfg.eval.diffs)
            log.info("eval step %d: srcc %s  fr %s", rec["step"], r.srcc, r.fr_by_diff)
            model.train()

    trainer.fit(callback=periodic)
    ckpt = save_checkpoint(model, out / "model.ckpt")
    print(f"checkpoint: {ckpt}")
    if has_test:
        r = run_benchmark(model_scorer(model, store), store, "test", cfg.eval.diffs)
        print(f"held-out srcc: {r.srcc}  plcc: {r.plcc}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    out = Path(args.out) if args.out else None
    _start_run_log(cfg, out, "eval")
    model = load_checkpoint(args.checkpoint)
    store = ClipStore.open(args.data, model.cfg.media)
    split = None if args.split == "all" else args.split
    e = cfg.eval
    report = run_benchmark(model_scorer(model, store), store, split, e.diffs, e.ties_as_flips, e.logistic, out, e.plots)
    sys.stdout.write(report.render())
    failed = []
    if e.min_srcc is not None and (report.srcc is None or report.srcc < e.min_srcc):
        failed.append(f"srcc {report.srcc} < {e.min_srcc}")
    if e.max_fr is not None:
        for d, fr in report.fr_by_diff.items():
            if fr is not None and fr > e.max_fr:
                failed.append(f"fr_diff_{d} {fr} > {e.max_fr}")
    for msg in failed:
        print(f"threshold violated: {msg}", file=sys.stderr)
    return 1 if failed else 0


def _views(path: str, model: VQAModel):
    clip = load_clip(path)
    return make_bundle(clip, model.cfg.media).tensors()


def cmd_infer(args, cfg: RunConfig) -> int:
    _start_run_log(cfg, None, "infer")
    model = load_checkpoint(args.checkpoint)
    high, low = _views(args.video, model)
    (score,), gen = model.assess(high, low, max_len=args.max_len)
    result = {
        "video": args.video,
        "score": round(score.value, 4),
        "raw_score": score.raw,
        "description": gen.text,
        "truncated": gen.truncated,
    }
    if args.json:
        print(json.dumps(result))
    else:
        print(f"score: {result['score']:.4f}")
        print(f"description: {gen.text}")
        if gen.truncated:
            print("description truncated: decoder context exhausted")
    return 0


def verdict(raw_a: float, raw_b: float, name_a: str = "A", name_b: str = "B") -> str:
    if raw_a > raw_b:
        return f"Video {name_a} has higher quality than video {name_b}."
    if raw_b > raw_a:
        return f"Video {name_b} has higher quality than video {name_a}."
    return "Both videos have the same quality."


def cmd_compare(args, cfg: RunConfig) -> int:
    _start_run_log(cfg, None, "compare")
    model = load_checkpoint(args.checkpoint)
    ha, la = _views(args.video_a, model)
    hb, lb = _views(args.video_b, model)
    (sa, sb), gen = model.assess(ha, la, hb, lb, max_len=args.max_len)
    text = verdict(sa.raw, sb.raw)
    winner = "A" if sa.raw > sb.raw else "B" if sb.raw > sa.raw else "tie"
    result = {
        "video_a": args.video_a, "video_b": args.video_b,
        "score_a": round(sa.value, 4), "score_b": round(sb.value, 4),
        "raw_a": sa.raw, "raw_b": sb.raw,
        "winner": winner, "verdict": text,
        "description": gen.text, "truncated": gen.truncated,
    }
    if args.json:
        print(json.dumps(result))
    else:
        print(f"score A: {result['score_a']:.4f} (raw {sa.raw:.6f})")
        print(f"score B: {result['score_b']:.4f} (raw {sb.raw:.6f})")
        print(f"verdict: {text}")
        print(f"description: {gen.text}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    log.setLevel(logging.INFO)
    if not log.handlers:
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(logging.Formatter("%(message)s"))
        log.addHandler(h)
        log.propagate = False
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, MediaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    finally:
        for h in list(log.handlers):
            if isinstance(h, logging.FileHandler):
                log.removeHandler(h)
                h.close()


if __name__ == "__main__":
    sys.exit(main())
