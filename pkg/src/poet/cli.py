"""``poet`` command line: synth, train, generate, eval, ablate, gradcheck.

Exit status is 0 on success, 1 for usage errors and 2 for runtime or data
errors.  ``--config`` names a flat ``key = value`` file; explicit flags win
over values from the file.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

from .autodiff import NonFiniteError, ShapeError, StructuralError
from .dataio import DataError, SynthConfig, Vocabulary, build_vocab, load_jsonl, read_config, synth_generate, write_jsonl
from .gradcheck import run_suite
from .metrics import evaluate_corpus, read_corpus, write_corpus
from .params import CheckpointError, load_checkpoint
from .training import (TrainConfig, TrainingError, corpus_for, format_ablation, predict, run_ablation, train,
                       write_loss_curve)

GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="poet", description="Video-to-caption graph model toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, variant=False):
        sp.add_argument("--config", type=Path, help="key=value file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path)
        if variant:
            sp.add_argument("--variant", choices=["poet", "poet-kl", "gcn"])
            sp.add_argument("--layers", type=int)
            sp.add_argument("--beam", type=int)

    sp = sub.add_parser("synth", help="write a synthetic JSONL dataset")
    common(sp)
    sp.add_argument("--n", type=int, default=200)

    sp = sub.add_parser("train", help="train a model; writes checkpoints and loss.csv into --out")
    common(sp, variant=True)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--val", type=Path)

    sp = sub.add_parser("generate", help="decode captions for a dataset")
    common(sp, variant=True)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--data", type=Path, required=True)

    sp = sub.add_parser("eval", help="score a candidate/reference JSONL file")
    common(sp)
    sp.add_argument("--candidates", type=Path, required=True)

    sp = sub.add_parser("ablate", help="train and compare poet, poet-kl and gcn")
    common(sp, variant=True)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--test", type=Path, required=True)
    sp.add_argument("--val", type=Path)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every module")
    common(sp)
    return p


def _config(args, allowed: set[str]) -> dict:
    cfg = read_config(args.config) if args.config else {}
    unknown = set(cfg) - allowed
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}; allowed: {sorted(allowed)}")
    for flag in ("seed", "variant", "layers", "beam"):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[flag] = val
    return cfg


TRAIN_KEYS = {f.name for f in fields(TrainConfig)} | {"min_freq"}


def _train_config(args) -> tuple[TrainConfig, int]:
    cfg = _config(args, TRAIN_KEYS)
    min_freq = int(cfg.pop("min_freq", 1))
    try:
        return TrainConfig.from_dict(cfg), min_freq
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        print(text)
    else:
        out.write_text(text + "\n", encoding="utf-8")


def cmd_synth(args) -> int:
    cfg = _config(args, {f.name for f in fields(SynthConfig)} | {"seed", "n"})
    seed = int(cfg.pop("seed", 0))
    n = int(cfg.pop("n", args.n))
    if args.out is None:
        raise UsageError("synth needs --out")
    try:
        sc = SynthConfig.from_dict(cfg)
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    write_jsonl(args.out, synth_generate(seed, n, sc))
    return 0


def cmd_train(args) -> int:
    if args.out is None:
        raise UsageError("train needs --out DIR")
    cfg, min_freq = _train_config(args)
    data = load_jsonl(args.data, max_caption_len=cfg.max_caption_len)
    val = load_jsonl(args.val, max_caption_len=cfg.max_caption_len) if args.val else None
    vocab = build_vocab(data, min_freq)
    res = train(data, vocab, cfg, val=val, checkpoint_dir=args.out)
    write_loss_curve(args.out / "loss.csv", res.loss_curve)
    print(f"trained {cfg.variant} for {len(res.loss_curve)} epochs; final loss {res.loss_curve[-1]:.6f}")
    return 0


def cmd_generate(args) -> int:
    cfg = _config(args, {"seed", "variant", "layers", "beam", "max_caption_len"})
    params, meta = load_checkpoint(args.checkpoint)
    if meta.get("vocab") is None:
        raise DataError(f"{args.checkpoint}: checkpoint carries no vocabulary")
    vocab = Vocabulary.from_list(meta["vocab"])
    variant = cfg.get("variant") or meta.get("variant") or "poet"
    if "layers" in cfg and cfg["layers"] != params.config.layers:
        raise UsageError(f"checkpoint has {params.config.layers} layers, --layers says {cfg['layers']}")
    max_len = int(cfg.get("max_caption_len", 30))
    data = load_jsonl(args.data, max_caption_len=max_len)
    cands = predict(data, params, vocab, variant, int(cfg.get("beam", 1)), max_len)
    corpus = corpus_for(data, cands)
    if args.out is None:
        for s, c in zip(data, cands):
            print(json.dumps({"video_id": s.video_id, "candidate": c}))
    else:
        write_corpus(args.out, corpus, [s.video_id for s in data])
    return 0


def cmd_eval(args) -> int:
    _config(args, {"seed"})
    report = evaluate_corpus(read_corpus(args.candidates))
    if args.out is not None:
        args.out.write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.to_table())
    return 0


def cmd_ablate(args) -> int:
    cfg, min_freq = _train_config(args)
    data = load_jsonl(args.data, max_caption_len=cfg.max_caption_len)
    test = load_jsonl(args.test, max_caption_len=cfg.max_caption_len)
    val = load_jsonl(args.val, max_caption_len=cfg.max_caption_len) if args.val else None
    reports = run_ablation(data, test, build_vocab(data, min_freq), cfg, val=val)
    print(format_ablation(reports))
    if args.out is not None:
        args.out.write_text(json.dumps({k: r.to_dict() for k, r in reports.items()}, sort_keys=True) + "\n",
                            encoding="utf-8")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args, {"seed"})
    results = run_suite(int(cfg.get("seed", 0)))
    lines = [f"{name:<12} max_rel_err={r.max_rel_err:.3e} checked={r.n_checked} skipped={r.n_skipped}"
             for name, r in results.items()]
    _emit("\n".join(lines), args.out)
    if args.out is not None:
        print("\n".join(lines))
    return 0 if all(r.max_rel_err < GRADCHECK_TOL for r in results.values()) else 2


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "generate": cmd_generate,
    "eval": cmd_eval, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (OSError, DataError, CheckpointError, TrainingError, NonFiniteError, ShapeError,
            StructuralError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
