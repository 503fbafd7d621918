"""Command-line interface.

Every workflow the package supports is reachable here: corpus synthesis
and inspection, vocab training, sampling stats, training with resume,
translation (direct or via a pivot), gradient checking, evaluation, and
full experiment runs with report rendering.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation, gradcheck, harness, model as model_mod, subword, trainer
from .corpus import load_mono, load_parallel
from .mass import MaskSpec
from .model import ModelConfig
from .sampler import BatchSampler, SamplingPolicy, sample_stats
from .trainer import TrainConfig


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _read_lines(path: str | None) -> list[str]:
    text = sys.stdin.read() if path in (None, "-") else Path(path).read_text(encoding="utf-8")
    return [l for l in text.split("\n") if l.strip()]


def cmd_build_vocab(args) -> int:
    def lines():
        for p in args.inputs:
            with open(p, encoding="utf-8") as f:
                yield from f

    vocab = subword.train_vocab(lines(), args.target_size, args.langs.split(","))
    subword.save_vocab(vocab, args.out)
    print(f"wrote {args.out}: {vocab.size} pieces, {len(vocab.merges)} merges")
    return 0


def cmd_make_synth(args) -> int:
    config = harness.merge_config(_read_config(args.config))
    suite = harness.build_suite(config)
    harness.write_data_dir(suite, args.out)
    stats = suite.registry.stats()
    print(json.dumps({"out": str(args.out), "stats": stats, "vocab_size": suite.vocab.size}, indent=2, sort_keys=True))
    return 0


def cmd_corpus_stats(args) -> int:
    dd = harness.load_data_dir(args.data)
    out = dd.registry.stats()
    out["test"] = {f"{s}-{t}": len(store) for (s, t), store in sorted(dd.test.items())}
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def cmd_sample_stats(args) -> int:
    dd = harness.load_data_dir(args.data)
    policy = SamplingPolicy(
        batch_size=args.batch_size,
        max_len=args.max_len,
        temperature=args.temperature,
        mono_ratio=args.mono_ratio,
        seed=args.seed,
    )
    stats = sample_stats(dd.registry, policy, dd.vocab, args.draws)
    print(json.dumps(stats, indent=2, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    config = harness.merge_config(_read_config(args.config))
    dd = harness.load_data_dir(args.data)
    pc = config["policy"]
    mono_ratio = pc["mono_ratio"] if args.mono_ratio is None else args.mono_ratio
    if mono_ratio > 0 and not dd.registry.mono:
        mono_ratio = 0.0
    policy = SamplingPolicy(
        batch_size=pc["batch_size"], max_len=pc["max_len"], temperature=pc["temperature"],
        mono_ratio=mono_ratio, seed=args.seed,
    )
    mask = MaskSpec(
        fragment_ratio=config["mask"]["fragment_ratio"],
        replace_probs=tuple(config["mask"]["replace_probs"]),
        min_len=config["mask"]["min_len"],
    )
    tc = dict(config["train"])
    if args.steps is not None:
        tc["total_steps"] = args.steps
    model_config = ModelConfig(vocab_size=dd.vocab.size, **config["model"])
    result = trainer.train(
        dd.registry, dd.vocab, policy, model_config, TrainConfig(seed=args.seed, **tc),
        args.out, mask_spec=mask, resume=args.resume,
    )
    print(f"finished at step {result.final_step}; checkpoint {result.checkpoint_dir}")
    return 0


def _load_model(args):
    params = model_mod.load_params(args.checkpoint)
    vocab = subword.load_vocab(args.vocab)
    if params.config.vocab_size != vocab.size:
        raise SystemExit(f"checkpoint vocab_size {params.config.vocab_size} != vocab file size {vocab.size}")
    return params, vocab


def _settings(args) -> evaluation.DecodeSettings:
    return evaluation.DecodeSettings(
        max_steps=args.max_steps, beam_size=args.beam, length_penalty=args.length_penalty,
    )


def cmd_translate(args) -> int:
    params, vocab = _load_model(args)
    sentences = _read_lines(args.input)
    if args.pivot:
        hyps = evaluation.pivot_translate(params, vocab, sentences, args.pivot, args.target_lang, _settings(args))
    else:
        hyps = evaluation.translate_sentences(params, vocab, sentences, args.target_lang, _settings(args))
    for h in hyps:
        print(h)
    return 0


def cmd_evaluate(args) -> int:
    params, vocab = _load_model(args)
    sources = _read_lines(args.src)
    refs = _read_lines(args.ref)
    if len(sources) != len(refs):
        raise SystemExit(f"{len(sources)} source lines vs {len(refs)} reference lines")
    if args.pivot:
        hyps = evaluation.pivot_translate(params, vocab, sources, args.pivot, args.target_lang, _settings(args))
    else:
        hyps = evaluation.translate_sentences(params, vocab, sources, args.target_lang, _settings(args))
    result = evaluation.corpus_bleu(hyps, refs, smoothing=args.smoothing)
    print(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_grad_check(args) -> int:
    _, params, batches = gradcheck.make_check_setup(seed=args.seed, d_model=args.d_model, n_layers=args.layers)
    report = {}
    worst_all = 0.0
    for objective, batch in sorted(batches.items()):
        worst, where = gradcheck.max_relative_error(params, batch, step=args.step)
        report[objective] = {"max_rel_error": worst, "at": where}
        worst_all = max(worst_all, worst)
    report["tolerance"] = args.tol
    report["ok"] = worst_all < args.tol
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0 if report["ok"] else 1


def cmd_run(args) -> int:
    config = _read_config(args.config)
    report = harness.run_experiment(config, args.out)
    print(harness.emit_report(report, "txt"), end="")
    return 0


def cmd_report(args) -> int:
    path = Path(args.run) / "report.json"
    if not path.exists():
        raise SystemExit(f"{path} not found; did the run finish?")
    report = harness.ExperimentReport.from_json(path.read_text(encoding="utf-8"))
    print(harness.emit_report(report, args.format), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtlab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-vocab", help="train a subword vocabulary from text files")
    s.add_argument("inputs", nargs="+", help="text files, one sentence per line")
    s.add_argument("--target-size", type=int, required=True)
    s.add_argument("--langs", required=True, help="comma-separated language codes to reserve tags for")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_vocab)

    s = sub.add_parser("make-synth", help="generate a synthetic suite into a data directory")
    s.add_argument("--config", help="experiment config JSON (merged over defaults)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_synth)

    s = sub.add_parser("corpus-stats", help="sentence counts per store in a data directory")
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_corpus_stats)

    s = sub.add_parser("sample-stats", help="empirical batch-header frequencies")
    s.add_argument("--data", required=True)
    s.add_argument("--draws", type=int, default=100000)
    s.add_argument("--temperature", type=float, default=5.0)
    s.add_argument("--mono-ratio", type=float, default=0.5)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--max-len", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sample_stats)

    s = sub.add_parser("train", help="train on a data directory")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="run directory for checkpoints and metrics")
    s.add_argument("--config", help="experiment config JSON (model/train/policy/mask sections)")
    s.add_argument("--steps", type=int, help="override train.total_steps")
    s.add_argument("--mono-ratio", type=float, help="override policy.mono_ratio")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--resume", action="store_true", help="continue from the newest checkpoint")
    s.set_defaults(func=cmd_train)

    for name, fn in (("translate", cmd_translate), ("evaluate", cmd_evaluate)):
        s = sub.add_parser(name, help="translate text" if name == "translate" else "score translations with BLEU")
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--vocab", required=True)
        s.add_argument("--target-lang", required=True)
        s.add_argument("--pivot", help="bridge language for two-hop translation")
        s.add_argument("--beam", type=int, default=1)
        s.add_argument("--max-steps", type=int, default=32)
        s.add_argument("--length-penalty", type=float, default=0.0)
        if name == "translate":
            s.add_argument("--input", help="source file (default stdin)")
        else:
            s.add_argument("--src", required=True, help="source sentences file")
            s.add_argument("--ref", required=True, help="reference translations file")
            s.add_argument("--smoothing", choices=["none", "add_k"], default="none")
        s.set_defaults(func=fn)

    s = sub.add_parser("grad-check", help="compare backward() to finite differences")
    s.add_argument("--d-model", type=int, default=16)
    s.add_argument("--layers", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--step", type=float, default=3e-5)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("run", help="run a full experiment (all arms x seeds)")
    s.add_argument("--config", help="experiment config JSON (merged over defaults)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("report", help="re-render the report of a finished run")
    s.add_argument("--run", required=True)
    s.add_argument("--format", choices=["txt", "json", "csv"], default="txt")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
