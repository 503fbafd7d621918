"""Experiment harness: synthetic suites, training arms, and reports.

One experiment = one synthetic suite + a set of arms x seeds. Every arm
trains on a sub-registry of the suite with an equal step budget and is
scored on held-out test sets filtered against all training strings by
exact match. Reports carry per-cell scores, per-arm medians, and the
config hash, and re-emission is byte identical.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import os
import statistics
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import (
    CipherSpec,
    CorpusRegistry,
    MonoStore,
    ParallelStore,
    Reorder,
    build_lexicon,
    draw_base_sentences,
)
from .evaluation import DecodeSettings, corpus_bleu, score_direction
from .mass import MaskSpec
from .model import ModelConfig
from .sampler import SamplingPolicy
from .subword import Vocabulary, train_vocab
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

SEED_ENV_VAR = "MTLAB_SEEDS"


def default_config() -> dict:
    """The default desk-scale suite: 1 base + 4 ciphers, one low-resource.

    Language ee has 200 parallel pairs and shares half its lexicon with
    the high-resource bb, so transfer through shared surface forms and
    monolingual data is measurable on ee<->aa.
    """
    return {
        "suite": {
            "base_lang": "aa",
            # 900 words at a flattish exponent: wide enough that the
            # low-resource language's 200 pairs leave a real unseen-word
            # mass for monolingual data to cover, while 10k mono sentences
            # still show every word dozens of times.
            "base_vocab_size": 900,
            "zipf_s": 0.6,
            "len_range": [4, 10],
            "data_seed": 12345,
            "test_size": 300,
            "test_overdraw": 3,
            "languages": [
                {"lang": "bb", "parallel": 10000, "mono": 10000, "lexicon_seed": 11,
                 "shared_fraction": 0.0, "relative": None, "reorder": "none"},
                {"lang": "cc", "parallel": 10000, "mono": 10000, "lexicon_seed": 12,
                 "shared_fraction": 0.0, "relative": None, "reorder": "adjacent_swap"},
                {"lang": "dd", "parallel": 2000, "mono": 10000, "lexicon_seed": 13,
                 "shared_fraction": 0.0, "relative": None, "reorder": "none"},
                {"lang": "ee", "parallel": 200, "mono": 10000, "lexicon_seed": 14,
                 "shared_fraction": 0.5, "relative": "bb", "reorder": "none"},
            ],
            "base_mono": 10000,
        },
        "vocab": {"target_size": 4800},
        "policy": {"temperature": 5.0, "mono_ratio": 0.5, "batch_size": 32, "max_len": 16},
        "mask": {"fragment_ratio": 0.5, "replace_probs": [0.8, 0.1, 0.1], "min_len": 2},
        "model": {"n_layers": 2, "n_heads": 4, "d_model": 128, "d_ff": 256,
                  "max_positions": 32, "dropout": 0.1, "label_smoothing": 0.1},
        # clip_norm 5.0: typical step gradient norms sit near 2, so a cap of 1.0
        # silently halves the effective learning rate for the whole run; 5.0
        # still catches spikes without throttling ordinary steps.
        "train": {"total_steps": 5000, "warmup_steps": 500, "lr_scale": 1.0, "clip_norm": 5.0,
                  "checkpoint_every": 2500, "log_every": 50},
        "evaluate": {"directions": [["ee", "aa"]], "pivot": [], "max_steps": 16, "beam_size": 1},
        "arms": ["bilingual", "multilingual", "multilingual_mono"],
        "bilingual_pair": ["ee", "aa"],
        "seeds": [1, 2, 3],
    }


def merge_config(overrides: dict | None) -> dict:
    """Deep-merge overrides into the default config (dicts merge, rest replaces)."""
    def deep(base, over):
        out = copy.deepcopy(base)
        for k, v in over.items():
            if isinstance(v, dict) and isinstance(out.get(k), dict):
                out[k] = deep(out[k], v)
            else:
                out[k] = copy.deepcopy(v)
        return out

    return deep(default_config(), overrides or {})


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")).hexdigest()


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a label path, independent of platform."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


# -- suite construction -------------------------------------------------------------


class _Transform:
    """Base-sentence -> language-surface mapping for one language."""

    def __init__(self, lexicon: dict[str, str] | None, reorder: Reorder):
        self.lexicon = lexicon  # None for the base language
        self.reorder = reorder

    def apply(self, base_sentence: str) -> str:
        tokens = base_sentence.split(" ")
        if self.lexicon is not None:
            tokens = [self.lexicon[t] for t in tokens]
        return " ".join(self.reorder.apply(tokens))


@dataclass
class SuiteData:
    config: dict
    base_lang: str
    cipher_langs: list[str]
    registry: CorpusRegistry
    test: dict[tuple[str, str], ParallelStore]
    vocab: Vocabulary
    transforms: dict[str, _Transform] = field(default_factory=dict)
    n_test_filtered: int = 0


def build_suite(config: dict) -> SuiteData:
    """Generate all train stores, test sets, and the shared vocabulary."""
    suite = config["suite"]
    base = suite["base_lang"]
    w = suite["base_vocab_size"]
    len_range = tuple(suite["len_range"])
    zipf_s = suite["zipf_s"]
    data_seed = suite["data_seed"]
    registry = CorpusRegistry()
    transforms: dict[str, _Transform] = {base: _Transform(None, Reorder("none"))}
    lexicons: dict[str, dict[str, str]] = {}

    for entry in suite["languages"]:
        lang = entry["lang"]
        relative = entry.get("relative")
        if relative is not None and relative != base and relative not in lexicons:
            raise ValueError(f"language {lang!r}: relative {relative!r} must be listed earlier in the suite")
        spec = CipherSpec(
            lang_code=lang,
            lexicon_seed=entry["lexicon_seed"],
            shared_fraction=entry.get("shared_fraction", 0.0),
            reorder=Reorder.from_spec(entry.get("reorder", "none")),
            relative_lang=relative,
        )
        relative_lex = lexicons.get(relative) if relative is not None else None
        lexicons[lang] = build_lexicon(spec, w, base, relative_lex)
        transforms[lang] = _Transform(lexicons[lang], spec.reorder)

        if entry["parallel"] > 0:
            sents = draw_base_sentences(entry["parallel"], len_range, w, zipf_s, derive_seed(data_seed, lang, "parallel"))
            pairs = [(s, transforms[lang].apply(s)) for s in sents]
            registry.add_parallel(ParallelStore(base, lang, pairs))
        if entry["mono"] > 0:
            sents = draw_base_sentences(entry["mono"], len_range, w, zipf_s, derive_seed(data_seed, lang, "mono"))
            registry.add_mono(MonoStore(lang, [transforms[lang].apply(s) for s in sents]))
    if suite.get("base_mono", 0) > 0:
        sents = draw_base_sentences(suite["base_mono"], len_range, w, zipf_s, derive_seed(data_seed, base, "mono"))
        registry.add_mono(MonoStore(base, sents))

    train_strings: set[str] = set()
    for store in registry.parallel.values():
        for s, t in store.pairs:
            train_strings.add(s)
            train_strings.add(t)
    for store in registry.mono.values():
        train_strings.update(store.sentences)

    n_test = suite["test_size"]
    pool = draw_base_sentences(
        n_test * suite.get("test_overdraw", 3), len_range, w, zipf_s, derive_seed(data_seed, "test")
    )
    test: dict[tuple[str, str], ParallelStore] = {}
    filtered = 0
    wanted = [tuple(d) for d in config["evaluate"]["directions"]]
    for p in config["evaluate"].get("pivot", []):
        if p["pivot"] == p["tgt"]:
            raise ValueError(f"pivot spec {p}: pivot language equals target language")
        if (p["src"], p["tgt"]) not in wanted:
            wanted.append((p["src"], p["tgt"]))
    for src, tgt in wanted:
        for lang in (src, tgt):
            if lang not in transforms:
                raise ValueError(f"evaluation direction names unknown language {lang!r}")
        pairs = []
        for s in pool:
            a, b = transforms[src].apply(s), transforms[tgt].apply(s)
            if a in train_strings or b in train_strings:
                filtered += 1
                continue
            pairs.append((a, b))
            if len(pairs) == n_test:
                break
        if len(pairs) < n_test:
            raise ValueError(
                f"direction {src}-{tgt}: only {len(pairs)} test pairs survive the train-overlap filter; "
                "raise test_overdraw or the sentence space"
            )
        test[(src, tgt)] = ParallelStore(src, tgt, pairs)

    texts = []
    for store in registry.parallel.values():
        for s, t in store.pairs:
            texts.append(s)
            texts.append(t)
    for store in registry.mono.values():
        texts.extend(store.sentences)
    vocab = train_vocab(texts, config["vocab"]["target_size"], [base] + [e["lang"] for e in suite["languages"]])

    return SuiteData(
        config=config,
        base_lang=base,
        cipher_langs=[e["lang"] for e in suite["languages"]],
        registry=registry,
        test=test,
        vocab=vocab,
        transforms=transforms,
        n_test_filtered=filtered,
    )


# -- arms ---------------------------------------------------------------------------


def build_leave_one_out(registry: CorpusRegistry, lang: str) -> CorpusRegistry:
    """Copy of the registry without parallel stores touching `lang`; mono kept."""
    out = CorpusRegistry()
    dropped = 0
    for (s, t), store in registry.parallel.items():
        if lang in (s, t):
            dropped += 1
            continue
        out.add_parallel(store)
    for store in registry.mono.values():
        out.add_mono(store)
    if dropped == 0:
        warnings.warn(f"leave-one-out for {lang!r}: no parallel store mentions it; registry unchanged")
    return out


def parse_arm(arm: str) -> tuple[str, str | None]:
    kind, _, arg = arm.partition(":")
    known = {"bilingual", "multilingual", "multilingual_mono", "leave_one_out", "loo_parallel_only", "mono_only"}
    if kind not in known:
        raise ValueError(f"unknown arm {arm!r}; known kinds: {sorted(known)}")
    if kind in ("leave_one_out", "loo_parallel_only", "mono_only") and not arg:
        raise ValueError(f"arm {kind!r} needs a language, e.g. {kind}:ee")
    return kind, arg or None


def arm_registry(suite: SuiteData, arm: str, bilingual_pair: tuple[str, str]) -> tuple[CorpusRegistry, float]:
    """Sub-registry and mono_ratio for one arm."""
    kind, arg = parse_arm(arm)
    base_ratio = suite.config["policy"]["mono_ratio"]
    if kind == "bilingual":
        key = None
        for cand in (bilingual_pair, bilingual_pair[::-1]):
            if tuple(cand) in suite.registry.parallel:
                key = tuple(cand)
        if key is None:
            raise ValueError(f"no parallel store for bilingual pair {bilingual_pair}")
        out = CorpusRegistry()
        out.add_parallel(suite.registry.parallel[key])
        return out, 0.0
    if kind == "multilingual":
        out = CorpusRegistry()
        for store in suite.registry.parallel.values():
            out.add_parallel(store)
        return out, 0.0
    if kind == "multilingual_mono":
        out = CorpusRegistry()
        for store in suite.registry.parallel.values():
            out.add_parallel(store)
        for store in suite.registry.mono.values():
            out.add_mono(store)
        return out, base_ratio
    if kind == "leave_one_out":
        return build_leave_one_out(suite.registry, arg), base_ratio
    if kind == "loo_parallel_only":
        loo = build_leave_one_out(suite.registry, arg)
        out = CorpusRegistry()
        for store in loo.parallel.values():
            out.add_parallel(store)
        return out, 0.0
    # mono_only: the removed language plus the base language, mass batches only
    out = CorpusRegistry()
    for lang in dict.fromkeys((arg, suite.base_lang)):
        if lang not in suite.registry.mono:
            raise ValueError(f"mono_only:{arg} needs mono data for {lang!r}")
        out.add_mono(suite.registry.mono[lang])
    return out, 1.0


# -- experiment runner ---------------------------------------------------------------


@dataclass
class ExperimentReport:
    config: dict
    config_hash: str
    cells: list[dict]
    medians: dict[str, float]
    suite_stats: dict

    def to_json(self) -> str:
        payload = {
            "config": self.config,
            "config_hash": self.config_hash,
            "cells": self.cells,
            "medians": self.medians,
            "suite_stats": self.suite_stats,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        d = json.loads(text)
        return cls(d["config"], d["config_hash"], d["cells"], d["medians"], d["suite_stats"])


def experiment_seeds(config: dict) -> list[int]:
    env = os.environ.get(SEED_ENV_VAR)
    if env:
        try:
            return [int(x) for x in env.split(",") if x.strip() != ""]
        except ValueError:
            raise ValueError(f"{SEED_ENV_VAR} must be comma-separated integers, got {env!r}") from None
    return list(config["seeds"])


def _median_key(arm: str, direction: str) -> str:
    return f"{arm}|{direction}"


def run_experiment(config: dict | None, out_dir, suite: SuiteData | None = None) -> ExperimentReport:
    """Train every arm x seed and score every evaluation direction.

    `config` is deep-merged over default_config(). A prebuilt suite can be
    passed to share corpora and vocab across calls with the same data
    config. Seeds can be overridden with the MTLAB_SEEDS env var.
    """
    config = merge_config(config if isinstance(config, dict) else None)
    for arm in config["arms"]:
        parse_arm(arm)
    chash = config_hash(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    if suite is None:
        suite = build_suite(config)
    elif config_hash(suite.config) != chash:
        # a prebuilt suite may be reused across configs that only differ in arms/seeds/train
        for key in ("suite", "vocab", "evaluate"):
            if suite.config[key] != config[key]:
                raise ValueError(f"prebuilt suite disagrees with config section {key!r}")

    write_data_dir(suite, out / "data")

    seeds = experiment_seeds(config)
    policy_cfg = config["policy"]
    mask_spec = MaskSpec(
        fragment_ratio=config["mask"]["fragment_ratio"],
        replace_probs=tuple(config["mask"]["replace_probs"]),
        min_len=config["mask"]["min_len"],
    )
    model_config = ModelConfig(vocab_size=suite.vocab.size, **config["model"])
    settings = DecodeSettings(
        max_steps=config["evaluate"]["max_steps"],
        beam_size=config["evaluate"]["beam_size"],
    )

    cells: list[dict] = []
    for arm in config["arms"]:
        registry, mono_ratio = arm_registry(suite, arm, tuple(config["bilingual_pair"]))
        for seed in seeds:
            run_dir = out / "arms" / arm.replace(":", "_") / f"seed-{seed}"
            try:
                cells.extend(
                    _run_arm_seed(
                        suite, registry, mono_ratio, arm, seed, run_dir,
                        policy_cfg, mask_spec, model_config, config["train"], settings,
                        config["evaluate"],
                    )
                )
            except Exception as e:  # isolate arm failures, keep the report going
                log.exception("arm %s seed %d failed", arm, seed)
                for src, tgt in (tuple(d) for d in config["evaluate"]["directions"]):
                    cells.append({"arm": arm, "seed": seed, "direction": f"{src}-{tgt}", "error": f"{type(e).__name__}: {e}"})

    cells.sort(key=lambda c: (c["arm"], c["direction"], c["seed"]))
    by_key: dict[str, list[float]] = {}
    for cell in cells:
        if "error" in cell:
            continue
        by_key.setdefault(_median_key(cell["arm"], cell["direction"]), []).append(cell["bleu"])
    medians = {k: float(statistics.median(v)) for k, v in sorted(by_key.items())}

    report = ExperimentReport(
        config=config,
        config_hash=chash,
        cells=cells,
        medians=medians,
        suite_stats={
            "registry": suite.registry.stats(),
            "vocab_size": suite.vocab.size,
            "test_sizes": {f"{s}-{t}": len(st) for (s, t), st in sorted(suite.test.items())},
            "test_filtered": suite.n_test_filtered,
        },
    )
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    return report


def write_data_dir(suite: SuiteData, data_dir) -> None:
    """Materialize a suite as plain text files plus a registry.json manifest."""
    from .subword import save_vocab

    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "base_lang": suite.base_lang,
        "languages": suite.cipher_langs,
        "max_len": max(suite.config["suite"]["len_range"]),
        "parallel": [],
        "mono": [],
        "test": [],
    }
    for (s, t), store in sorted(suite.registry.parallel.items()):
        fs, ft = f"train.{s}-{t}.{s}.txt", f"train.{s}-{t}.{t}.txt"
        (data_dir / fs).write_text("\n".join(a for a, _ in store.pairs) + "\n", encoding="utf-8")
        (data_dir / ft).write_text("\n".join(b for _, b in store.pairs) + "\n", encoding="utf-8")
        manifest["parallel"].append({"src": s, "tgt": t, "src_file": fs, "tgt_file": ft})
    for lang, store in sorted(suite.registry.mono.items()):
        f = f"mono.{lang}.txt"
        (data_dir / f).write_text("\n".join(store.sentences) + "\n", encoding="utf-8")
        manifest["mono"].append({"lang": lang, "file": f})
    for (s, t), store in sorted(suite.test.items()):
        fs, ft = f"test.{s}-{t}.{s}.txt", f"test.{s}-{t}.{t}.txt"
        (data_dir / fs).write_text("\n".join(a for a, _ in store.pairs) + "\n", encoding="utf-8")
        (data_dir / ft).write_text("\n".join(b for _, b in store.pairs) + "\n", encoding="utf-8")
        manifest["test"].append({"src": s, "tgt": t, "src_file": fs, "tgt_file": ft})
    save_vocab(suite.vocab, data_dir / "vocab.txt")
    (data_dir / "registry.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


@dataclass
class DataDir:
    registry: CorpusRegistry
    vocab: Vocabulary
    test: dict[tuple[str, str], ParallelStore]
    meta: dict


def load_data_dir(data_dir) -> DataDir:
    """Rebuild stores from a directory written by write_data_dir / make-synth."""
    from .corpus import load_mono, load_parallel
    from .subword import load_vocab

    data_dir = Path(data_dir)
    manifest_path = data_dir / "registry.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{data_dir}: no registry.json; not a data directory")
    meta = json.loads(manifest_path.read_text(encoding="utf-8"))
    max_len = meta["max_len"]
    registry = CorpusRegistry()
    for entry in meta["parallel"]:
        registry.add_parallel(
            load_parallel(data_dir / entry["src_file"], data_dir / entry["tgt_file"], entry["src"], entry["tgt"], max_len)
        )
    for entry in meta["mono"]:
        registry.add_mono(load_mono(data_dir / entry["file"], entry["lang"], max_len))
    test = {}
    for entry in meta["test"]:
        test[(entry["src"], entry["tgt"])] = load_parallel(
            data_dir / entry["src_file"], data_dir / entry["tgt_file"], entry["src"], entry["tgt"], max_len
        )
    return DataDir(registry=registry, vocab=load_vocab(data_dir / "vocab.txt"), test=test, meta=meta)


def _run_arm_seed(
    suite, registry, mono_ratio, arm, seed, run_dir,
    policy_cfg, mask_spec, model_config, train_cfg, settings, eval_cfg,
) -> list[dict]:
    policy = SamplingPolicy(
        batch_size=policy_cfg["batch_size"],
        max_len=policy_cfg["max_len"],
        temperature=policy_cfg["temperature"],
        mono_ratio=mono_ratio,
        seed=derive_seed(seed, arm, "sampler"),
    )
    tconf = TrainConfig(seed=derive_seed(seed, arm, "train"), **train_cfg)
    result = train(registry, suite.vocab, policy, model_config, tconf, run_dir, mask_spec=mask_spec)

    cells = []
    for src, tgt in (tuple(d) for d in eval_cfg["directions"]):
        bleu_result, hyps = score_direction(result.params, suite.vocab, suite.test[(src, tgt)], settings)
        (Path(run_dir) / f"hyp.{src}-{tgt}.txt").write_text("\n".join(hyps) + "\n", encoding="utf-8")
        cell = {"arm": arm, "seed": seed, "direction": f"{src}-{tgt}", "checkpoint": str(result.checkpoint_dir)}
        cell.update(bleu_result.to_dict())
        cells.append(cell)
    for spec in eval_cfg.get("pivot", []):
        src, piv, tgt = spec["src"], spec["pivot"], spec["tgt"]
        store = suite.test[(src, tgt)]
        from .evaluation import pivot_translate

        hyps = pivot_translate(result.params, suite.vocab, [a for a, _ in store.pairs], piv, tgt, settings)
        (Path(run_dir) / f"hyp.{src}-{piv}-{tgt}.txt").write_text("\n".join(hyps) + "\n", encoding="utf-8")
        bleu_result = corpus_bleu(hyps, [b for _, b in store.pairs])
        cell = {"arm": arm, "seed": seed, "direction": f"{src}-{tgt}|pivot={piv}", "checkpoint": str(result.checkpoint_dir)}
        cell.update(bleu_result.to_dict())
        cells.append(cell)
    return cells


# -- report rendering -----------------------------------------------------------------


def emit_report(report: ExperimentReport, fmt: str = "txt") -> str:
    """Render a report as json, csv, or a fixed-width text table."""
    if fmt == "json":
        return report.to_json()
    if fmt == "csv":
        cols = ["arm", "direction", "seed", "bleu", "brevity_penalty", "hyp_len", "ref_len", "error"]
        lines = [",".join(cols)]
        for c in report.cells:
            lines.append(",".join(_csv_field(c.get(k)) for k in cols))
        return "\n".join(lines) + "\n"
    if fmt != "txt":
        raise ValueError(f"unknown report format {fmt!r}; want json, csv, or txt")
    lines = [f"config {report.config_hash[:12]}  vocab {report.suite_stats['vocab_size']}"]
    lines.append("")
    lines.append("medians (over seeds)")
    width = max((len(k) for k in report.medians), default=10)
    for key, val in report.medians.items():
        lines.append(f"  {key:<{width}}  {val:7.2f}")
    lines.append("")
    lines.append("cells")
    for c in report.cells:
        if "error" in c:
            lines.append(f"  {c['arm']:<24} {c['direction']:<16} seed {c['seed']}  FAILED {c['error']}")
        else:
            lines.append(
                f"  {c['arm']:<24} {c['direction']:<16} seed {c['seed']}  bleu {c['bleu']:6.2f}  bp {c['brevity_penalty']:.3f}"
            )
    return "\n".join(lines) + "\n"


def _csv_field(v) -> str:
    if v is None:
        return ""
    s = str(v)
    if "," in s or '"' in s or "\n" in s:
        s = '"' + s.replace('"', '""') + '"'
    return s
