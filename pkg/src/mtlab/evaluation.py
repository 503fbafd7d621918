"""Corpus BLEU and model scoring helpers.

BLEU here is the classic corpus-level score: clipped n-gram precisions up
to order 4, geometric mean, brevity penalty min(1, e^(1 - r/c)), scaled
by 100. Tokenization is plain whitespace, which is exact for the
synthetic corpora this lab trains on.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from . import model as model_mod
from .corpus import ParallelStore
from .model import ModelParams
from .subword import Vocabulary, normalize

N_MAX = 4


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def ngram_precisions(hypotheses: list[str], references: list[str], n_max: int = N_MAX):
    """Corpus-level clipped match and total counts for orders 1..n_max."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("empty corpus")
    matches = [0] * n_max
    totals = [0] * n_max
    for hyp, ref in zip(hypotheses, references):
        h = normalize(hyp).split()
        r = normalize(ref).split()
        for n in range(1, n_max + 1):
            hc = _ngrams(h, n)
            rc = _ngrams(r, n)
            totals[n - 1] += max(len(h) - n + 1, 0)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
    return matches, totals


@dataclass
class BleuResult:
    bleu: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    smoothing: str
    empty_hypotheses: bool = False

    def to_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "precisions": self.precisions,
            "brevity_penalty": self.brevity_penalty,
            "hyp_len": self.hyp_len,
            "ref_len": self.ref_len,
            "smoothing": self.smoothing,
            "empty_hypotheses": self.empty_hypotheses,
        }


def corpus_bleu(
    hypotheses: list[str],
    references: list[str],
    smoothing: str = "none",
    smooth_k: float = 1.0,
) -> BleuResult:
    """Corpus BLEU with optional add-k smoothing on orders 2..4.

    Under smoothing "none" any zero precision zeroes the score. A corpus
    of entirely empty hypotheses scores 0 with empty_hypotheses set.
    """
    if smoothing not in ("none", "add_k"):
        raise ValueError(f"unknown smoothing {smoothing!r}")
    if smoothing == "add_k" and smooth_k <= 0:
        raise ValueError(f"smooth_k must be > 0, got {smooth_k}")
    matches, totals = ngram_precisions(hypotheses, references)
    hyp_len = sum(len(normalize(h).split()) for h in hypotheses)
    ref_len = sum(len(normalize(r).split()) for r in references)
    label = "none" if smoothing == "none" else f"add_k({smooth_k:g})"
    if hyp_len == 0:
        return BleuResult(0.0, [0.0] * N_MAX, 0.0, 0, ref_len, label, empty_hypotheses=True)
    precisions = []
    for n in range(1, N_MAX + 1):
        m, t = matches[n - 1], totals[n - 1]
        if smoothing == "add_k" and n >= 2:
            m, t = m + smooth_k, t + smooth_k
        precisions.append(m / t if t > 0 else 0.0)
    bp = min(1.0, math.exp(1.0 - ref_len / hyp_len))
    if any(p == 0.0 for p in precisions):
        bleu = 0.0
    else:
        bleu = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / N_MAX)
    return BleuResult(bleu, precisions, bp, hyp_len, ref_len, label)


@dataclass(frozen=True)
class DecodeSettings:
    """How hypotheses are produced during evaluation."""

    max_steps: int = 32
    beam_size: int = 1
    length_penalty: float = 0.0
    batch_size: int = 64
    smoothing: str = "none"
    smooth_k: float = 1.0

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.beam_size < 1:
            raise ValueError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def translate_sentences(
    params: ModelParams,
    vocab: Vocabulary,
    sentences: list[str],
    target_lang: str,
    settings: DecodeSettings = DecodeSettings(),
) -> list[str]:
    """Encode, decode toward target_lang, and detokenize back to text."""
    room = params.config.max_positions - 2
    src_seqs = [vocab.encode(s)[:room] for s in sentences]
    if settings.beam_size == 1:
        hyp_ids = model_mod.greedy_decode_batch(
            params, vocab, src_seqs, target_lang, settings.max_steps, settings.batch_size
        )
    else:
        hyp_ids = [
            model_mod.beam_decode(
                params, vocab, s, target_lang, settings.beam_size, settings.max_steps, settings.length_penalty
            )
            for s in src_seqs
        ]
    return [vocab.decode(ids) for ids in hyp_ids]


def score_direction(
    params: ModelParams,
    vocab: Vocabulary,
    test_store: ParallelStore,
    settings: DecodeSettings = DecodeSettings(),
) -> tuple[BleuResult, list[str]]:
    """Translate the store's source side and score against its target side."""
    if not test_store.pairs:
        raise ValueError("empty test set")
    sources = [s for s, _ in test_store.pairs]
    references = [t for _, t in test_store.pairs]
    hypotheses = translate_sentences(params, vocab, sources, test_store.tgt_lang, settings)
    return corpus_bleu(hypotheses, references, settings.smoothing, settings.smooth_k), hypotheses


def pivot_translate(
    params: ModelParams,
    vocab: Vocabulary,
    sentences: list[str],
    pivot_lang: str,
    target_lang: str,
    settings: DecodeSettings = DecodeSettings(),
) -> list[str]:
    """Two-hop translation: source -> pivot -> target with one model."""
    if pivot_lang == target_lang:
        raise ValueError(f"pivot language equals target language {target_lang!r}")
    mid = translate_sentences(params, vocab, sentences, pivot_lang, settings)
    return translate_sentences(params, vocab, mid, target_lang, settings)
