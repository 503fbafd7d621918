"""Corpus stores, file loaders, and synthetic cipher-language generation.

A cipher language is a bijective word-for-word relabeling of a base
language, optionally composed with a self-inverse token reorder. Every
translation question about such data has one exact answer, so generated
corpora double as labeled test sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .subword import BOUNDARY, normalize


class CorpusError(ValueError):
    """Raised for malformed corpus files or invalid generation requests."""


@dataclass
class ParallelStore:
    """Aligned sentence pairs for one language pair, one orientation."""

    src_lang: str
    tgt_lang: str
    pairs: list[tuple[str, str]]
    n_dropped: int = 0

    def __post_init__(self):
        if self.src_lang == self.tgt_lang:
            raise CorpusError(f"parallel store with src_lang == tgt_lang ({self.src_lang!r})")

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class MonoStore:
    """Monolingual sentences for one language."""

    lang: str
    sentences: list[str]
    n_truncated: int = 0

    def __len__(self) -> int:
        return len(self.sentences)


class CorpusRegistry:
    """All stores for one experiment, keyed by pair or language."""

    def __init__(self):
        self.parallel: dict[tuple[str, str], ParallelStore] = {}
        self.mono: dict[str, MonoStore] = {}

    def add_parallel(self, store: ParallelStore) -> None:
        key = (store.src_lang, store.tgt_lang)
        if key in self.parallel or (key[1], key[0]) in self.parallel:
            raise CorpusError(f"parallel store for {key[0]}-{key[1]} already registered")
        self.parallel[key] = store

    def add_mono(self, store: MonoStore) -> None:
        if store.lang in self.mono:
            raise CorpusError(f"mono store for {store.lang!r} already registered")
        self.mono[store.lang] = store

    @property
    def languages(self) -> list[str]:
        langs = {l for pair in self.parallel for l in pair}
        langs.update(self.mono)
        return sorted(langs)

    def stats(self) -> dict:
        return {
            "parallel": {f"{s}-{t}": len(st) for (s, t), st in sorted(self.parallel.items())},
            "mono": {l: len(st) for l, st in sorted(self.mono.items())},
        }


def _read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        text = f.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for i, line in enumerate(lines):
        if BOUNDARY in line:
            raise CorpusError(f"{path}: line {i + 1}: contains the vocab boundary marker {BOUNDARY!r}")
    return lines


def load_parallel(src_path, tgt_path, src_lang: str, tgt_lang: str, max_len: int) -> ParallelStore:
    """Load an aligned pair of files, dropping empty and over-length pairs.

    Length is counted in whitespace tokens on either side; the number of
    dropped pairs is recorded on the store.
    """
    if max_len < 1:
        raise CorpusError(f"max_len must be >= 1, got {max_len}")
    src_lines, tgt_lines = _read_lines(src_path), _read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise CorpusError(
            f"line count mismatch: {src_path} has {len(src_lines)}, {tgt_path} has {len(tgt_lines)}"
        )
    pairs, dropped = [], 0
    for s, t in zip(src_lines, tgt_lines):
        s, t = normalize(s), normalize(t)
        if not s or not t or len(s.split(" ")) > max_len or len(t.split(" ")) > max_len:
            dropped += 1
            continue
        pairs.append((s, t))
    if not pairs:
        raise CorpusError(f"{src_path}: no pairs left after filtering")
    return ParallelStore(src_lang, tgt_lang, pairs, n_dropped=dropped)


def load_mono(path, lang: str, max_len: int) -> MonoStore:
    """Load one sentence per line; over-length sentences are truncated, not dropped."""
    if max_len < 1:
        raise CorpusError(f"max_len must be >= 1, got {max_len}")
    sentences, truncated = [], 0
    for line in _read_lines(path):
        line = normalize(line)
        if not line:
            continue
        words = line.split(" ")
        if len(words) > max_len:
            line = " ".join(words[:max_len])
            truncated += 1
        sentences.append(line)
    if not sentences:
        raise CorpusError(f"{path}: no sentences left after filtering")
    return MonoStore(lang, sentences, n_truncated=truncated)


_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def base_word(k: int) -> str:
    """Bijective base-26 surface for word index k: a, b, .., z, aa, ab, .."""
    if k < 0:
        raise ValueError(f"word index must be >= 0, got {k}")
    out = []
    k += 1
    while k:
        k, r = divmod(k - 1, 26)
        out.append(_LETTERS[r])
    return "".join(reversed(out))


@dataclass(frozen=True)
class Reorder:
    """Self-inverse token permutation applied to cipher sentences.

    kinds: "none"; "reverse_window" (reverse each consecutive window of
    `window` tokens, whole sentence when window is None); "adjacent_swap"
    (swap tokens 0 and 1, 2 and 3, ..).
    """

    kind: str = "none"
    window: int | None = None

    def __post_init__(self):
        if self.kind not in ("none", "reverse_window", "adjacent_swap"):
            raise ValueError(f"unknown reorder kind {self.kind!r}")
        if self.window is not None and (self.kind != "reverse_window" or self.window < 2):
            raise ValueError(f"window only applies to reverse_window and must be >= 2, got {self.window}")

    @classmethod
    def from_spec(cls, spec) -> "Reorder":
        """Parse "none", "adjacent_swap", "reverse_window", "reverse_window:4"."""
        if isinstance(spec, Reorder):
            return spec
        if isinstance(spec, str):
            if ":" in spec:
                kind, _, w = spec.partition(":")
                return cls(kind, int(w))
            return cls(spec)
        raise ValueError(f"cannot parse reorder spec {spec!r}")

    def to_spec(self) -> str:
        return f"{self.kind}:{self.window}" if self.window is not None else self.kind

    def apply(self, tokens: list[str]) -> list[str]:
        if self.kind == "none":
            return list(tokens)
        if self.kind == "adjacent_swap":
            out = list(tokens)
            for i in range(0, len(out) - 1, 2):
                out[i], out[i + 1] = out[i + 1], out[i]
            return out
        w = self.window or len(tokens)
        out = []
        for i in range(0, len(tokens), w):
            out.extend(reversed(tokens[i : i + w]))
        return out

    def inverse(self) -> "Reorder":
        return self  # every kind is an involution


@dataclass(frozen=True)
class CipherSpec:
    """Recipe for one cipher language relative to the base language."""

    lang_code: str
    lexicon_seed: int
    shared_fraction: float = 0.0
    reorder: Reorder = field(default_factory=Reorder)
    relative_lang: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.shared_fraction <= 1.0:
            raise CorpusError(f"shared_fraction must be in [0, 1], got {self.shared_fraction}")
        if self.shared_fraction > 0 and self.relative_lang is None:
            raise CorpusError("shared_fraction > 0 requires relative_lang")
        if self.relative_lang == self.lang_code:
            raise CorpusError("relative_lang must differ from lang_code")


def build_lexicon(
    spec: CipherSpec,
    base_vocab_size: int,
    base_lang: str,
    relative_lexicon: dict[str, str] | None = None,
) -> dict[str, str]:
    """Bijective base-word -> cipher-surface map.

    Unshared entries get the language code uppercased as a surface prefix,
    so cipher surfaces never collide with base words or with another
    language's unshared surfaces. Shared entries copy the relative
    language's surface verbatim (base words themselves when the relative
    is the base language).
    """
    rng = np.random.default_rng(spec.lexicon_seed)
    perm = rng.permutation(base_vocab_size)
    shared: set[int] = set()
    if spec.shared_fraction > 0:
        n_shared = int(round(spec.shared_fraction * base_vocab_size))
        shared = set(rng.choice(base_vocab_size, size=n_shared, replace=False).tolist())
        if spec.relative_lang != base_lang and relative_lexicon is None:
            raise CorpusError(
                f"cipher {spec.lang_code!r} shares entries with {spec.relative_lang!r} "
                "but no relative lexicon was given"
            )
    prefix = spec.lang_code.upper()
    lex = {}
    for j in range(base_vocab_size):
        word = base_word(j)
        if j in shared:
            lex[word] = word if spec.relative_lang == base_lang else relative_lexicon[word]
        else:
            lex[word] = prefix + base_word(int(perm[j]))
    if len(set(lex.values())) != base_vocab_size:
        raise CorpusError(f"cipher {spec.lang_code!r}: lexicon is not injective")
    return lex


def zipf_probs(n: int, s: float) -> np.ndarray:
    """P(rank k) proportional to (k+1)^-s over k = 0..n-1; s=0 is uniform."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    if s < 0:
        raise ValueError(f"zipf exponent must be >= 0, got {s}")
    w = np.arange(1, n + 1, dtype=np.float64) ** -s
    return w / w.sum()


# The base language has sentence-internal structure: after the first token,
# each position continues a fixed word-successor chain with this probability
# and draws fresh from the Zipf marginal otherwise. Without it sentences are
# memoryless and masked-span reconstruction has nothing to learn. The weight
# sets how much of each sentence is predictable from context (chain steps are
# what monolingual training can model) versus carried by fresh draws.
CHAIN_WEIGHT = 0.8


def successor_table(base_vocab_size: int) -> np.ndarray:
    """Word-successor map shared by every corpus over one word inventory.

    Words cycle within blocks of four adjacent frequency ranks, so the
    map is a fixed-point-free permutation and every word's successor has
    nearly its own marginal probability. Chain inflow then preserves the
    Zipf shape of the marginals for any exponent, while the next-word
    conditional stays a deterministic lookup.
    """
    w = base_vocab_size
    succ = np.zeros(w, dtype=np.int64)
    nblocks = max(1, w // 4)
    for b in range(nblocks):
        lo = 4 * b
        hi = w if b == nblocks - 1 else lo + 4
        size = hi - lo
        for j in range(size):
            succ[lo + j] = lo + (j + 1) % size
    return succ


def draw_base_sentences(
    n: int, len_range: tuple[int, int], base_vocab_size: int, zipf_s: float, seed: int
) -> list[str]:
    """Sample n base-language sentences from the chain-and-Zipf process."""
    lo, hi = len_range
    if not (1 <= lo <= hi):
        raise CorpusError(f"bad len_range {len_range}: want 1 <= lo <= hi")
    if base_vocab_size < 10:
        raise CorpusError(f"base_vocab_size must be >= 10, got {base_vocab_size}")
    if n < 1:
        raise CorpusError(f"n_sentences must be >= 1, got {n}")
    succ = successor_table(base_vocab_size)
    rng = np.random.default_rng(seed)
    lengths = rng.integers(lo, hi + 1, size=n)
    total = int(lengths.sum())
    # one Zipf candidate and one chain coin per position, so the stream
    # layout is independent of which branch each position takes
    fresh = rng.choice(base_vocab_size, size=total, p=zipf_probs(base_vocab_size, zipf_s))
    coin = rng.random(total)
    out, pos = [], 0
    for m in lengths:
        idx = [int(fresh[pos])]
        for j in range(pos + 1, pos + int(m)):
            idx.append(int(succ[idx[-1]]) if coin[j] < CHAIN_WEIGHT else int(fresh[j]))
        out.append(" ".join(base_word(k) for k in idx))
        pos += int(m)
    return out


def generate_cipher_corpus(
    spec: CipherSpec,
    n_sentences: int,
    len_range: tuple[int, int],
    base_vocab_size: int,
    zipf_s: float,
    seed: int,
    *,
    base_lang: str = "aa",
    relative_lexicon: dict[str, str] | None = None,
) -> tuple[MonoStore, MonoStore, ParallelStore]:
    """Draw base sentences and encipher them.

    Returns (base mono, cipher mono, base->cipher parallel), all three
    views of the same drawn sentences. Sentences are drawn independently
    with lengths uniform on len_range inclusive; the first token follows
    Zipf(s) over word ranks and each later token continues the fixed word
    chain with probability CHAIN_WEIGHT or draws fresh from Zipf(s), so
    unigram frequencies stay Zipf-shaped while sentences keep predictable
    internal structure.
    """
    if spec.lang_code == base_lang:
        raise CorpusError(f"cipher lang_code {spec.lang_code!r} collides with the base language")

    lex = build_lexicon(spec, base_vocab_size, base_lang, relative_lexicon)
    base_sents = draw_base_sentences(n_sentences, len_range, base_vocab_size, zipf_s, seed)
    cipher_sents, pairs = [], []
    for b in base_sents:
        c = " ".join(spec.reorder.apply([lex[w] for w in b.split(" ")]))
        cipher_sents.append(c)
        pairs.append((b, c))
    return (
        MonoStore(base_lang, base_sents),
        MonoStore(spec.lang_code, cipher_sents),
        ParallelStore(base_lang, spec.lang_code, pairs),
    )


def decipher(sentence: str, lexicon: dict[str, str], reorder: Reorder) -> str:
    """Exact inverse of the enciphering transform, for oracle checks."""
    inv = {v: k for k, v in lexicon.items()}
    tokens = reorder.inverse().apply(normalize(sentence).split(" "))
    return " ".join(inv[t] for t in tokens)
