"""Byte-pair-encoding subword vocabulary.

Words are whitespace tokens; base symbols are characters, with a marker
appended to each word-final character so decoding can restore word
boundaries. Merges are learned greedily by pair frequency with a
lexicographic tie-break, which makes training a pure function of the
input text.
"""

from __future__ import annotations

import heapq
import re
from collections import Counter
from dataclasses import dataclass, field

BOUNDARY = "▁"  # appended to word-final symbols; must not occur in text

RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>", "<mask>")
PAD, BOS, EOS, UNK, MASK = range(5)

_TAG_RE = re.compile(r"^<2([a-z]+)>$")


class VocabFormatError(ValueError):
    """Raised when a vocab file cannot be parsed."""


def normalize(text: str) -> str:
    """Collapse whitespace runs and strip the ends."""
    return " ".join(text.split())


def lang_tag(code: str) -> str:
    return f"<2{code}>"


def _check_lang_codes(codes) -> list[str]:
    seen = set()
    for code in codes:
        if not code or not code.isascii() or not code.isalpha() or code != code.lower():
            raise ValueError(f"bad language code {code!r}: want lowercase ascii letters")
        if code in seen:
            raise ValueError(f"duplicate language code {code!r}")
        seen.add(code)
    return sorted(seen)


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple(word[:-1]) + (word[-1] + BOUNDARY,)


@dataclass
class Vocabulary:
    """Immutable subword inventory with dense ids.

    Ids 0..4 are <pad>, <bos>, <eos>, <unk>, <mask>; language tags <2xx>
    follow at ids 5.. in sorted language-code order; subword pieces fill
    the rest. `merges` replays the learned merge list in order.
    """

    pieces: list[str]
    merges: list[tuple[str, str]]
    _piece_to_id: dict = field(default_factory=dict, repr=False, compare=False)
    _ranks: dict = field(default_factory=dict, repr=False, compare=False)
    _encode_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if list(self.pieces[: len(RESERVED)]) != list(RESERVED):
            raise ValueError("pieces must start with the reserved tokens")
        self._piece_to_id = {p: i for i, p in enumerate(self.pieces)}
        if len(self._piece_to_id) != len(self.pieces):
            raise ValueError("duplicate piece")
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._encode_cache = {}

    @property
    def size(self) -> int:
        return len(self.pieces)

    @property
    def lang_tags(self) -> dict[str, int]:
        tags = {}
        for i in range(len(RESERVED), len(self.pieces)):
            m = _TAG_RE.match(self.pieces[i])
            if not m:
                break
            tags[m.group(1)] = i
        return tags

    @property
    def reserved(self) -> dict[str, int]:
        return {"pad": PAD, "bos": BOS, "eos": EOS, "unk": UNK, "mask": MASK}

    @property
    def first_text_id(self) -> int:
        """Smallest id that is neither reserved nor a language tag."""
        return len(RESERVED) + len(self.lang_tags)

    def tag_id(self, code: str) -> int:
        try:
            return self._piece_to_id[lang_tag(code)]
        except KeyError:
            raise KeyError(f"no language tag for {code!r}") from None

    def _encode_word(self, word: str) -> tuple[int, ...]:
        cached = self._encode_cache.get(word)
        if cached is not None:
            return cached
        syms = list(_word_symbols(word))
        # Repeatedly apply the lowest-ranked merge present. Merges only ever
        # create pairs involving the new symbol, so this reproduces replaying
        # the learned list in order.
        while len(syms) > 1:
            best_rank, best_idx = None, None
            for i in range(len(syms) - 1):
                r = self._ranks.get((syms[i], syms[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best_rank, best_idx = r, i
            if best_rank is None:
                break
            a, b = self.merges[best_rank]
            out, i = [], 0
            while i < len(syms):
                if i < len(syms) - 1 and syms[i] == a and syms[i + 1] == b:
                    out.append(a + b)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            syms = out
        ids = tuple(self._piece_to_id.get(s, UNK) for s in syms)
        self._encode_cache[word] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        """Subword ids for a sentence; no bos/eos/tag framing."""
        ids: list[int] = []
        for word in normalize(text).split(" "):
            if word:
                ids.extend(self._encode_word(word))
        return ids

    def decode(self, ids) -> str:
        """Text for a id sequence; reserved ids and language tags are dropped."""
        n_special = self.first_text_id
        words, cur = [], []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.pieces):
                raise ValueError(f"id {i} out of range for vocab of size {len(self.pieces)}")
            if i < n_special:
                continue
            piece = self.pieces[i]
            if piece.endswith(BOUNDARY):
                cur.append(piece[: -len(BOUNDARY)])
                words.append("".join(cur))
                cur = []
            else:
                cur.append(piece)
        if cur:
            words.append("".join(cur))
        return " ".join(words)


def train_vocab(texts, target_size: int, reserved_langs) -> Vocabulary:
    """Learn a BPE vocabulary of at most target_size pieces.

    Merging stops early when no symbol pair occurs at least twice. The
    result is deterministic: ties on pair frequency break toward the
    lexicographically smaller pair.
    """
    langs = _check_lang_codes(reserved_langs)
    tags = [lang_tag(c) for c in langs]

    word_freq: Counter[str] = Counter()
    for text in texts:
        if BOUNDARY in text:
            raise ValueError(f"text contains the boundary marker {BOUNDARY!r}")
        for word in normalize(text).split(" "):
            if word:
                word_freq[word] += 1
    if not word_freq:
        raise ValueError("empty corpus: no words after whitespace normalization")

    types = [list(_word_symbols(w)) for w in word_freq]
    freqs = list(word_freq.values())
    alphabet = sorted({s for syms in types for s in syms})

    floor = len(RESERVED) + len(tags) + len(alphabet)
    if target_size < floor:
        raise ValueError(
            f"target_size {target_size} below minimum {floor} "
            f"({len(RESERVED)} reserved + {len(tags)} tags + {len(alphabet)} base symbols)"
        )

    pair_counts: Counter[tuple[str, str]] = Counter()
    pair_types: dict[tuple[str, str], set[int]] = {}
    for t, syms in enumerate(types):
        f = freqs[t]
        for pair in zip(syms, syms[1:]):
            pair_counts[pair] += f
            pair_types.setdefault(pair, set()).add(t)

    # Lazy max-heap: stale entries are skipped when popped. Heap order
    # (-count, pair) realizes the lexicographic tie-break.
    heap = [(-c, p) for p, c in pair_counts.items()]
    heapq.heapify(heap)

    merges: list[tuple[str, str]] = []
    n_pieces = floor
    while n_pieces < target_size and heap:
        neg, pair = heapq.heappop(heap)
        if pair_counts.get(pair, 0) != -neg:
            continue  # stale
        if -neg < 2:
            break
        merged = pair[0] + pair[1]
        touched: set[tuple[str, str]] = set()
        for t in sorted(pair_types.get(pair, ())):
            syms, f = types[t], freqs[t]
            for p in zip(syms, syms[1:]):
                pair_counts[p] -= f
                touched.add(p)
                s = pair_types.get(p)
                if s is not None:
                    s.discard(t)
            out, i = [], 0
            while i < len(syms):
                if i < len(syms) - 1 and (syms[i], syms[i + 1]) == pair:
                    out.append(merged)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            types[t] = out
            for p in zip(out, out[1:]):
                pair_counts[p] += f
                touched.add(p)
                pair_types.setdefault(p, set()).add(t)
        for p in touched:
            c = pair_counts.get(p, 0)
            if c > 0:
                heapq.heappush(heap, (-c, p))
            else:
                pair_counts.pop(p, None)
                pair_types.pop(p, None)
        merges.append(pair)
        n_pieces += 1

    pieces = list(RESERVED) + tags + alphabet + [a + b for a, b in merges]
    return Vocabulary(pieces=pieces, merges=merges)


_MAGIC = "mtlab-vocab"
_VERSION = 1


def save_vocab(vocab: Vocabulary, path) -> None:
    """Write a line-oriented vocab file: header, pieces in id order, merges."""
    lines = [f"{_MAGIC}\t{_VERSION}\t{len(vocab.pieces)}\t{len(vocab.merges)}"]
    lines.extend(vocab.pieces)
    lines.extend(f"{a}\t{b}" for a, b in vocab.merges)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_vocab(path) -> Vocabulary:
    with open(path, encoding="utf-8") as f:
        lines = f.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise VocabFormatError(f"{path}: empty file, missing header")
    head = lines[0].split("\t")
    if len(head) != 4 or head[0] != _MAGIC:
        raise VocabFormatError(f"{path}: line 1: bad header {lines[0]!r}")
    if head[1] != str(_VERSION):
        raise VocabFormatError(
            f"{path}: line 1: format version {head[1]}, this build reads version {_VERSION}"
        )
    try:
        n_pieces, n_merges = int(head[2]), int(head[3])
    except ValueError:
        raise VocabFormatError(f"{path}: line 1: non-integer counts in header") from None
    if len(lines) < 1 + n_pieces:
        raise VocabFormatError(
            f"{path}: truncated in the pieces section, "
            f"expected {n_pieces} pieces, found {len(lines) - 1} lines"
        )
    if len(lines) < 1 + n_pieces + n_merges:
        raise VocabFormatError(
            f"{path}: truncated in the merges section, "
            f"expected {n_merges} merges, found {len(lines) - 1 - n_pieces} lines"
        )
    if len(lines) > 1 + n_pieces + n_merges:
        raise VocabFormatError(f"{path}: line {2 + n_pieces + n_merges}: trailing data")
    pieces = lines[1 : 1 + n_pieces]
    piece_set = set(pieces)
    merges = []
    for k in range(n_merges):
        lineno = 2 + n_pieces + k
        parts = lines[1 + n_pieces + k].split("\t")
        if len(parts) != 2:
            raise VocabFormatError(f"{path}: line {lineno}: merge is not two tab-separated symbols")
        if parts[0] + parts[1] not in piece_set:
            raise VocabFormatError(f"{path}: line {lineno}: merge result {parts[0] + parts[1]!r} is not a piece")
        merges.append((parts[0], parts[1]))
    try:
        return Vocabulary(pieces=pieces, merges=merges)
    except ValueError as e:
        raise VocabFormatError(f"{path}: {e}") from None
