"""Masked-span seq2seq example construction for monolingual batches.

One contiguous fragment of the sentence is corrupted on the encoder side
and becomes the decoder's entire target. The decoder input is the shifted
fragment and its position indices are the fragment's absolute source
positions, so the model must reconstruct the right tokens in the right
places while everything outside the fragment stays supervision-free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .subword import BOS, EOS, MASK
from .subword import Vocabulary


@dataclass(frozen=True)
class MaskSpec:
    """Corruption policy: fragment size ratio and mask/random/keep split."""

    fragment_ratio: float = 0.5
    replace_probs: tuple[float, float, float] = (0.8, 0.1, 0.1)
    min_len: int = 2
    absolute_positions: bool = True

    def __post_init__(self):
        if not 0.0 < self.fragment_ratio <= 1.0:
            raise ValueError(f"fragment_ratio must be in (0, 1], got {self.fragment_ratio}")
        if len(self.replace_probs) != 3 or any(p < 0 for p in self.replace_probs):
            raise ValueError(f"replace_probs must be three nonnegative values, got {self.replace_probs}")
        if abs(sum(self.replace_probs) - 1.0) > 1e-9:
            raise ValueError(f"replace_probs must sum to 1, got {self.replace_probs}")
        if self.min_len < 1:
            raise ValueError(f"min_len must be >= 1, got {self.min_len}")


def sample_span(m: int, spec: MaskSpec, rng: np.random.Generator) -> tuple[int, int]:
    """Draw (u, k): fragment start uniform on the valid range, k = max(1, round(ratio*m))."""
    if m < spec.min_len:
        raise ValueError(f"sentence length {m} below min_len {spec.min_len}")
    k = max(1, round(spec.fragment_ratio * m))
    k = min(k, m)
    u = int(rng.integers(0, m - k + 1))
    return u, k


@dataclass
class TrainingExample:
    """One framed seq2seq row, before batching and padding."""

    enc_ids: list[int]
    dec_in_ids: list[int]
    target_ids: list[int]
    dec_pos: list[int]
    lang: str


def build_mass_example(
    tokens: list[int],
    lang: str,
    spec: MaskSpec,
    vocab: Vocabulary,
    rng: np.random.Generator,
) -> TrainingExample:
    """Corrupt one span of `tokens` and frame encoder/decoder rows.

    Encoder: [<2lang>] + corrupted tokens + [eos]. Per span position the
    token is replaced by <mask> / a random text id / kept, with
    spec.replace_probs. Decoder input is [bos] + fragment[:-1] with the
    fragment's absolute positions; the target is the unmasked fragment.
    """
    if not tokens:
        raise ValueError("empty token sequence")
    first_text = vocab.first_text_id
    if any(t < first_text for t in tokens):
        raise ValueError("tokens must not contain reserved ids or language tags")
    if first_text >= vocab.size:
        raise ValueError("vocab has no text pieces to draw random replacements from")

    u, k = sample_span(len(tokens), spec, rng)
    fragment = tokens[u : u + k]
    corrupted = list(tokens)
    p_mask, p_rand, _ = spec.replace_probs
    for i in range(u, u + k):
        r = rng.random()
        if r < p_mask:
            corrupted[i] = MASK
        elif r < p_mask + p_rand:
            corrupted[i] = int(rng.integers(first_text, vocab.size))
        # else keep

    if spec.absolute_positions:
        dec_pos = list(range(u, u + k))
    else:
        dec_pos = list(range(k))
    return TrainingExample(
        enc_ids=[vocab.tag_id(lang)] + corrupted + [EOS],
        dec_in_ids=[BOS] + fragment[:-1],
        target_ids=list(fragment),
        dec_pos=dec_pos,
        lang=lang,
    )
