"""Batch sampling: temperature-weighted direction choice and objective mixing.

Every batch is pure: either translation pairs from one direction or
masked-span examples from one language. A Bernoulli(mono_ratio) draw picks
the objective, then the direction is drawn with probability proportional
to size^(1/T) over both orientations of every parallel store, or the mono
language uniformly. All randomness flows through one generator whose state
can be captured and restored for exact resume.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .corpus import CorpusRegistry
from .mass import MaskSpec, TrainingExample, build_mass_example
from .subword import BOS, EOS, PAD, Vocabulary


@dataclass(frozen=True)
class SamplingPolicy:
    """Knobs for the batch stream."""

    batch_size: int
    max_len: int
    temperature: float = 5.0
    mono_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_len < 4:
            raise ValueError(f"max_len must be >= 4 to fit tag/eos framing, got {self.max_len}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.mono_ratio <= 1.0:
            raise ValueError(f"mono_ratio must be in [0, 1], got {self.mono_ratio}")


def language_probabilities(sizes: dict, temperature: float) -> dict:
    """Normalized size^(1/T) weights; uniform as T -> inf, proportional at T=1."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if not sizes:
        raise ValueError("no sizes given")
    keys = sorted(sizes)
    weights = []
    for k in keys:
        n = sizes[k]
        if n <= 0:
            raise ValueError(f"size for {k!r} must be > 0, got {n}")
        weights.append(float(n) ** (1.0 / temperature))
    total = sum(weights)
    return {k: w / total for k, w in zip(keys, weights)}


@dataclass
class Batch:
    """Padded arrays for one step. loss_mask is 1 on supervised cells."""

    objective: str  # "translation" or "mass"
    key: object  # (src, tgt) direction tuple, or language code
    enc_ids: np.ndarray
    enc_pos: np.ndarray
    dec_in_ids: np.ndarray
    dec_pos: np.ndarray
    target_ids: np.ndarray
    loss_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.enc_ids.shape[0]


def _pad_examples(objective: str, key, examples: list[TrainingExample]) -> Batch:
    b = len(examples)
    t_enc = max(len(e.enc_ids) for e in examples)
    t_dec = max(len(e.dec_in_ids) for e in examples)
    enc = np.full((b, t_enc), PAD, dtype=np.int64)
    dec_in = np.full((b, t_dec), PAD, dtype=np.int64)
    target = np.full((b, t_dec), PAD, dtype=np.int64)
    dec_pos = np.zeros((b, t_dec), dtype=np.int64)
    mask = np.zeros((b, t_dec), dtype=np.int64)
    for i, e in enumerate(examples):
        enc[i, : len(e.enc_ids)] = e.enc_ids
        dec_in[i, : len(e.dec_in_ids)] = e.dec_in_ids
        target[i, : len(e.target_ids)] = e.target_ids
        dec_pos[i, : len(e.dec_pos)] = e.dec_pos
        mask[i, : len(e.target_ids)] = 1
    enc_pos = np.broadcast_to(np.arange(t_enc, dtype=np.int64), (b, t_enc)).copy()
    return Batch(objective, key, enc, enc_pos, dec_in, dec_pos, target, mask)


class BatchSampler:
    """Deterministic stream of training batches over a registry."""

    def __init__(
        self,
        registry: CorpusRegistry,
        policy: SamplingPolicy,
        vocab: Vocabulary,
        mask_spec: MaskSpec | None = None,
    ):
        self.registry = registry
        self.policy = policy
        self.vocab = vocab
        self.mask_spec = mask_spec or MaskSpec()
        if policy.mono_ratio > 0 and not registry.mono:
            raise ValueError("mono_ratio > 0 but the registry has no mono stores")
        if policy.mono_ratio < 1 and not registry.parallel:
            raise ValueError("mono_ratio < 1 but the registry has no parallel stores")
        for lang in sorted(registry.mono) + [l for p in registry.parallel for l in p]:
            vocab.tag_id(lang)  # fail fast if the vocab lacks a language
        self.rng = np.random.default_rng(policy.seed)

    # -- resume support -----------------------------------------------------

    def state(self) -> str:
        return json.dumps(self.rng.bit_generator.state)

    def restore(self, state: str) -> None:
        self.rng.bit_generator.state = json.loads(state)

    # -- draws ---------------------------------------------------------------

    def _direction_units(self) -> dict[tuple[str, str], int]:
        units = {}
        for (src, tgt), store in self.registry.parallel.items():
            units[(src, tgt)] = len(store)
            units[(tgt, src)] = len(store)
        return units

    def draw_header(self) -> tuple[str, object]:
        """Objective and key for the next batch; consumes rng draws."""
        mono = self.policy.mono_ratio > 0 and (
            self.policy.mono_ratio >= 1 or self.rng.random() < self.policy.mono_ratio
        )
        if mono:
            langs = sorted(self.registry.mono)
            return "mass", langs[int(self.rng.integers(len(langs)))]
        probs = language_probabilities(self._direction_units(), self.policy.temperature)
        keys = sorted(probs)
        cum = np.cumsum([probs[k] for k in keys])
        idx = int(np.searchsorted(cum, self.rng.random(), side="right"))
        return "translation", keys[min(idx, len(keys) - 1)]

    def _frame_translation(self, src: str, tgt: str, tgt_lang: str) -> TrainingExample:
        room = self.policy.max_len - 2  # tag + eos fit inside max_len
        src_ids = self.vocab.encode(src)[:room]
        tgt_ids = self.vocab.encode(tgt)[: self.policy.max_len - 1]  # bos/eos fit inside
        return TrainingExample(
            enc_ids=[self.vocab.tag_id(tgt_lang)] + src_ids + [EOS],
            dec_in_ids=[BOS] + tgt_ids,
            target_ids=tgt_ids + [EOS],
            dec_pos=list(range(len(tgt_ids) + 1)),
            lang=tgt_lang,
        )

    def next_batch(self) -> Batch:
        objective, key = self.draw_header()
        b = self.policy.batch_size
        if objective == "translation":
            src_lang, tgt_lang = key
            store = self.registry.parallel.get((src_lang, tgt_lang))
            flip = store is None
            if flip:
                store = self.registry.parallel[(tgt_lang, src_lang)]
            idx = self.rng.integers(len(store), size=b)
            examples = []
            for i in idx:
                a, c = store.pairs[int(i)]
                s, t = (c, a) if flip else (a, c)
                examples.append(self._frame_translation(s, t, tgt_lang))
            return _pad_examples(objective, key, examples)
        store = self.registry.mono[key]
        room = self.policy.max_len - 2
        examples = []
        attempts = 0
        while len(examples) < b:
            attempts += 1
            if attempts > 1000 * b:
                raise ValueError(f"mono store {key!r} has too few sentences of length >= {self.mask_spec.min_len}")
            i = int(self.rng.integers(len(store)))
            tokens = self.vocab.encode(store.sentences[i])[:room]
            if len(tokens) < self.mask_spec.min_len:
                continue
            examples.append(build_mass_example(tokens, key, self.mask_spec, self.vocab, self.rng))
        return _pad_examples(objective, key, examples)


def sample_stats(
    registry: CorpusRegistry,
    policy: SamplingPolicy,
    vocab: Vocabulary,
    n_draws: int,
    mask_spec: MaskSpec | None = None,
) -> dict:
    """Empirical header frequencies over n_draws, without building batches."""
    if n_draws < 1:
        raise ValueError(f"n_draws must be >= 1, got {n_draws}")
    sampler = BatchSampler(registry, policy, vocab, mask_spec)
    n_mass = 0
    directions: dict[str, int] = {}
    mono_langs: dict[str, int] = {}
    for _ in range(n_draws):
        objective, key = sampler.draw_header()
        if objective == "mass":
            n_mass += 1
            mono_langs[key] = mono_langs.get(key, 0) + 1
        else:
            name = f"{key[0]}-{key[1]}"
            directions[name] = directions.get(name, 0) + 1
    n_tr = n_draws - n_mass
    return {
        "n_draws": n_draws,
        "objective_fraction": {"translation": n_tr / n_draws, "mass": n_mass / n_draws},
        "directions": {k: v / n_tr for k, v in sorted(directions.items())} if n_tr else {},
        "mono_langs": {k: v / n_mass for k, v in sorted(mono_langs.items())} if n_mass else {},
    }
