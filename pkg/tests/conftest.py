"""Shared fixtures: tiny corpora, a trained copy-task model, and the
acceptance result recorder that prints one line per criterion at the end
of the session.
"""

from __future__ import annotations

import numpy as np
import pytest

from mtlab.corpus import CorpusRegistry, MonoStore, ParallelStore
from mtlab.model import ModelConfig, init_params
from mtlab.sampler import SamplingPolicy
from mtlab.subword import train_vocab
from mtlab.trainer import TrainConfig, train

WORDS = ["ga", "bo", "tix", "mur", "elp", "san", "kre", "od", "vin", "pla"]


def make_sentences(n: int, seed: int, lo: int = 4, hi: int = 9) -> list[str]:
    rng = np.random.default_rng(seed)
    lengths = rng.integers(lo, hi + 1, size=n)
    return [" ".join(rng.choice(WORDS, size=int(m))) for m in lengths]


def make_pair_registry(n: int = 60, seed: int = 0) -> tuple[CorpusRegistry, list[str], list[str]]:
    """xx->yy where yy reverses the token order; mono for yy."""
    sents = make_sentences(n, seed)
    flips = [" ".join(reversed(s.split())) for s in sents]
    reg = CorpusRegistry()
    reg.add_parallel(ParallelStore("xx", "yy", list(zip(sents, flips))))
    reg.add_mono(MonoStore("yy", flips))
    return reg, sents, flips


@pytest.fixture(scope="session")
def tiny_vocab():
    sents = make_sentences(80, seed=1)
    flips = [" ".join(reversed(s.split())) for s in sents]
    return train_vocab(sents + flips, 120, ["xx", "yy"])


@pytest.fixture(scope="session")
def copy_model(tmp_path_factory):
    """A small model trained to convergence on two identity-cipher languages.

    Languages pp and qq both render base sentences verbatim, so every
    direction among {base, pp, qq} is the copy task. Used by decode,
    evaluation, and pivot tests.
    """
    sents = sorted(set(make_sentences(900, seed=7)))
    train_sents = sents[:700]
    test_sents = sents[700:]
    reg = CorpusRegistry()
    reg.add_parallel(ParallelStore("aa", "pp", [(s, s) for s in train_sents]))
    reg.add_parallel(ParallelStore("aa", "qq", [(s, s) for s in train_sents]))
    vocab = train_vocab(train_sents, 120, ["aa", "pp", "qq"])
    config = ModelConfig(
        vocab_size=vocab.size, n_layers=2, n_heads=4, d_model=48, d_ff=96,
        max_positions=16, dropout=0.0, label_smoothing=0.1,
    )
    policy = SamplingPolicy(batch_size=16, max_len=12, mono_ratio=0.0, seed=11)
    tconf = TrainConfig(total_steps=700, warmup_steps=100, checkpoint_every=700, log_every=100, seed=11)
    out = tmp_path_factory.mktemp("copy-model")
    result = train(reg, vocab, policy, config, tconf, out)
    return {"params": result.params, "vocab": vocab, "test_sentences": test_sents, "out": out}


# -- acceptance reporting -----------------------------------------------------

_ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def record_acceptance(number: int, name: str, ok: bool, detail: str = "") -> None:
    _ACCEPTANCE.append((number, name, ok, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(_ACCEPTANCE):
        status = "PASS" if ok else "FAIL"
        line = f"criterion {number} {name}: {status}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
