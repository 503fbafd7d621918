import numpy as np
import pytest

from mtlab.corpus import CorpusRegistry, MonoStore, ParallelStore
from mtlab.sampler import BatchSampler, SamplingPolicy, language_probabilities, sample_stats
from mtlab.subword import BOS, EOS, PAD

from conftest import make_pair_registry, make_sentences


# -- probabilities ----------------------------------------------------------------


def test_temperature_five_on_32x_sizes_is_exactly_one_third():
    # 32^(1/5) = 2, so weights are 1:2
    for n in (1, 100, 10**6):
        probs = language_probabilities({"A": n, "B": 32 * n}, 5.0)
        assert abs(probs["A"] - 1 / 3) < 1e-12
        assert abs(probs["B"] - 2 / 3) < 1e-12


def test_temperature_one_is_proportional():
    probs = language_probabilities({"A": 100, "B": 300}, 1.0)
    assert probs["A"] == pytest.approx(0.25)
    assert probs["B"] == pytest.approx(0.75)


def test_high_temperature_flattens():
    probs = language_probabilities({"A": 1, "B": 10**6}, 1e9)
    assert probs["A"] == pytest.approx(0.5, abs=1e-6)


def test_probability_validation():
    with pytest.raises(ValueError):
        language_probabilities({}, 5.0)
    with pytest.raises(ValueError):
        language_probabilities({"A": 0}, 5.0)
    with pytest.raises(ValueError):
        language_probabilities({"A": 3}, 0.0)


def test_policy_validation():
    with pytest.raises(ValueError):
        SamplingPolicy(batch_size=0, max_len=10)
    with pytest.raises(ValueError):
        SamplingPolicy(batch_size=4, max_len=3)
    with pytest.raises(ValueError):
        SamplingPolicy(batch_size=4, max_len=10, temperature=-1.0)
    with pytest.raises(ValueError):
        SamplingPolicy(batch_size=4, max_len=10, mono_ratio=1.5)


# -- header draws ------------------------------------------------------------------


def test_direction_frequencies_match_probabilities(tiny_vocab):
    reg = CorpusRegistry()
    sents = make_sentences(40, seed=3)
    reg.add_parallel(ParallelStore("xx", "yy", [(s, s[::-1].strip() or s) for s in sents]))
    policy = SamplingPolicy(batch_size=4, max_len=12, mono_ratio=0.0, temperature=5.0, seed=5)
    stats = sample_stats(reg, policy, tiny_vocab, n_draws=4000)
    assert stats["objective_fraction"]["mass"] == 0.0
    # both orientations of one store weigh equally
    assert stats["directions"]["xx-yy"] == pytest.approx(0.5, abs=0.03)
    assert stats["directions"]["yy-xx"] == pytest.approx(0.5, abs=0.03)


def test_mix_ratio_empirical(tiny_vocab):
    reg, _, _ = make_pair_registry(40, seed=4)
    policy = SamplingPolicy(batch_size=4, max_len=12, mono_ratio=0.3, seed=6)
    stats = sample_stats(reg, policy, tiny_vocab, n_draws=6000)
    assert stats["objective_fraction"]["mass"] == pytest.approx(0.3, abs=0.02)
    assert stats["mono_langs"] == {"yy": 1.0}


def test_extreme_ratios_draw_no_rng(tiny_vocab):
    reg, _, _ = make_pair_registry(30, seed=5)
    policy = SamplingPolicy(batch_size=4, max_len=12, mono_ratio=1.0, seed=7)
    stats = sample_stats(reg, policy, tiny_vocab, n_draws=500)
    assert stats["objective_fraction"] == {"translation": 0.0, "mass": 1.0}


def test_sampler_requires_matching_stores(tiny_vocab):
    reg = CorpusRegistry()
    reg.add_mono(MonoStore("yy", make_sentences(10, seed=8)))
    with pytest.raises(ValueError, match="no parallel"):
        BatchSampler(reg, SamplingPolicy(batch_size=2, max_len=10, mono_ratio=0.5), tiny_vocab)
    reg2, _, _ = make_pair_registry(10, seed=9)
    no_mono = CorpusRegistry()
    no_mono.add_parallel(reg2.parallel[("xx", "yy")])
    with pytest.raises(ValueError, match="no mono"):
        BatchSampler(no_mono, SamplingPolicy(batch_size=2, max_len=10, mono_ratio=0.5), tiny_vocab)


def test_sampler_rejects_unknown_language(tiny_vocab):
    reg = CorpusRegistry()
    reg.add_parallel(ParallelStore("xx", "zz", [("ga bo", "bo ga")] * 4))
    with pytest.raises(KeyError):
        BatchSampler(reg, SamplingPolicy(batch_size=2, max_len=10, mono_ratio=0.0), tiny_vocab)


# -- batches ------------------------------------------------------------------------


def test_translation_batch_framing(tiny_vocab):
    reg, sents, flips = make_pair_registry(30, seed=10)
    policy = SamplingPolicy(batch_size=6, max_len=12, mono_ratio=0.0, seed=11)
    sampler = BatchSampler(reg, policy, tiny_vocab)
    batch = sampler.next_batch()
    assert batch.objective == "translation"
    src_lang, tgt_lang = batch.key
    assert {src_lang, tgt_lang} == {"xx", "yy"}
    assert batch.size == 6
    tag = tiny_vocab.tag_id(tgt_lang)
    pairs = dict(reg.parallel[("xx", "yy")].pairs)
    for i in range(6):
        row = [t for t in batch.enc_ids[i] if t != PAD]
        assert row[0] == tag and row[-1] == EOS
        dec = [t for t in batch.dec_in_ids[i] if t != PAD]
        assert dec[0] == BOS
        n = int(batch.loss_mask[i].sum())
        assert batch.target_ids[i, n - 1] == EOS
        # decoder positions count 0..n-1 and padding stays zero
        assert batch.dec_pos[i, :n].tolist() == list(range(n))
        assert batch.dec_pos[i, n:].tolist() == [0] * (batch.dec_pos.shape[1] - n)
        src = tiny_vocab.decode(row[1:-1])
        tgt = tiny_vocab.decode([t for t, m in zip(batch.target_ids[i], batch.loss_mask[i]) if m])
        if src_lang == "xx":
            assert pairs[src] == tgt
        else:
            assert pairs[tgt] == src


def test_translation_respects_max_len(tiny_vocab):
    reg, _, _ = make_pair_registry(30, seed=12)
    policy = SamplingPolicy(batch_size=4, max_len=5, mono_ratio=0.0, seed=13)
    sampler = BatchSampler(reg, policy, tiny_vocab)
    for _ in range(10):
        batch = sampler.next_batch()
        assert batch.enc_ids.shape[1] <= 5
        assert batch.dec_in_ids.shape[1] <= 5


def test_mass_batch_framing(tiny_vocab):
    reg, _, flips = make_pair_registry(30, seed=14)
    policy = SamplingPolicy(batch_size=5, max_len=12, mono_ratio=1.0, seed=15)
    sampler = BatchSampler(reg, policy, tiny_vocab)
    batch = sampler.next_batch()
    assert batch.objective == "mass" and batch.key == "yy"
    tag = tiny_vocab.tag_id("yy")
    for i in range(5):
        assert batch.enc_ids[i, 0] == tag
        dec = [t for t in batch.dec_in_ids[i] if t != PAD]
        assert dec[0] == BOS
        n = int(batch.loss_mask[i].sum())
        pos = batch.dec_pos[i, :n].tolist()
        assert pos == list(range(pos[0], pos[0] + n))


def test_batch_stream_deterministic(tiny_vocab):
    reg, _, _ = make_pair_registry(30, seed=16)
    policy = SamplingPolicy(batch_size=4, max_len=12, mono_ratio=0.4, seed=17)
    a = BatchSampler(reg, policy, tiny_vocab)
    b = BatchSampler(reg, policy, tiny_vocab)
    for _ in range(20):
        x, y = a.next_batch(), b.next_batch()
        assert x.objective == y.objective and x.key == y.key
        assert np.array_equal(x.enc_ids, y.enc_ids)
        assert np.array_equal(x.dec_in_ids, y.dec_in_ids)
        assert np.array_equal(x.target_ids, y.target_ids)
        assert np.array_equal(x.dec_pos, y.dec_pos)
        assert np.array_equal(x.loss_mask, y.loss_mask)


def test_state_roundtrip_resumes_stream(tiny_vocab):
    reg, _, _ = make_pair_registry(30, seed=18)
    policy = SamplingPolicy(batch_size=4, max_len=12, mono_ratio=0.4, seed=19)
    a = BatchSampler(reg, policy, tiny_vocab)
    for _ in range(7):
        a.next_batch()
    snapshot = a.state()
    want = [a.next_batch() for _ in range(5)]
    b = BatchSampler(reg, policy, tiny_vocab)
    b.restore(snapshot)
    got = [b.next_batch() for _ in range(5)]
    for x, y in zip(want, got):
        assert x.key == y.key
        assert np.array_equal(x.enc_ids, y.enc_ids)
        assert np.array_equal(x.target_ids, y.target_ids)


def test_mass_skips_sentences_below_min_len(tiny_vocab):
    reg = CorpusRegistry()
    reg.add_parallel(ParallelStore("xx", "yy", [("ga bo", "bo ga")] * 3))
    reg.add_mono(MonoStore("yy", ["ga"] * 50 + ["ga bo tix mur"]))
    policy = SamplingPolicy(batch_size=3, max_len=12, mono_ratio=1.0, seed=20)
    sampler = BatchSampler(reg, policy, tiny_vocab)
    batch = sampler.next_batch()  # only the long sentence qualifies
    assert batch.objective == "mass"
    assert (batch.enc_ids[:, 1] != PAD).all()


def test_mass_errors_when_nothing_qualifies(tiny_vocab):
    reg = CorpusRegistry()
    reg.add_parallel(ParallelStore("xx", "yy", [("ga bo", "bo ga")] * 3))
    reg.add_mono(MonoStore("yy", ["ga"] * 5))
    policy = SamplingPolicy(batch_size=2, max_len=12, mono_ratio=1.0, seed=21)
    sampler = BatchSampler(reg, policy, tiny_vocab)
    with pytest.raises(ValueError, match="too few sentences"):
        sampler.next_batch()


def test_sample_stats_validation(tiny_vocab):
    reg, _, _ = make_pair_registry(10, seed=22)
    with pytest.raises(ValueError, match="n_draws"):
        sample_stats(reg, SamplingPolicy(batch_size=2, max_len=10, mono_ratio=0.0), tiny_vocab, 0)
