"""Transformer forward/backward invariants, checkpoint format, and decoding."""

import dataclasses
import math

import numpy as np
import pytest
from scipy.special import logsumexp

from mtlab.model import (
    ModelConfig,
    ModelParams,
    backward,
    beam_decode,
    forward,
    greedy_decode,
    greedy_decode_batch,
    init_params,
    load_params,
    save_params,
)
from mtlab.sampler import Batch
from mtlab.subword import BOS, EOS, PAD


def small_config(**kw) -> ModelConfig:
    base = dict(
        vocab_size=40,
        n_layers=1,
        n_heads=2,
        d_model=16,
        d_ff=32,
        max_positions=16,
        dropout=0.0,
        label_smoothing=0.1,
        compute_dtype="float64",
    )
    base.update(kw)
    return ModelConfig(**base)


def random_batch(
    vocab_size: int,
    enc_lens=(5, 3, 4),
    dec_lens=(4, 2, 3),
    seed: int = 0,
) -> Batch:
    """Hand-built padded batch with per-row lengths and suffix padding."""
    rng = np.random.default_rng(seed)
    bsz, t_enc, t_dec = len(enc_lens), max(enc_lens), max(dec_lens)
    enc = np.full((bsz, t_enc), PAD, dtype=np.int64)
    dec = np.full((bsz, t_dec), PAD, dtype=np.int64)
    tgt = np.full((bsz, t_dec), PAD, dtype=np.int64)
    mask = np.zeros((bsz, t_dec), dtype=np.float32)
    dec_pos = np.zeros((bsz, t_dec), dtype=np.int64)
    for i, (el, dl) in enumerate(zip(enc_lens, dec_lens)):
        enc[i, :el] = rng.integers(5, vocab_size, el)
        dec[i, 0] = BOS
        if dl > 1:
            dec[i, 1:dl] = rng.integers(5, vocab_size, dl - 1)
        tgt[i, : dl - 1] = rng.integers(5, vocab_size, dl - 1)
        tgt[i, dl - 1] = EOS
        mask[i, :dl] = 1.0
        dec_pos[i, :dl] = np.arange(dl)
    enc_pos = np.broadcast_to(np.arange(t_enc, dtype=np.int64), enc.shape).copy()
    return Batch("translation", ("xx", "yy"), enc, enc_pos, dec, dec_pos, tgt, mask)


def widen(batch: Batch, extra: int) -> Batch:
    """Same content with `extra` trailing all-pad columns on both sides."""
    bsz = batch.size

    def pad2(a, fill):
        return np.concatenate([a, np.full((bsz, extra), fill, a.dtype)], axis=1)

    t_enc = batch.enc_ids.shape[1]
    enc_pos = np.broadcast_to(
        np.arange(t_enc + extra, dtype=np.int64), (bsz, t_enc + extra)
    ).copy()
    return Batch(
        batch.objective,
        batch.key,
        pad2(batch.enc_ids, PAD),
        enc_pos,
        pad2(batch.dec_in_ids, PAD),
        pad2(batch.dec_pos, 0),
        pad2(batch.target_ids, PAD),
        pad2(batch.loss_mask, 0.0),
    )


# -- config and init --------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(vocab_size=5)
    with pytest.raises(ValueError):
        small_config(d_model=16, n_heads=3)
    with pytest.raises(ValueError):
        small_config(dropout=1.0)
    with pytest.raises(ValueError):
        small_config(dropout=-0.1)
    with pytest.raises(ValueError):
        small_config(label_smoothing=1.0)
    with pytest.raises(ValueError):
        small_config(max_positions=1)
    with pytest.raises(ValueError):
        small_config(compute_dtype="float16")


def test_init_deterministic_and_seed_sensitive():
    a = init_params(small_config(), seed=7)
    b = init_params(small_config(), seed=7)
    c = init_params(small_config(), seed=8)
    assert a.tensors.keys() == b.tensors.keys()
    for k in a.tensors:
        assert np.array_equal(a.tensors[k], b.tensors[k])
        assert a.tensors[k].dtype == np.float32
    assert any(not np.array_equal(a.tensors[k], c.tensors[k]) for k in a.tensors)


def test_param_count_oracle():
    # tok_emb 40*16; per enc layer 2*32 ln + 1088 attn + 1072 ffn; final ln 32;
    # per dec layer 3*32 ln + 2*1088 attn + 1072 ffn; final ln 32. Counted by hand.
    tied = init_params(small_config(), seed=0)
    assert tied.param_count() == 6272
    untied = init_params(small_config(tie_embeddings=False), seed=0)
    assert untied.param_count() == 6272 + 640
    assert "out_proj" in untied.tensors and "out_proj" not in tied.tensors


def test_params_copy_is_deep():
    p = init_params(small_config(), seed=0)
    q = p.copy()
    q.tensors["tok_emb"][0, 0] += 1.0
    assert p.tensors["tok_emb"][0, 0] != q.tensors["tok_emb"][0, 0]


# -- loss -------------------------------------------------------------------------


@pytest.mark.parametrize("smoothing", [0.0, 0.1])
def test_all_zero_params_give_log_vocab_loss(smoothing):
    # Zero weights make every logit zero, so the predictive distribution is
    # uniform and the smoothed cross entropy collapses to ln(V) exactly.
    cfg = small_config(label_smoothing=smoothing)
    params = init_params(cfg, seed=0)
    for k in params.tensors:
        params.tensors[k] = np.zeros_like(params.tensors[k])
    res = forward(params, random_batch(cfg.vocab_size))
    assert res.loss == pytest.approx(math.log(cfg.vocab_size), rel=1e-9)


def test_loss_matches_manual_computation():
    cfg = small_config()
    params = init_params(cfg, seed=3)
    batch = random_batch(cfg.vocab_size, seed=5)
    res = forward(params, batch)

    logp = res.logits - logsumexp(res.logits, axis=-1, keepdims=True)
    nll = -np.take_along_axis(logp, batch.target_ids[..., None], axis=-1)[..., 0]
    eps, v = cfg.label_smoothing, cfg.vocab_size
    per_pos = nll * (1 - eps) + (-logp.sum(axis=-1)) * (eps / v)
    count = int(batch.loss_mask.sum())
    want = float((per_pos * batch.loss_mask).sum() / count)
    assert res.token_count == count
    assert res.loss == pytest.approx(want, rel=1e-10)


def test_zero_loss_mask_gives_zero_loss_and_grads():
    cfg = small_config()
    params = init_params(cfg, seed=1)
    batch = random_batch(cfg.vocab_size)
    silenced = dataclasses.replace(batch, loss_mask=np.zeros_like(batch.loss_mask))
    res, grads = backward(params, silenced)
    assert res.loss == 0.0
    assert res.token_count == 0
    assert all(np.all(g == 0.0) for g in grads.values())


def test_backward_covers_every_tensor():
    cfg = small_config()
    params = init_params(cfg, seed=2)
    res, grads = backward(params, random_batch(cfg.vocab_size))
    assert np.isfinite(res.loss)
    assert grads.keys() == params.tensors.keys()
    for k, g in grads.items():
        assert g.shape == params.tensors[k].shape
        assert np.all(np.isfinite(g))
    # every weight matrix sits on the gradient path of this batch
    for k in ("tok_emb", "enc0_attn_wq", "dec0_cross_wv", "dec0_ff_w2"):
        assert np.any(grads[k] != 0.0)


# -- structural invariants ---------------------------------------------------------


def test_padding_columns_do_not_change_outputs():
    cfg = small_config()
    params = init_params(cfg, seed=4)
    batch = random_batch(cfg.vocab_size, seed=9)
    wide = widen(batch, 3)
    a = forward(params, batch)
    b = forward(params, wide)
    t_dec = batch.dec_in_ids.shape[1]
    np.testing.assert_allclose(
        b.logits[:, :t_dec, :], a.logits, rtol=0, atol=1e-12
    )
    assert b.token_count == a.token_count
    assert b.loss == pytest.approx(a.loss, abs=1e-12)


def test_row_permutation_equivariance():
    cfg = small_config()
    params = init_params(cfg, seed=4)
    batch = random_batch(cfg.vocab_size, seed=10)
    perm = np.array([2, 0, 1])
    shuffled = Batch(
        batch.objective,
        batch.key,
        batch.enc_ids[perm],
        batch.enc_pos[perm],
        batch.dec_in_ids[perm],
        batch.dec_pos[perm],
        batch.target_ids[perm],
        batch.loss_mask[perm],
    )
    a = forward(params, batch)
    b = forward(params, shuffled)
    np.testing.assert_allclose(b.logits, a.logits[perm], rtol=0, atol=1e-12)
    assert b.loss == pytest.approx(a.loss, abs=1e-12)


def test_decoder_is_causal():
    cfg = small_config()
    params = init_params(cfg, seed=6)
    batch = random_batch(cfg.vocab_size, enc_lens=(6,), dec_lens=(6,), seed=11)
    tampered = dataclasses.replace(batch, dec_in_ids=batch.dec_in_ids.copy())
    j = 4
    tampered.dec_in_ids[0, j] = (batch.dec_in_ids[0, j] - 5 + 1) % (cfg.vocab_size - 5) + 5
    a = forward(params, batch)
    b = forward(params, tampered)
    # positions before j never see the change; position j onward must feel it
    assert np.array_equal(a.logits[:, :j, :], b.logits[:, :j, :])
    assert not np.allclose(a.logits[:, j:, :], b.logits[:, j:, :])


def test_tied_and_untied_agree_when_out_proj_is_embedding_transpose():
    cfg = small_config()
    tied = init_params(cfg, seed=12)
    ucfg = small_config(tie_embeddings=False)
    untied = init_params(ucfg, seed=12)
    for k in tied.tensors:
        untied.tensors[k] = tied.tensors[k].copy()
    untied.tensors["out_proj"] = tied.tensors["tok_emb"].T.copy()
    batch = random_batch(cfg.vocab_size, seed=13)
    rt, gt = backward(tied, batch)
    ru, gu = backward(untied, batch)
    assert ru.loss == pytest.approx(rt.loss, rel=1e-12)
    np.testing.assert_allclose(ru.logits, rt.logits, rtol=0, atol=1e-10)
    # the tied embedding gradient is the sum of both roles
    np.testing.assert_allclose(
        gt["tok_emb"], gu["tok_emb"] + gu["out_proj"].T, rtol=1e-9, atol=1e-12
    )


def test_position_and_token_range_checks():
    cfg = small_config(max_positions=4)
    params = init_params(cfg, seed=0)
    batch = random_batch(cfg.vocab_size, enc_lens=(6,), dec_lens=(3,))
    with pytest.raises(ValueError, match="position index"):
        forward(params, batch)
    batch2 = random_batch(cfg.vocab_size, enc_lens=(3,), dec_lens=(3,))
    bad = dataclasses.replace(batch2, enc_ids=batch2.enc_ids.copy())
    bad.enc_ids[0, 1] = cfg.vocab_size
    with pytest.raises(ValueError, match="token id"):
        forward(params, bad)
    neg = dataclasses.replace(batch2, dec_pos=batch2.dec_pos.copy())
    neg.dec_pos[0, 0] = -1
    with pytest.raises(ValueError, match="negative position"):
        forward(params, neg)


# -- dropout -----------------------------------------------------------------------


def test_dropout_reproducible_and_off_without_rng():
    cfg = small_config(dropout=0.3, compute_dtype="float32")
    params = init_params(cfg, seed=14)
    batch = random_batch(cfg.vocab_size, seed=15)
    a = forward(params, batch, dropout_rng=np.random.default_rng(7))
    b = forward(params, batch, dropout_rng=np.random.default_rng(7))
    c = forward(params, batch, dropout_rng=np.random.default_rng(8))
    assert a.loss == b.loss
    assert a.loss != c.loss
    # without a rng the model runs in eval mode: identical to a zero-dropout config
    plain = ModelParams(dataclasses.replace(cfg, dropout=0.0), params.tensors)
    assert forward(params, batch).loss == forward(plain, batch).loss


# -- checkpoint format -------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    cfg = small_config(compute_dtype="float32")
    params = init_params(cfg, seed=21)
    path = tmp_path / "model.ckpt"
    save_params(params, path)
    loaded = load_params(path)
    assert loaded.config == cfg
    assert loaded.tensors.keys() == params.tensors.keys()
    for k in params.tensors:
        assert np.array_equal(loaded.tensors[k], params.tensors[k])
    batch = random_batch(cfg.vocab_size, seed=22)
    assert forward(loaded, batch).loss == forward(params, batch).loss


def test_load_rejects_malformed_files(tmp_path):
    cfg = small_config()
    params = init_params(cfg, seed=0)
    good = tmp_path / "good.ckpt"
    save_params(params, good)
    raw = good.read_bytes()
    head, blob = raw.split(b"\n", 1)

    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"\x00\x01binary soup")
    with pytest.raises(ValueError, match="manifest"):
        load_params(junk)

    magic = tmp_path / "magic.ckpt"
    magic.write_bytes(head.replace(b"mtlab-params", b"other-format") + b"\n" + blob)
    with pytest.raises(ValueError, match="format"):
        load_params(magic)

    version = tmp_path / "version.ckpt"
    version.write_bytes(head.replace(b'"version": 1', b'"version": 2') + b"\n" + blob)
    with pytest.raises(ValueError, match="version"):
        load_params(version)

    short = tmp_path / "short.ckpt"
    short.write_bytes(head + b"\n" + blob[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_params(short)

    long = tmp_path / "long.ckpt"
    long.write_bytes(raw + b"\x00\x00\x00\x00")
    with pytest.raises(ValueError, match="trailing"):
        load_params(long)


# -- decoding ----------------------------------------------------------------------


def test_trained_model_copies_held_out_sentences(copy_model):
    params, vocab = copy_model["params"], copy_model["vocab"]
    sents = copy_model["test_sentences"][:30]
    srcs = [vocab.encode(s) for s in sents]
    outs = greedy_decode_batch(params, vocab, srcs, "pp", max_steps=15)
    hits = sum(vocab.decode(o) == s for o, s in zip(outs, sents))
    assert hits >= 27


def test_greedy_batch_matches_single(copy_model):
    params, vocab = copy_model["params"], copy_model["vocab"]
    srcs = [vocab.encode(s) for s in copy_model["test_sentences"][:12]]
    batched = greedy_decode_batch(params, vocab, srcs, "qq", max_steps=15, batch_size=5)
    singles = [greedy_decode(params, vocab, s, "qq", max_steps=15) for s in srcs]
    assert batched == singles


def test_beam_one_matches_greedy(copy_model):
    params, vocab = copy_model["params"], copy_model["vocab"]
    for s in copy_model["test_sentences"][:8]:
        ids = vocab.encode(s)
        assert beam_decode(params, vocab, ids, "pp", beam_size=1, max_steps=15) == (
            greedy_decode(params, vocab, ids, "pp", max_steps=15)
        )


def test_beam_search_widths_return_finite_hypotheses(copy_model):
    params, vocab = copy_model["params"], copy_model["vocab"]
    ids = vocab.encode(copy_model["test_sentences"][0])
    for width in (2, 4):
        out = beam_decode(params, vocab, ids, "pp", beam_size=width, max_steps=15)
        assert isinstance(out, list)
        assert all(vocab.first_text_id <= t < vocab.size for t in out)


def test_decode_respects_max_steps(copy_model):
    params, vocab = copy_model["params"], copy_model["vocab"]
    srcs = [vocab.encode(s) for s in copy_model["test_sentences"][:6]]
    for out in greedy_decode_batch(params, vocab, srcs, "pp", max_steps=3):
        assert len(out) <= 3


def test_decode_rejects_overlong_source(copy_model):
    params, vocab = copy_model["params"], copy_model["vocab"]
    ids = vocab.encode(" ".join(copy_model["test_sentences"][:6]))
    with pytest.raises(ValueError, match="max_positions"):
        greedy_decode(params, vocab, ids, "pp", max_steps=4)
