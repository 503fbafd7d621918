"""Encoder-decoder transformer built on the autodiff core.

Pre-norm blocks, sinusoidal absolute positions gathered by explicit index
arrays, multi-head attention with additive masking, and an output head
tied to the token embedding by default. Parameters and checkpoints are
float32; the compute dtype is configurable so gradient checks can run in
float64 through the exact same code path.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .subword import BOS, EOS, PAD, Vocabulary

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    max_positions: int = 64
    dropout: float = 0.0
    label_smoothing: float = 0.1
    tie_embeddings: bool = True
    compute_dtype: str = "float32"

    def __post_init__(self):
        if self.vocab_size < 6:
            raise ValueError(f"vocab_size must cover the reserved ids, got {self.vocab_size}")
        if self.n_layers < 1 or self.n_heads < 1 or self.d_model < 1 or self.d_ff < 1:
            raise ValueError("n_layers, n_heads, d_model, d_ff must all be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.max_positions < 2:
            raise ValueError(f"max_positions must be >= 2, got {self.max_positions}")
        if np.dtype(self.compute_dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ValueError(f"compute_dtype must be float32 or float64, got {self.compute_dtype}")


class ModelParams:
    """Named float32 tensors in a fixed creation order, plus their config."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors

    def param_count(self) -> int:
        return sum(int(t.size) for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def _attn_names(prefix: str):
    return [f"{prefix}_{w}" for w in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")]


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Scaled-normal matrices (std = fan_in^-0.5), zero biases, unit norm gains.

    Matrix draws happen in dict insertion order, so the result is a pure
    function of (config, seed).
    """
    rng = np.random.default_rng(seed)
    d, ff, v = config.d_model, config.d_ff, config.vocab_size
    t: dict[str, np.ndarray] = {}

    def mat(name, rows, cols, std=None):
        t[name] = rng.normal(0.0, std if std is not None else rows**-0.5, size=(rows, cols)).astype(np.float32)

    def ln(name):
        t[f"{name}_g"] = np.ones(d, dtype=np.float32)
        t[f"{name}_b"] = np.zeros(d, dtype=np.float32)

    def attn(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            mat(f"{prefix}_{w}", d, d)
        for b in ("bq", "bk", "bv", "bo"):
            t[f"{prefix}_{b}"] = np.zeros(d, dtype=np.float32)

    def ffn(prefix):
        mat(f"{prefix}_w1", d, ff)
        t[f"{prefix}_b1"] = np.zeros(ff, dtype=np.float32)
        mat(f"{prefix}_w2", ff, d)
        t[f"{prefix}_b2"] = np.zeros(d, dtype=np.float32)

    mat("tok_emb", v, d, std=d**-0.5)
    for i in range(config.n_layers):
        ln(f"enc{i}_ln1")
        attn(f"enc{i}_attn")
        ln(f"enc{i}_ln2")
        ffn(f"enc{i}_ff")
    ln("enc_lnf")
    for i in range(config.n_layers):
        ln(f"dec{i}_ln1")
        attn(f"dec{i}_self")
        ln(f"dec{i}_ln2")
        attn(f"dec{i}_cross")
        ln(f"dec{i}_ln3")
        ffn(f"dec{i}_ff")
    ln("dec_lnf")
    if not config.tie_embeddings:
        mat("out_proj", d, v)
    return ModelParams(config, t)


@dataclass
class ForwardResult:
    loss: float
    logits: np.ndarray
    token_count: int


_PE_CACHE: dict = {}


def _pe_table(max_positions: int, d: int, dtype) -> np.ndarray:
    key = (max_positions, d, np.dtype(dtype).str)
    table = _PE_CACHE.get(key)
    if table is None:
        pos = np.arange(max_positions, dtype=np.float64)[:, None]
        i = np.arange(d, dtype=np.float64)[None, :]
        angle = pos / np.power(10000.0, 2.0 * (i // 2) / d)
        table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)
        _PE_CACHE[key] = table
    return table


class _Graph:
    """One forward construction: parameter Tensors plus shared helpers."""

    def __init__(self, params: ModelParams, build_graph: bool, dropout_rng):
        cfg = params.config
        self.cfg = cfg
        self.dt = np.dtype(cfg.compute_dtype)
        self.t = {
            name: Tensor(arr.astype(self.dt, copy=False), requires_grad=build_graph)
            for name, arr in params.tensors.items()
        }
        self.pe = _pe_table(cfg.max_positions, cfg.d_model, self.dt)
        self.dropout_rng = dropout_rng

    def _dropout(self, x: Tensor) -> Tensor:
        p = self.cfg.dropout
        if p == 0.0 or self.dropout_rng is None:
            return x
        keep = (self.dropout_rng.random(x.shape) >= p).astype(self.dt) / (1.0 - p)
        return x * keep

    def _check_positions(self, pos: np.ndarray) -> None:
        if pos.size and int(pos.max()) >= self.cfg.max_positions:
            raise ValueError(
                f"position index {int(pos.max())} >= max_positions {self.cfg.max_positions}"
            )
        if pos.size and int(pos.min()) < 0:
            raise ValueError("negative position index")

    def embed(self, ids: np.ndarray, pos: np.ndarray) -> Tensor:
        self._check_positions(pos)
        if ids.size and int(ids.max()) >= self.cfg.vocab_size:
            raise ValueError(f"token id {int(ids.max())} >= vocab_size {self.cfg.vocab_size}")
        x = ad.embedding(self.t["tok_emb"], ids) * math.sqrt(self.cfg.d_model)
        x = x + self.pe[pos]
        return self._dropout(x)

    def attention(self, prefix: str, q_in: Tensor, kv_in: Tensor, add_mask: np.ndarray) -> Tensor:
        cfg, t = self.cfg, self.t
        h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        bsz, tq = q_in.shape[0], q_in.shape[1]
        tk = kv_in.shape[1]

        def heads(x: Tensor, w: str, b: str, tlen: int) -> Tensor:
            y = x @ t[w] + t[b]
            return y.reshape(bsz, tlen, h, dh).transpose(0, 2, 1, 3)

        q = heads(q_in, f"{prefix}_wq", f"{prefix}_bq", tq)
        k = heads(kv_in, f"{prefix}_wk", f"{prefix}_bk", tk)
        v = heads(kv_in, f"{prefix}_wv", f"{prefix}_bv", tk)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)) + add_mask
        probs = ad.softmax(scores, axis=-1)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(bsz, tq, cfg.d_model)
        return self._dropout(ctx @ t[f"{prefix}_wo"] + t[f"{prefix}_bo"])

    def ffn(self, prefix: str, x: Tensor) -> Tensor:
        t = self.t
        return self._dropout(ad.gelu(x @ t[f"{prefix}_w1"] + t[f"{prefix}_b1"]) @ t[f"{prefix}_w2"] + t[f"{prefix}_b2"])

    def ln(self, prefix: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.t[f"{prefix}_g"], self.t[f"{prefix}_b"])

    def encode(self, enc_ids: np.ndarray, enc_pos: np.ndarray) -> tuple[Tensor, np.ndarray]:
        key_pad = np.where(enc_ids == PAD, NEG_INF, 0.0).astype(self.dt)[:, None, None, :]
        x = self.embed(enc_ids, enc_pos)
        for i in range(self.cfg.n_layers):
            h = self.ln(f"enc{i}_ln1", x)
            x = x + self.attention(f"enc{i}_attn", h, h, key_pad)
            x = x + self.ffn(f"enc{i}_ff", self.ln(f"enc{i}_ln2", x))
        return self.ln("enc_lnf", x), key_pad

    def decode(
        self,
        enc_out: Tensor,
        enc_key_pad: np.ndarray,
        dec_in: np.ndarray,
        dec_pos: np.ndarray,
    ) -> Tensor:
        bsz, td = dec_in.shape
        causal = np.triu(np.full((td, td), NEG_INF, dtype=self.dt), k=1)[None, None, :, :]
        self_pad = np.where(dec_in == PAD, NEG_INF, 0.0).astype(self.dt)[:, None, None, :]
        self_mask = causal + self_pad
        x = self.embed(dec_in, dec_pos)
        for i in range(self.cfg.n_layers):
            h = self.ln(f"dec{i}_ln1", x)
            x = x + self.attention(f"dec{i}_self", h, h, self_mask)
            x = x + self.attention(f"dec{i}_cross", self.ln(f"dec{i}_ln2", x), enc_out, enc_key_pad)
            x = x + self.ffn(f"dec{i}_ff", self.ln(f"dec{i}_ln3", x))
        return self.ln("dec_lnf", x)

    def logits(self, dec_h: Tensor) -> Tensor:
        if self.cfg.tie_embeddings:
            return dec_h @ self.t["tok_emb"].transpose(1, 0)
        return dec_h @ self.t["out_proj"]


def _smoothed_loss(logits: Tensor, target_ids: np.ndarray, loss_mask: np.ndarray, cfg: ModelConfig):
    eps, v = cfg.label_smoothing, cfg.vocab_size
    logp = ad.log_softmax(logits, axis=-1)
    nll = -ad.gather_last(logp, target_ids)
    per_pos = nll * (1.0 - eps) + (-logp.sum(axis=-1)) * (eps / v)
    mask = loss_mask.astype(logits.dtype)
    count = int(loss_mask.sum())
    loss = (per_pos * mask).sum() * (1.0 / max(count, 1))
    return loss, count


def _run(params: ModelParams, batch, build_graph: bool, dropout_rng=None):
    g = _Graph(params, build_graph, dropout_rng)
    enc_out, enc_key_pad = g.encode(batch.enc_ids, batch.enc_pos)
    dec_h = g.decode(enc_out, enc_key_pad, batch.dec_in_ids, batch.dec_pos)
    logits = g.logits(dec_h)
    loss, count = _smoothed_loss(logits, batch.target_ids, batch.loss_mask, params.config)
    return g, loss, logits, count


def forward(params: ModelParams, batch, dropout_rng=None) -> ForwardResult:
    """Loss and logits for one batch. Dropout only fires when a rng is given."""
    _, loss, logits, count = _run(params, batch, build_graph=False, dropout_rng=dropout_rng)
    return ForwardResult(float(loss.data), logits.data, count)


def backward(params: ModelParams, batch, dropout_rng=None) -> tuple[ForwardResult, dict[str, np.ndarray]]:
    """Loss plus the gradient of every parameter tensor, keyed by name."""
    g, loss, logits, count = _run(params, batch, build_graph=True, dropout_rng=dropout_rng)
    loss.backward()
    grads = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in g.t.items()
    }
    return ForwardResult(float(loss.data), logits.data, count), grads


# -- decoding -------------------------------------------------------------------


def _frame_sources(vocab: Vocabulary, src_seqs: list[list[int]], target_lang: str, max_positions: int):
    tag = vocab.tag_id(target_lang)
    rows = [[tag] + list(s) + [EOS] for s in src_seqs]
    t_enc = max(len(r) for r in rows)
    if t_enc > max_positions:
        raise ValueError(f"source of length {t_enc} exceeds max_positions {max_positions}")
    enc = np.full((len(rows), t_enc), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        enc[i, : len(r)] = r
    pos = np.broadcast_to(np.arange(t_enc, dtype=np.int64), enc.shape).copy()
    return enc, pos


def greedy_decode_batch(
    params: ModelParams,
    vocab: Vocabulary,
    src_seqs: list[list[int]],
    target_lang: str,
    max_steps: int,
    batch_size: int = 32,
) -> list[list[int]]:
    """Stepwise argmax decoding; stops each row at eos or after max_steps."""
    if max_steps < 0:
        raise ValueError(f"max_steps must be >= 0, got {max_steps}")
    out: list[list[int]] = []
    for start in range(0, len(src_seqs), batch_size):
        chunk = src_seqs[start : start + batch_size]
        out.extend(_greedy_chunk(params, vocab, chunk, target_lang, max_steps))
    return out


def _greedy_chunk(params, vocab, src_seqs, target_lang, max_steps) -> list[list[int]]:
    cfg = params.config
    g = _Graph(params, build_graph=False, dropout_rng=None)
    enc_ids, enc_pos = _frame_sources(vocab, src_seqs, target_lang, cfg.max_positions)
    enc_out, enc_key_pad = g.encode(enc_ids, enc_pos)
    n = len(src_seqs)
    max_steps = min(max_steps, cfg.max_positions - 1)
    dec = np.full((n, 1), BOS, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    hyps: list[list[int]] = [[] for _ in range(n)]
    for step in range(max_steps):
        if not alive.any():
            break
        pos = np.broadcast_to(np.arange(dec.shape[1], dtype=np.int64), dec.shape).copy()
        dec_h = g.decode(enc_out, enc_key_pad, dec, pos)
        logits = g.logits(dec_h).data[:, -1, :]
        nxt = logits.argmax(axis=-1).astype(np.int64)
        nxt[~alive] = PAD
        for i in range(n):
            if not alive[i]:
                continue
            if nxt[i] == EOS:
                alive[i] = False
            else:
                hyps[i].append(int(nxt[i]))
        dec = np.concatenate([dec, nxt[:, None]], axis=1)
    return hyps


def greedy_decode(
    params: ModelParams,
    vocab: Vocabulary,
    src_tokens: list[int],
    target_lang: str,
    max_steps: int,
) -> list[int]:
    return greedy_decode_batch(params, vocab, [src_tokens], target_lang, max_steps)[0]


def beam_decode(
    params: ModelParams,
    vocab: Vocabulary,
    src_tokens: list[int],
    target_lang: str,
    beam_size: int,
    max_steps: int,
    length_penalty: float = 0.0,
) -> list[int]:
    """Beam search scored by sum-log-prob / length^alpha.

    With beam_size=1 and length_penalty=0 this reduces to greedy decoding.
    """
    if beam_size < 1:
        raise ValueError(f"beam_size must be >= 1, got {beam_size}")
    cfg = params.config
    g = _Graph(params, build_graph=False, dropout_rng=None)
    enc_ids, enc_pos = _frame_sources(vocab, [src_tokens], target_lang, cfg.max_positions)
    enc_out_t, enc_key_pad = g.encode(enc_ids, enc_pos)
    enc_out = enc_out_t.data
    max_steps = min(max_steps, cfg.max_positions - 1)

    def rescore(sum_lp: float, length: int) -> float:
        return sum_lp / (max(length, 1) ** length_penalty)

    beams: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for _ in range(max_steps):
        if not beams:
            break
        nb = len(beams)
        dec = np.full((nb, 1 + max(len(t) for t, _ in beams)), PAD, dtype=np.int64)
        for i, (toks, _) in enumerate(beams):
            dec[i, 0] = BOS
            dec[i, 1 : 1 + len(toks)] = toks
        pos = np.broadcast_to(np.arange(dec.shape[1], dtype=np.int64), dec.shape).copy()
        eo = Tensor(np.broadcast_to(enc_out, (nb,) + enc_out.shape[1:]).copy())
        ek = np.broadcast_to(enc_key_pad, (nb,) + enc_key_pad.shape[1:]).copy()
        dec_h = g.decode(eo, ek, dec, pos)
        logits = g.logits(dec_h).data[:, -1, :]
        m = logits.max(axis=-1, keepdims=True)
        logp = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
        scores = np.asarray([s for _, s in beams])[:, None] + logp
        flat = scores.reshape(-1)
        # 2x oversampling so eos candidates cannot starve the live beam
        order = np.argsort(-flat, kind="stable")[: 2 * beam_size]
        new_beams: list[tuple[list[int], float]] = []
        for f in order:
            if len(new_beams) >= beam_size:
                break
            b, tok = divmod(int(f), logits.shape[-1])
            toks, _ = beams[b]
            if tok == EOS:
                finished.append((toks, rescore(float(flat[f]), len(toks) + 1)))
            else:
                new_beams.append((toks + [tok], float(flat[f])))
        beams = new_beams
        if len(finished) >= beam_size:
            break
    for toks, s in beams:
        finished.append((toks, rescore(s, max(len(toks), 1))))
    if not finished:
        return []
    best = max(range(len(finished)), key=lambda i: (finished[i][1], -i))
    return finished[best][0]


# -- serialization ----------------------------------------------------------------

_CKPT_MAGIC = "mtlab-params"
_CKPT_VERSION = 1


def save_params(params: ModelParams, path) -> None:
    """One-line JSON manifest, newline, then float32 little-endian tensor blob."""
    manifest = {
        "format": _CKPT_MAGIC,
        "version": _CKPT_VERSION,
        "dtype": "<f4",
        "config": dataclasses.asdict(params.config),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for v in params.tensors.values():
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_params(path) -> ModelParams:
    with open(path, "rb") as f:
        head = f.readline()
        blob = f.read()
    try:
        manifest = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ValueError(f"{path}: not a parameter checkpoint (bad manifest line)") from None
    if manifest.get("format") != _CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint format {manifest.get('format')!r}")
    if manifest.get("version") != _CKPT_VERSION:
        raise ValueError(
            f"{path}: checkpoint version {manifest.get('version')}, this build reads {_CKPT_VERSION}"
        )
    config = ModelConfig(**manifest["config"])
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(blob):
            raise ValueError(f"{path}: truncated blob at tensor {entry['name']!r}")
        arr = np.frombuffer(blob[offset : offset + nbytes], dtype="<f4").reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float32, copy=True)
        offset += nbytes
    if offset != len(blob):
        raise ValueError(f"{path}: blob has {len(blob) - offset} trailing bytes")
    return ModelParams(config, tensors)
