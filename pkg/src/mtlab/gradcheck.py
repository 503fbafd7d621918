"""Central finite-difference checking of the backward pass.

Used by the grad-check CLI; runs the model in float64 so the comparison
is limited by truncation error of the difference stencil, not rounding.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import model as model_mod
from .corpus import CorpusRegistry, MonoStore, ParallelStore
from .mass import MaskSpec
from .model import ModelConfig, ModelParams, init_params
from .sampler import BatchSampler, SamplingPolicy
from .subword import train_vocab


def finite_difference_grads(
    params: ModelParams,
    batch,
    step: float = 3e-5,
    names: list[str] | None = None,
) -> dict[str, np.ndarray]:
    """Central differences of the batch loss for every requested tensor entry.

    The default step balances truncation against float64 roundoff; much
    larger and the O(step^2) term alone exceeds a 1e-4 relative tolerance
    on small-gradient coordinates.
    """
    grads: dict[str, np.ndarray] = {}
    for name in names or list(params.tensors):
        t = params.tensors[name]
        g = np.zeros(t.shape, dtype=np.float64)
        flat = t.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = np.float32(orig + step)
            hi = float(flat[i])
            loss_hi = model_mod.forward(params, batch).loss
            flat[i] = np.float32(orig - step)
            lo = float(flat[i])
            loss_lo = model_mod.forward(params, batch).loss
            flat[i] = orig
            gflat[i] = (loss_hi - loss_lo) / (hi - lo)  # measured perturbation
        grads[name] = g
    return grads


def max_relative_error(
    params: ModelParams,
    batch,
    step: float = 3e-5,
    names: list[str] | None = None,
) -> tuple[float, str]:
    """Worst relative disagreement between backward() and finite differences."""
    _, analytic = model_mod.backward(params, batch)
    numeric = finite_difference_grads(params, batch, step=step, names=names)
    worst, where = 0.0, ""
    for name, fd in numeric.items():
        ad_g = analytic[name].astype(np.float64)
        denom = np.maximum(np.maximum(np.abs(ad_g), np.abs(fd)), 1e-6)
        rel = np.abs(ad_g - fd) / denom
        i = int(rel.argmax())
        if rel.reshape(-1)[i] > worst:
            worst = float(rel.reshape(-1)[i])
            coord = tuple(int(j) for j in np.unravel_index(i, fd.shape))
            where = f"{name}[{coord}]"
    return worst, where


def make_check_setup(seed: int = 0, d_model: int = 16, n_layers: int = 1, n_heads: int = 2):
    """Tiny vocab, float64 model, and one translation + one MASS batch."""
    rng = np.random.default_rng(seed)
    words = ["ga", "bo", "tix", "mur", "elp", "san", "kre", "od"]
    sents = [" ".join(rng.choice(words, size=int(rng.integers(4, 8)))) for _ in range(40)]
    flips = [" ".join(reversed(s.split())) for s in sents]
    vocab = train_vocab(sents + flips, target_size=80, reserved_langs=["xx", "yy"])
    registry = CorpusRegistry()
    registry.add_parallel(ParallelStore("xx", "yy", list(zip(sents, flips))))
    registry.add_mono(MonoStore("yy", flips))
    config = ModelConfig(
        vocab_size=vocab.size,
        n_layers=n_layers,
        n_heads=n_heads,
        d_model=d_model,
        d_ff=2 * d_model,
        max_positions=32,
        dropout=0.0,
        compute_dtype="float64",
    )
    params = init_params(config, seed)
    sampler = BatchSampler(registry, SamplingPolicy(batch_size=2, max_len=12, mono_ratio=0.5, seed=seed), vocab, MaskSpec())
    batches = {}
    for _ in range(1000):
        b = sampler.next_batch()
        batches.setdefault(b.objective, b)
        if len(batches) == 2:
            break
    return vocab, params, batches
