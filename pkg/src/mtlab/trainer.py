"""Deterministic training loop: Adam, global-norm clipping, inverse-sqrt
warmup schedule, periodic checkpoints, and bit-exact resume.

A checkpoint directory holds the float32 parameter blob, the float32
optimizer moments, and the JSON states of the sampling and dropout
generators, which together pin down the rest of the run exactly. The
metrics file keeps only deterministic fields so two runs of the same
config produce byte-identical logs.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as model_mod
from .mass import MaskSpec
from .model import ModelConfig, ModelParams, init_params
from .sampler import BatchSampler, SamplingPolicy
from .subword import Vocabulary

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Raised when the loss or gradient norm stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    warmup_steps: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float = 1.0
    lr_scale: float = 1.0
    checkpoint_every: int = 1000
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.warmup_steps < 1:
            raise ValueError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if not (self.clip_norm > 0):  # also rejects NaN; inf is allowed
            raise ValueError(f"clip_norm must be > 0 (or inf), got {self.clip_norm}")
        if self.lr_scale <= 0:
            raise ValueError(f"lr_scale must be > 0, got {self.lr_scale}")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ValueError("checkpoint_every and log_every must be >= 1")
        if not 0 <= self.adam_beta1 < 1 or not 0 <= self.adam_beta2 < 1:
            raise ValueError("adam betas must be in [0, 1)")


def lr_at(step: int, d_model: int, warmup_steps: int) -> float:
    """d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if d_model < 1 or warmup_steps < 1:
        raise ValueError("d_model and warmup_steps must be >= 1")
    return d_model**-0.5 * min(step**-0.5, step * warmup_steps**-1.5)


class AdamState:
    """First and second moments (float32) plus the completed step count."""

    def __init__(self, m: dict[str, np.ndarray], v: dict[str, np.ndarray], step: int = 0):
        self.m = m
        self.v = v
        self.step = step

    @classmethod
    def init(cls, params: ModelParams) -> "AdamState":
        return cls(
            {k: np.zeros_like(t) for k, t in params.tensors.items()},
            {k: np.zeros_like(t) for k, t in params.tensors.items()},
            step=0,
        )


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        g64 = g.astype(np.float64, copy=False)
        total += float((g64 * g64).sum())
    return math.sqrt(total)


@dataclass
class MetricsRecord:
    step: int
    objective: str
    key: str
    loss: float
    lr: float
    token_count: int
    grad_norm: float
    tokens_per_sec: float

    def to_json_line(self) -> str:
        """Deterministic fields only; throughput stays off the record on disk."""
        payload = {
            "step": self.step,
            "objective": self.objective,
            "key": self.key,
            "loss": self.loss,
            "lr": self.lr,
            "token_count": self.token_count,
            "grad_norm": self.grad_norm,
        }
        return json.dumps(payload, sort_keys=True)


def train_step(
    params: ModelParams,
    opt: AdamState,
    batch,
    tcfg: TrainConfig,
    dropout_rng=None,
) -> tuple[ModelParams, AdamState, MetricsRecord]:
    """One forward/backward/update. Mutates params and opt in place."""
    t0 = time.perf_counter()
    result, grads = model_mod.backward(params, batch, dropout_rng)
    norm = global_grad_norm(grads)
    if not math.isfinite(result.loss) or not math.isfinite(norm):
        raise TrainingDivergedError(
            f"non-finite loss {result.loss} or grad norm {norm} at step {opt.step + 1} "
            f"({batch.objective} {batch.key})"
        )
    scale = 1.0 if norm == 0.0 else min(1.0, tcfg.clip_norm / norm)
    step = opt.step + 1
    lr = lr_at(step, params.config.d_model, tcfg.warmup_steps) * tcfg.lr_scale
    b1, b2, eps = tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    for name, t in params.tensors.items():
        g = (grads[name].astype(np.float32, copy=False) * np.float32(scale)).astype(np.float32)
        m = opt.m[name]
        v = opt.v[name]
        m *= np.float32(b1)
        m += np.float32(1.0 - b1) * g
        v *= np.float32(b2)
        v += np.float32(1.0 - b2) * g * g
        update = (m / np.float32(bc1)) / (np.sqrt(v / np.float32(bc2)) + np.float32(eps))
        t -= np.float32(lr) * update
    opt.step = step
    dt = time.perf_counter() - t0
    key = f"{batch.key[0]}-{batch.key[1]}" if batch.objective == "translation" else str(batch.key)
    rec = MetricsRecord(
        step=step,
        objective=batch.objective,
        key=key,
        loss=result.loss,
        lr=lr,
        token_count=result.token_count,
        grad_norm=norm,
        tokens_per_sec=result.token_count / max(dt, 1e-9),
    )
    return params, opt, rec


# -- optimizer/rng checkpoint blobs ------------------------------------------------

_OPTIM_MAGIC = "mtlab-optim"


def _save_optim(opt: AdamState, path: Path) -> None:
    names = list(opt.m)
    manifest = {
        "format": _OPTIM_MAGIC,
        "version": 1,
        "step": opt.step,
        "dtype": "<f4",
        "tensors": [{"name": k, "shape": list(opt.m[k].shape)} for k in names],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for k in names:
            f.write(np.ascontiguousarray(opt.m[k], dtype="<f4").tobytes())
        for k in names:
            f.write(np.ascontiguousarray(opt.v[k], dtype="<f4").tobytes())


def _load_optim(path: Path) -> AdamState:
    with open(path, "rb") as f:
        head = f.readline()
        blob = f.read()
    manifest = json.loads(head.decode("utf-8"))
    if manifest.get("format") != _OPTIM_MAGIC or manifest.get("version") != 1:
        raise ValueError(f"{path}: not an optimizer checkpoint this build can read")
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    offset = 0
    for target in (m, v):
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            nbytes = int(np.prod(shape)) * 4
            if offset + nbytes > len(blob):
                raise ValueError(f"{path}: truncated optimizer blob at {entry['name']!r}")
            target[entry["name"]] = (
                np.frombuffer(blob[offset : offset + nbytes], dtype="<f4").reshape(shape).astype(np.float32)
            )
            offset += nbytes
    if offset != len(blob):
        raise ValueError(f"{path}: optimizer blob has trailing bytes")
    return AdamState(m, v, step=int(manifest["step"]))


# -- run directory ------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    final_step: int
    checkpoint_dir: Path
    metrics_path: Path


def _checkpoint_dirs(out_dir: Path) -> list[tuple[int, Path]]:
    root = out_dir / "checkpoints"
    if not root.is_dir():
        return []
    found = []
    for p in sorted(root.iterdir()):
        if p.is_dir() and p.name.startswith("step-"):
            try:
                found.append((int(p.name.split("-", 1)[1]), p))
            except ValueError:
                continue
    return sorted(found)


def latest_checkpoint(out_dir) -> Path | None:
    dirs = _checkpoint_dirs(Path(out_dir))
    return dirs[-1][1] if dirs else None


def _write_checkpoint(out_dir: Path, step: int, params: ModelParams, opt: AdamState, sampler: BatchSampler, dropout_rng) -> Path:
    ckpt = out_dir / "checkpoints" / f"step-{step:06d}"
    ckpt.mkdir(parents=True, exist_ok=True)
    model_mod.save_params(params, ckpt / "model.ckpt")
    _save_optim(opt, ckpt / "optim.ckpt")
    state = {
        "step": step,
        "sampler_rng": json.loads(sampler.state()),
        "dropout_rng": dropout_rng.bit_generator.state,
        "model_config": dataclasses.asdict(params.config),
    }
    (ckpt / "state.json").write_text(json.dumps(state, sort_keys=True), encoding="utf-8")
    return ckpt


def _truncate_metrics(path: Path, keep_upto_step: int) -> None:
    if not path.exists():
        return
    kept = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        if json.loads(line)["step"] <= keep_upto_step:
            kept.append(line)
    path.write_text("".join(l + "\n" for l in kept), encoding="utf-8")


def train(
    registry,
    vocab: Vocabulary,
    policy: SamplingPolicy,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir,
    mask_spec: MaskSpec | None = None,
    resume: bool = False,
) -> TrainResult:
    """Run (or continue) a training job in out_dir.

    Fresh runs overwrite metrics.jsonl; resumed runs restart from the
    newest checkpoint, truncate metrics written past it, and continue the
    exact batch/dropout streams, so the tail of the run is bit-identical
    to an uninterrupted one.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    sampler = BatchSampler(registry, policy, vocab, mask_spec)
    seeds = np.random.SeedSequence(train_config.seed).generate_state(2)

    ckpt = latest_checkpoint(out) if resume else None
    if ckpt is not None:
        params = model_mod.load_params(ckpt / "model.ckpt")
        if dataclasses.asdict(params.config) != dataclasses.asdict(model_config):
            raise ValueError(f"resume config mismatch: checkpoint {ckpt} was written with a different model config")
        opt = _load_optim(ckpt / "optim.ckpt")
        state = json.loads((ckpt / "state.json").read_text(encoding="utf-8"))
        if state["step"] != opt.step:
            raise ValueError(f"{ckpt}: state.json step {state['step']} disagrees with optimizer step {opt.step}")
        sampler.restore(json.dumps(state["sampler_rng"]))
        dropout_rng = np.random.default_rng(0)
        dropout_rng.bit_generator.state = state["dropout_rng"]
        _truncate_metrics(metrics_path, opt.step)
        log.info("resumed from %s at step %d", ckpt, opt.step)
    else:
        params = init_params(model_config, int(seeds[0]))
        opt = AdamState.init(params)
        dropout_rng = np.random.default_rng(int(seeds[1]))
        metrics_path.write_text("", encoding="utf-8")

    final_ckpt = ckpt if ckpt is not None else None
    with open(metrics_path, "a", encoding="utf-8") as mf:
        while opt.step < train_config.total_steps:
            batch = sampler.next_batch()
            params, opt, rec = train_step(params, opt, batch, train_config, dropout_rng)
            if rec.step % train_config.log_every == 0 or rec.step == train_config.total_steps:
                mf.write(rec.to_json_line() + "\n")
                mf.flush()
                log.info(
                    "step %d %s %s loss %.4f lr %.3g tok/s %.0f",
                    rec.step, rec.objective, rec.key, rec.loss, rec.lr, rec.tokens_per_sec,
                )
            if rec.step % train_config.checkpoint_every == 0 or rec.step == train_config.total_steps:
                final_ckpt = _write_checkpoint(out, rec.step, params, opt, sampler, dropout_rng)
    if final_ckpt is None:
        final_ckpt = _write_checkpoint(out, opt.step, params, opt, sampler, dropout_rng)
    return TrainResult(params=params, final_step=opt.step, checkpoint_dir=final_ckpt, metrics_path=metrics_path)
