"""Deterministic joint pretraining loop, checkpoints, and metrics."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from .audio import SyntheticUtterance, generate_synthetic_corpus
from .config import TrainConfig
from .losses import (
    LossBreakdown,
    MLMTerm,
    MLMUndefinedError,
    NoContrastiveSignalError,
    contrastive_loss_w,
    mlm_loss,
    pretrain_loss,
)
from .masking import MaskSpec
from .model import Batch, ForwardOutput, W2VBert, derive_seed
from .quantizer import diversity_loss
from .tensor import NumericOverflowError, OptimizerState, Tensor, adam_step, backward, lr_at

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "l_w", "l_d", "l_c", "l_m", "l_p", "mlm_acc", "codebook_perplexity", "lr", "wall_time_s"]


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class MetricsRow:
    step: int
    l_w: float
    l_d: float
    l_c: float
    l_m: float
    l_p: float
    mlm_acc: float
    codebook_perplexity: float
    lr: float
    wall_time_s: float

    def as_csv(self) -> list[str]:
        return [str(self.step)] + [repr(float(getattr(self, f.name))) for f in fields(self)[1:]]

    @classmethod
    def from_csv(cls, rec: dict) -> "MetricsRow":
        return cls(int(rec["step"]), *(float(rec[k]) for k in METRICS_HEADER[1:]))

    def deterministic_part(self) -> tuple:
        return tuple(getattr(self, f.name) for f in fields(self) if f.name != "wall_time_s")


@dataclass
class TrainState:
    model: W2VBert
    opt: OptimizerState
    step: int
    seed: int
    temperature: float


def init_state(cfg: TrainConfig) -> TrainState:
    model = W2VBert(cfg.model_config(), seed=cfg.seed, dtype=np.dtype(cfg.dtype))
    opt = OptimizerState.for_params(model.parameters())
    return TrainState(model, opt, 0, cfg.seed, cfg.quantizer_config().temperature(0))


# ------------------------------------------------------------------ batching

def synthetic_corpus(cfg: TrainConfig) -> list[SyntheticUtterance]:
    return generate_synthetic_corpus(cfg.corpus_utts, (cfg.corpus_min_s, cfg.corpus_max_s),
                                     cfg.corpus_states, cfg.corpus_seed)


def probe_corpus(cfg: TrainConfig) -> list[SyntheticUtterance]:
    """Utterances never seen in pretraining (different generator seed), for the probe."""
    return generate_synthetic_corpus(cfg.probe_utts, (cfg.corpus_min_s, cfg.corpus_max_s),
                                     cfg.corpus_states, cfg.probe_seed)


def corpus_features(utts) -> list[np.ndarray]:
    return [u.logmel().frames for u in utts]


def batch_indices(step: int, n_items: int, batch_size: int, seed: int) -> np.ndarray:
    """Items for 0-based ``step`` from a stream of seeded per-epoch shuffles.

    Stateless in ``step``, so a resumed run draws the same batches.
    """
    start = step * batch_size
    out = np.empty(batch_size, dtype=np.int64)
    for j in range(batch_size):
        epoch, offset = divmod(start + j, n_items)
        out[j] = np.random.default_rng([seed, epoch, 0xB47C]).permutation(n_items)[offset]
    return out


def make_batch(features: Sequence[np.ndarray], indices, seed: int, step: int, dtype) -> Batch:
    keys = [(seed, step, int(i)) for i in indices]
    return Batch.from_features([features[int(i)] for i in indices], keys, dtype)


# --------------------------------------------------------------- loss bundle

def compute_losses(model: W2VBert, batch: Batch, cfg: TrainConfig, *, train: bool, temp: float,
                   masks: list[MaskSpec] | None = None, noise: np.ndarray | None = None,
                   straight_through: bool = True,
                   target_latents: np.ndarray | None = None) -> tuple[ForwardOutput, LossBreakdown]:
    out = model(batch, train=train, temp=temp, mask_cfg=cfg.mask_config(), masks=masks,
                noise=noise, straight_through=straight_through, target_latents=target_latents)
    q = out.quantization
    l_d = diversity_loss(q.mean_probs)
    zero = Tensor(np.zeros((), dtype=model.dtype))
    n_anchor = 0
    if out.context_vectors_contrastive is None:
        l_w = zero
    else:
        try:
            term = contrastive_loss_w(out.context_vectors_contrastive, q.quantized, out.masks,
                                      cfg.loss_config(), [derive_seed(k, "distract") for k in batch.keys])
            l_w, n_anchor = term.loss, term.n_anchors
        except NoContrastiveSignalError:
            # every utterance drew fewer than two masked frames; only short inputs hit this
            log.warning("batch without a contrastive signal; l_w counted as 0")
            l_w = zero
    try:
        mlm = mlm_loss(out.mlm_logits, q.targets, out.masks, model.cfg.codebook_groups)
    except MLMUndefinedError:
        log.warning("batch without masked frames; l_m counted as 0")
        mlm = MLMTerm(zero, 0.0, 0)
    parts = pretrain_loss(l_w, l_d, mlm, cfg.alpha, cfg.beta, cfg.gamma)
    parts.masked_count = n_anchor if out.context_vectors_contrastive is not None else mlm.n_masked
    return out, parts


def pretrain_step(state: TrainState, batch: Batch, cfg: TrainConfig,
                  lr: float | None = None) -> tuple[TrainState, LossBreakdown, float]:
    """Forward, losses, backward, Adam.  ``lr`` overrides the schedule (test hook)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    params = state.model.parameters()
    for p in params.values():
        p.grad = None
    step_lr = lr_at(cfg.schedule(), state.step + 1) if lr is None else lr
    try:
        out, parts = compute_losses(state.model, batch, cfg, train=True, temp=state.temperature)
    except NumericOverflowError as exc:
        raise TrainingDivergedError(f"step {state.step + 1}: {exc}") from exc
    if not np.isfinite(parts.l_p):
        raise TrainingDivergedError(f"step {state.step + 1}: non-finite loss {parts.l_p}")
    backward(parts.total)
    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}
    adam_step(params, grads, state.opt, step_lr)
    state.step += 1
    state.temperature = cfg.quantizer_config().temperature(state.step)
    return state, parts, out.quantization.perplexity


# ---------------------------------------------------------------- checkpoints

def state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    t: dict[str, np.ndarray] = {}
    for name, p in state.model.parameters().items():
        t[f"model.{name}"] = p.data
    for name in state.opt.m:
        t[f"adam.m.{name}"] = state.opt.m[name]
        t[f"adam.v.{name}"] = state.opt.v[name]
    t["adam.t"] = np.array(state.opt.t, dtype=np.int64)
    t["train.step"] = np.array(state.step, dtype=np.int64)
    t["train.seed"] = np.array(state.seed, dtype=np.int64)
    t["train.temperature"] = np.array(state.temperature, dtype=np.float64)
    return t


def save_checkpoint(state: TrainState, path) -> None:
    ckpt.write_tensors(path, state_tensors(state))


def load_checkpoint(path, cfg: TrainConfig) -> TrainState:
    """Read a checkpoint into a freshly built state for ``cfg``, checking every tensor."""
    stored = ckpt.read_tensors(path)
    state = init_state(cfg)
    expected = state_tensors(state)
    missing = [k for k in expected if k not in stored]
    extra = [k for k in stored if k not in expected]
    if missing or extra:
        raise ckpt.IncompatibleCheckpointError(
            f"{path}: tensor set differs from the model config (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, ref in expected.items():
        got = stored[name]
        if got.shape != ref.shape or got.dtype != ref.dtype:
            raise ckpt.IncompatibleCheckpointError(
                f"{path}: tensor {name!r} has shape {got.shape} {got.dtype}, model expects {ref.shape} {ref.dtype}")
    params = state.model.parameters()
    for name, p in params.items():
        p.data = stored[f"model.{name}"]
        state.opt.m[name] = stored[f"adam.m.{name}"]
        state.opt.v[name] = stored[f"adam.v.{name}"]
    state.opt.t = int(stored["adam.t"])
    state.step = int(stored["train.step"])
    state.seed = int(stored["train.seed"])
    state.temperature = float(stored["train.temperature"])
    return state


# ------------------------------------------------------------------ run loop

def read_metrics(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        return [MetricsRow.from_csv(r) for r in csv.DictReader(fh)]


def write_metrics(path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow(r.as_csv())


def run_pretraining(cfg: TrainConfig, features: Sequence[np.ndarray], out_dir=None, *,
                    resume_from=None, stop_at: int | None = None,
                    on_row: Callable[[MetricsRow], None] | None = None) -> tuple[TrainState, list[MetricsRow]]:
    """Train for ``cfg.total_steps`` (or until ``stop_at``), logging and checkpointing.

    With ``out_dir`` set, metrics go to ``metrics.csv`` and checkpoints to
    ``checkpoints/step_XXXXXX.ckpt``.  Resuming truncates the metrics file to
    the checkpoint's step before appending.
    """
    if len(features) == 0:
        raise ValueError("corpus is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_path = ckpt_dir = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        metrics_path = out_dir / "metrics.csv"

    state = load_checkpoint(resume_from, cfg) if resume_from is not None else init_state(cfg)
    rows: list[MetricsRow] = []
    if resume_from is not None and metrics_path is not None and metrics_path.exists():
        rows = [r for r in read_metrics(metrics_path) if r.step <= state.step]
    if metrics_path is not None:
        write_metrics(metrics_path, rows)
    dtype = np.dtype(cfg.dtype)
    last_ckpt = resume_from
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    t0 = time.perf_counter()
    fh = open(metrics_path, "a", newline="") if metrics_path is not None else None
    writer = csv.writer(fh, lineterminator="\n") if fh else None
    try:
        while state.step < end:
            idx = batch_indices(state.step, len(features), cfg.batch_size, cfg.seed)
            batch = make_batch(features, idx, cfg.seed, state.step, dtype)
            lr = lr_at(cfg.schedule(), state.step + 1)
            try:
                state, parts, ppl = pretrain_step(state, batch, cfg)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(f"{exc}; last good checkpoint: {last_ckpt}") from exc
            if state.step % cfg.log_every == 0:
                row = MetricsRow(state.step, parts.l_w, parts.l_d, parts.l_c, parts.l_m, parts.l_p,
                                 parts.mlm_accuracy, ppl, lr, time.perf_counter() - t0)
                rows.append(row)
                if writer:
                    writer.writerow(row.as_csv())
                    fh.flush()
                if on_row:
                    on_row(row)
            if ckpt_dir is not None and state.step % cfg.checkpoint_every == 0:
                last_ckpt = ckpt_dir / f"step_{state.step:06d}.ckpt"
                save_checkpoint(state, last_ckpt)
    finally:
        if fh:
            fh.close()
    return state, rows
