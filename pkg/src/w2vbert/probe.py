"""Frozen-encoder linear frame classification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .audio import SyntheticUtterance
from .model import Batch, W2VBert
from .tensor import OptimizerState, Tensor, adam_step, backward, no_grad, ops

DOWNSAMPLE = 4


class ProbeError(ValueError):
    pass


def majority_labels(labels: np.ndarray, factor: int = DOWNSAMPLE) -> np.ndarray:
    """One label per group of ``factor`` frames; ties go to the smallest label.

    The last group may be partial, so the output length is ceil(T / factor),
    which equals the encoder's output length.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.size == 0:
        raise ProbeError("labels must be a non-empty 1-D array")
    if labels.min() < 0:
        raise ProbeError("labels must be non-negative")
    n = -(-labels.size // factor)
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        # bincount + argmax picks the first (smallest) label among ties
        out[i] = np.bincount(labels[i * factor:(i + 1) * factor]).argmax()
    return out


def encoder_representations(model: W2VBert, utts: Sequence[SyntheticUtterance],
                            chunk: int = 16) -> list[np.ndarray]:
    """Final context vectors (T', d) per utterance, eval mode, no masking."""
    reps = []
    with no_grad():
        for start in range(0, len(utts), chunk):
            part = utts[start:start + chunk]
            batch = Batch.from_features([u.logmel().frames for u in part], dtype=model.dtype)
            out = model(batch, train=False)
            final = out.context_vectors_final.data
            for i, L in enumerate(out.lengths):
                reps.append(final[i, :L].astype(np.float64))
    return reps


@dataclass
class LinearProbe:
    weight: np.ndarray      # (d, n_classes)
    bias: np.ndarray        # (n_classes,)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (x @ self.weight + self.bias).argmax(axis=-1)


def fit_linear_probe(x: np.ndarray, y: np.ndarray, n_classes: int, steps: int = 300,
                     lr: float = 0.05) -> LinearProbe:
    """Full-batch softmax regression by Adam from a zero init (deterministic)."""
    w = Tensor(np.zeros((x.shape[1], n_classes)), requires_grad=True)
    b = Tensor(np.zeros(n_classes), requires_grad=True)
    params = {"weight": w, "bias": b}
    state = OptimizerState.for_params(params)
    onehot = np.eye(n_classes)[y]
    xt = Tensor(x)
    for _ in range(steps):
        w.grad = b.grad = None
        logp = ops.log_softmax(ops.add(ops.matmul(xt, w), b), axis=-1)
        loss = ops.scale(ops.sum(ops.mul(logp, onehot)), -1.0 / len(y))
        grads = backward(loss, [w, b])
        adam_step(params, {"weight": grads[w], "bias": grads[b]}, state, lr)
    return LinearProbe(w.data.copy(), b.data.copy())


def _frames(model: W2VBert, utts: Sequence[SyntheticUtterance]) -> tuple[np.ndarray, np.ndarray]:
    reps = encoder_representations(model, utts)
    labels = []
    for u, r in zip(utts, reps):
        lab = majority_labels(u.frame_labels)
        if lab.size != r.shape[0]:
            raise ProbeError(f"{u.utterance_id}: {lab.size} label groups for {r.shape[0]} encoder frames")
        labels.append(lab)
    return np.concatenate(reps), np.concatenate(labels)


def eval_probe(probe: LinearProbe, model: W2VBert, utts: Sequence[SyntheticUtterance]) -> float:
    if len(utts) == 0:
        raise ProbeError("no utterances to evaluate")
    x, y = _frames(model, utts)
    return float((probe.predict(x) == y).mean())


@dataclass
class ProbeResult:
    frame_accuracy: float
    baseline_accuracy: float
    n_train_frames: int
    n_eval_frames: int
    train_ids: list[str]
    eval_ids: list[str]

    @property
    def gain(self) -> float:
        return self.frame_accuracy - self.baseline_accuracy


def split_utterances(n: int, split_seed: int, eval_fraction: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng([split_seed, 0x9B0BE]).permutation(n)
    n_eval = int(round(n * eval_fraction))
    train, held = np.sort(order[n_eval:]), np.sort(order[:n_eval])
    if train.size < 2 or held.size < 2:
        raise ProbeError(f"need at least 2 utterances per split, got {train.size} train / {held.size} held out")
    return train, held


def _probe_one(model: W2VBert, train, held, n_classes: int, steps: int) -> tuple[float, int, int]:
    x_tr, y_tr = _frames(model, train)
    probe = fit_linear_probe(x_tr, y_tr, n_classes, steps=steps)
    x_ev, y_ev = _frames(model, held)
    return float((probe.predict(x_ev) == y_ev).mean()), len(y_tr), len(y_ev)


def train_probe(model: W2VBert, utts: Sequence[SyntheticUtterance], split_seed: int = 0, *,
                baseline_seed: int = 12345, eval_fraction: float = 0.25, steps: int = 300) -> ProbeResult:
    """Probe ``model`` and a freshly initialised model of the same config on one split."""
    if any(u.frame_labels is None for u in utts):
        raise ProbeError("every utterance needs frame labels")
    train_idx, held_idx = split_utterances(len(utts), split_seed, eval_fraction)
    train = [utts[i] for i in train_idx]
    held = [utts[i] for i in held_idx]
    n_classes = int(max(u.frame_labels.max() for u in utts)) + 1
    before = {k: p.data.copy() for k, p in model.parameters().items()}
    acc, n_tr, n_ev = _probe_one(model, train, held, n_classes, steps)
    baseline = W2VBert(model.cfg, seed=baseline_seed, dtype=model.dtype)
    base_acc, _, _ = _probe_one(baseline, train, held, n_classes, steps)
    for k, p in model.parameters().items():
        if not np.array_equal(before[k], p.data):
            raise RuntimeError(f"probe modified encoder parameter {k}")
    return ProbeResult(acc, base_acc, n_tr, n_ev,
                       [u.utterance_id for u in train], [u.utterance_id for u in held])

