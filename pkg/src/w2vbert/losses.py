"""Contrastive, diversity-augmented, masked-prediction, and combined losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .masking import MaskSpec
from .tensor import Tensor, ops


class NoContrastiveSignalError(ValueError):
    pass


class MLMUndefinedError(ValueError):
    pass


@dataclass(frozen=True)
class ContrastiveLossConfig:
    n_distractors: int = 100
    temperature: float = 0.1

    def __post_init__(self):
        if self.n_distractors < 1:
            raise ValueError("n_distractors must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class ContrastiveTerm:
    loss: Tensor
    n_anchors: int          # masked frames that contributed
    n_degenerate: int       # utterances skipped for having < 2 masked frames


def sample_distractors(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """(n, k) positions in a pool of ``n``; row i never contains i.

    Rows are uniform without replacement when the pool (n - 1 others) holds at
    least ``k`` entries, and uniform with replacement otherwise.
    """
    if n - 1 >= k:
        keys = rng.random((n, n))
        np.fill_diagonal(keys, np.inf)
        return np.argsort(keys, axis=1, kind="stable")[:, :k]
    r = rng.integers(0, n - 1, size=(n, k))
    return r + (r >= np.arange(n)[:, None])


def contrastive_loss_w(c: Tensor, q: Tensor, masks: list[MaskSpec], cfg: ContrastiveLossConfig,
                       seeds) -> ContrastiveTerm:
    """Identify the true quantized vector among same-utterance masked distractors.

    ``c`` and ``q`` are (B, T, d).  Per masked step t the loss is the negative
    log-softmax, at temperature ``cfg.temperature``, of cos(c_t, q_t) against
    cos(c_t, q') for K distractors q'.  Frames are averaged within an
    utterance, then utterances are averaged.
    """
    B, T, d = c.shape
    if q.shape != c.shape:
        raise ValueError(f"context {c.shape} and quantized {q.shape} shapes differ")
    K = cfg.n_distractors
    anchors, cands, weights = [], [], []
    n_degenerate = 0
    per_utt = []
    for b, (m, seed) in enumerate(zip(masks, seeds)):
        pos = np.flatnonzero(m.masked)
        if pos.size < 2:
            n_degenerate += 1
            continue
        rng = np.random.default_rng(seed)
        dist = pos[sample_distractors(pos.size, K, rng)]
        base = b * T
        anchors.append(base + pos)
        cands.append(base + np.concatenate([pos[:, None], dist], axis=1))
        per_utt.append(pos.size)
    if not anchors:
        raise NoContrastiveSignalError("no contrastive signal: every utterance has fewer than 2 masked frames")
    for n in per_utt:
        weights.append(np.full(n, 1.0 / (n * len(per_utt))))
    anchors = np.concatenate(anchors)
    cands = np.concatenate(cands)
    w = np.concatenate(weights).astype(c.dtype)

    c_flat = ops.reshape(c, (B * T, d))
    q_flat = ops.reshape(q, (B * T, d))
    ca = ops.reshape(ops.gather_rows(c_flat, anchors), (anchors.size, 1, d))
    qc = ops.gather_rows(q_flat, cands)                                  # (A, K+1, d)
    logits = ops.scale(ops.cosine_similarity(ca, qc), 1.0 / cfg.temperature)
    logp = ops.log_softmax(logits, axis=-1)
    pick = np.zeros((1, K + 1), dtype=c.dtype)
    pick[0, 0] = 1.0
    nll = ops.sum(ops.mul(logp, pick), axis=-1)                          # (A,)
    loss = ops.scale(ops.sum(ops.mul(nll, w)), -1.0)
    return ContrastiveTerm(loss, int(anchors.size), n_degenerate)


def contrastive_total(l_w, l_d, alpha: float = 0.1):
    """L_c = L_w + alpha * L_d; works on tensors or floats."""
    if isinstance(l_w, Tensor) or isinstance(l_d, Tensor):
        return ops.add(l_w, ops.scale(l_d, alpha))
    return l_w + alpha * l_d


@dataclass
class MLMTerm:
    loss: Tensor
    accuracy: float
    n_masked: int


def mlm_loss(logits: Tensor, targets, masks: list[MaskSpec], groups: int = 1) -> MLMTerm:
    """Cross-entropy at masked positions only.

    ``targets`` is either a (B, T, G, V) tensor of target distributions (the
    quantizer's straight-through one-hot, whose gradient reaches the
    quantizer) or an integer array of per-group entries shaped (B, T, G) or
    (B, T).
    """
    B, T, GV = logits.shape
    G = groups
    V = GV // G
    sel = np.zeros((B, T), dtype=bool)
    for b, m in enumerate(masks):
        sel[b, : m.n_frames] = m.masked
    idx = np.flatnonzero(sel.reshape(-1))
    if idx.size == 0:
        raise MLMUndefinedError("MLM undefined: no masked positions in the batch")

    if isinstance(targets, Tensor):
        tgt = ops.gather_rows(ops.reshape(targets, (B * T, G, V)), idx)
        ids = targets.data.reshape(B * T, G, V)[idx].argmax(-1)
    else:
        ids_all = np.asarray(targets).reshape(B * T, G)
        ids = ids_all[idx]
        tgt = Tensor(np.eye(V, dtype=logits.dtype)[ids])
    lg = ops.gather_rows(ops.reshape(logits, (B * T, G, V)), idx)       # (n, G, V)
    logp = ops.log_softmax(lg, axis=-1)
    ce = ops.scale(ops.sum(ops.mul(logp, tgt)), -1.0 / (idx.size * G))
    acc = float((lg.data.argmax(-1) == ids).mean())
    return MLMTerm(ce, acc, int(idx.size))


@dataclass
class LossBreakdown:
    l_w: float
    l_d: float
    l_c: float
    l_m: float
    l_p: float
    mlm_accuracy: float
    masked_count: int
    total: Tensor | None = None     # differentiable l_p


def pretrain_loss(l_w: Tensor, l_d: Tensor, mlm: MLMTerm, alpha: float = 0.1, beta: float = 1.0,
                  gamma: float = 1.0, masked_count: int | None = None) -> LossBreakdown:
    """L_p = beta * (L_w + alpha * L_d) + gamma * L_m.

    Reported scalars are composed in double precision from the component
    values, so l_c and l_p relate to l_w, l_d and l_m exactly.
    """
    l_c_t = contrastive_total(l_w, l_d, alpha)
    total = ops.add(ops.scale(l_c_t, beta), ops.scale(mlm.loss, gamma))
    fw, fd, fm = float(l_w.data), float(l_d.data), float(mlm.loss.data)
    fc = fw + alpha * fd
    return LossBreakdown(
        l_w=fw, l_d=fd, l_c=fc, l_m=fm, l_p=beta * fc + gamma * fm,
        mlm_accuracy=mlm.accuracy,
        masked_count=mlm.n_masked if masked_count is None else masked_count,
        total=total,
    )
