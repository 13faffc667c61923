"""Gumbel-softmax vector quantizer with a straight-through estimator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Linear, Module, param
from .tensor import Tensor, ops


class DistributionError(ValueError):
    pass


@dataclass(frozen=True)
class QuantizerConfig:
    gumbel_temp_start: float = 2.0
    gumbel_temp_min: float = 0.5
    gumbel_temp_decay: float = 0.9999

    def __post_init__(self):
        if not self.gumbel_temp_start >= self.gumbel_temp_min > 0:
            raise ValueError("need gumbel_temp_start >= gumbel_temp_min > 0")
        if not 0 < self.gumbel_temp_decay <= 1:
            raise ValueError("gumbel_temp_decay must lie in (0, 1]")

    def temperature(self, step: int) -> float:
        return max(self.gumbel_temp_min, self.gumbel_temp_start * self.gumbel_temp_decay ** step)


class Codebook(Module):
    """G groups of V code vectors, the logit projection, and the output projection."""

    def __init__(self, latent_dim: int, groups: int, entries: int, code_dim: int,
                 rng: np.random.Generator, dtype=np.float32):
        if code_dim % groups:
            raise ValueError(f"code_dim {code_dim} is not divisible by {groups} groups")
        self.groups = groups
        self.entries = entries
        self.code_dim = code_dim
        self.proj = Linear(latent_dim, groups * entries, rng, dtype)
        # Unit-variance weights make the logits dominate the Gumbel noise from
        # the first step; with the small default init, selection starts random.
        self.proj.weight.data = rng.standard_normal((latent_dim, groups * entries)).astype(dtype)
        self.codes = param(rng.standard_normal((groups, entries, code_dim // groups)), dtype)
        self.out = Linear(code_dim, code_dim, rng, dtype)

    def logits(self, x: Tensor) -> Tensor:
        return self.proj(x)

    def lookup(self, onehot: Tensor) -> Tensor:
        """(B, T, G, V) selection weights -> (B, T, code_dim) quantized vectors."""
        B, T, G, V = onehot.shape
        sel = ops.transpose(ops.reshape(onehot, (B * T, G, V)), (1, 0, 2))   # (G, BT, V)
        picked = ops.matmul(sel, self.codes)                                   # (G, BT, d_c)
        flat = ops.reshape(ops.transpose(picked, (1, 0, 2)), (B, T, self.code_dim))
        return self.out(flat)


@dataclass
class QuantizationResult:
    quantized: Tensor            # (B, T, code_dim)
    targets: Tensor              # (B, T, G, V); exact one-hot values, straight-through gradient
    group_ids: np.ndarray        # (B, T, G) selected entry per group, in [0, V)
    soft_probs: Tensor           # (B, T, G, V) softmax of the noiseless logits
    mean_probs: Tensor           # (G, V) soft probabilities averaged over valid frames
    perplexity: float

    @property
    def token_ids(self) -> np.ndarray:
        """(B, T, G) ids offset per group into the G*V prediction head (g*V + entry)."""
        G, V = self.mean_probs.shape
        return self.group_ids + V * np.arange(G)


def gumbel_noise(shape, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    u = np.clip(rng.random(shape), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def quantize(latents: Tensor, book: Codebook, *, train: bool, temp: float = 1.0,
             noise: np.ndarray | None = None, valid: np.ndarray | None = None,
             straight_through: bool = True, target_latents: np.ndarray | None = None) -> QuantizationResult:
    """Quantize (B, T, d) latents.

    In training, ``noise`` (Gumbel samples shaped (B, T, G, V), zeros allowed)
    is added to the logits and the hard argmax selects the code; gradients flow
    through softmax(noisy / temp).  ``straight_through=False`` uses that soft
    distribution in the forward pass too, which makes the whole path smooth
    (used by gradient checks).  In eval the noiseless argmax is used.

    ``targets`` carry the same one-hot values as the selection, but their
    straight-through gradient stops at the logit projection: the prediction
    loss may reshape the code assignment, not the encoder output it reads.
    ``target_latents`` replaces the values behind that stop-gradient, which
    lets a finite-difference check hold them fixed.
    """
    if temp <= 0:
        raise ValueError(f"Gumbel temperature must be positive, got {temp}")
    B, T, _ = latents.shape
    G, V = book.groups, book.entries
    if valid is None:
        valid = np.ones((B, T), dtype=bool)
    logits = ops.reshape(book.logits(latents), (B, T, G, V))
    soft = ops.softmax(logits, axis=-1)

    if train:
        def relax(lg):
            noisy = lg if noise is None else ops.add(lg, noise.astype(latents.dtype))
            return noisy.data.argmax(axis=-1), ops.softmax(ops.scale(noisy, 1.0 / temp), axis=-1)

        ids, relaxed = relax(logits)
        frozen = latents.detach() if target_latents is None else Tensor(target_latents)
        _, relaxed_target = relax(ops.reshape(book.logits(frozen), (B, T, G, V)))
        if straight_through:
            hard = np.eye(V, dtype=latents.dtype)[ids]
            quant_in = ops.add(ops.sub(relaxed, relaxed.detach()), hard)
            targets = ops.add(ops.sub(relaxed_target, relaxed_target.detach()), hard)
        else:
            quant_in, targets = relaxed, relaxed_target
    else:
        ids = logits.data.argmax(axis=-1)
        targets = quant_in = Tensor(np.eye(V, dtype=latents.dtype)[ids])

    w = valid.astype(latents.dtype)[:, :, None, None]
    n_valid = max(int(valid.sum()), 1)
    mean_probs = ops.scale(ops.sum(ops.mul(soft, w), axis=(0, 1)), 1.0 / n_valid)
    return QuantizationResult(
        quantized=book.lookup(quant_in),
        targets=targets,
        group_ids=ids,
        soft_probs=soft,
        mean_probs=mean_probs,
        perplexity=codebook_perplexity(mean_probs.data),
    )


def quantize_train(latents: Tensor, book: Codebook, temp: float, seed) -> QuantizationResult:
    """Single utterance (T, d), training mode with seeded Gumbel noise."""
    x = ops.reshape(latents, (1,) + latents.shape)
    noise = gumbel_noise((1, latents.shape[0], book.groups, book.entries), seed)
    return quantize(x, book, train=True, temp=temp, noise=noise)


def quantize_eval(latents: Tensor, book: Codebook) -> QuantizationResult:
    """Single utterance (T, d), deterministic argmax selection."""
    return quantize(ops.reshape(latents, (1,) + latents.shape), book, train=False)


def _check_distribution(p: np.ndarray) -> None:
    if p.ndim != 2:
        raise DistributionError(f"expected (groups, entries) probabilities, got shape {p.shape}")
    if (p < 0).any():
        raise DistributionError("probabilities must be non-negative")
    s = p.sum(axis=-1)
    if np.abs(s - 1.0).max() > 1e-4:
        raise DistributionError(f"probabilities sum to {s.tolist()}, not 1")


def diversity_loss(mean_probs: Tensor) -> Tensor:
    """(1/G) * sum_g (V - exp(H(p_g))) / V, natural-log entropy; 0 when uniform."""
    if not isinstance(mean_probs, Tensor):
        mean_probs = Tensor(np.asarray(mean_probs, dtype=np.float64))
    _check_distribution(mean_probs.data)
    G, V = mean_probs.shape
    ppl = ops.exp(ops.entropy(mean_probs, axis=-1))            # (G,)
    return ops.scale(ops.sum(ops.sub(float(V), ppl)), 1.0 / (G * V))


def codebook_perplexity(mean_probs) -> float:
    """Geometric mean over groups of exp(H(p_g)); lies in [1, V]."""
    p = np.asarray(mean_probs.data if isinstance(mean_probs, Tensor) else mean_probs, dtype=np.float64)
    _check_distribution(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=-1)
    return float(np.exp(h.mean()))
