"""Span masking of encoder output with random-vector replacement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ops


@dataclass(frozen=True)
class MaskConfig:
    start_prob: float = 0.065
    span_len: int = 10
    replacement_std: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.start_prob <= 1.0:
            raise ValueError(f"start_prob must lie in [0, 1], got {self.start_prob}")
        if self.span_len < 1:
            raise ValueError(f"span_len must be >= 1, got {self.span_len}")
        if self.replacement_std <= 0:
            raise ValueError(f"replacement_std must be positive, got {self.replacement_std}")


@dataclass
class MaskSpec:
    masked: np.ndarray        # bool, one per frame
    span_starts: np.ndarray   # sorted int64 frame indices

    @property
    def n_frames(self) -> int:
        return self.masked.shape[0]

    @property
    def n_masked(self) -> int:
        return int(self.masked.sum())

    @classmethod
    def empty(cls, n_frames: int) -> "MaskSpec":
        return cls(np.zeros(n_frames, dtype=bool), np.zeros(0, dtype=np.int64))

    @classmethod
    def from_starts(cls, n_frames: int, starts, span_len: int) -> "MaskSpec":
        starts = np.unique(np.asarray(starts, dtype=np.int64))
        return cls(spans_to_mask(n_frames, starts, span_len), starts)


def spans_to_mask(n_frames: int, starts: np.ndarray, span_len: int) -> np.ndarray:
    """Union of [s, min(s + span_len, n_frames)) over all starts."""
    delta = np.zeros(n_frames + 1, dtype=np.int64)
    np.add.at(delta, starts, 1)
    np.add.at(delta, np.minimum(starts + span_len, n_frames), -1)
    return np.cumsum(delta[:-1]) > 0


def sample_mask(n_frames: int, cfg: MaskConfig, seed) -> MaskSpec:
    """Each frame independently starts a span with probability ``cfg.start_prob``."""
    if n_frames < 1:
        raise ValueError(f"cannot mask a sequence of {n_frames} frames")
    rng = np.random.default_rng(seed)
    starts = np.flatnonzero(rng.random(n_frames) < cfg.start_prob)
    return MaskSpec(spans_to_mask(n_frames, starts, cfg.span_len), starts)


def sample_nonempty_mask(n_frames: int, cfg: MaskConfig, seed: int) -> MaskSpec:
    """Sample with ``seed``; if nothing is masked, retry once with ``seed + 1``.

    The result may still be empty, in which case the utterance contributes
    nothing to either loss.
    """
    spec = sample_mask(n_frames, cfg, seed)
    if spec.n_masked == 0:
        spec = sample_mask(n_frames, cfg, seed + 1)
    return spec


def replacement_vectors(n: int, dim: int, cfg: MaskConfig, seed, dtype=np.float64) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((n, dim)) * cfg.replacement_std).astype(dtype)


def apply_mask(latents: Tensor, mask: MaskSpec, cfg: MaskConfig, seed) -> Tensor:
    """Replace masked frames of a (T, d) tensor with Gaussian noise vectors.

    Unmasked frames pass through bitwise unchanged; masked frames receive no
    gradient.
    """
    if latents.ndim != 2 or latents.shape[0] != mask.n_frames:
        raise ValueError(f"mask covers {mask.n_frames} frames but latents have shape {latents.shape}")
    T, d = latents.shape
    fill = np.zeros((T, d), dtype=latents.dtype)
    fill[mask.masked] = replacement_vectors(mask.n_masked, d, cfg, seed, latents.dtype)
    return ops.where(~mask.masked[:, None], latents, fill)


def apply_mask_batch(latents: Tensor, masks: list[MaskSpec], cfg: MaskConfig, seeds) -> Tensor:
    """Batched :func:`apply_mask` over (B, T, d); mask ``b`` may be shorter than T (padding)."""
    B, T, d = latents.shape
    keep = np.ones((B, T, 1), dtype=bool)
    fill = np.zeros((B, T, d), dtype=latents.dtype)
    for b, (m, s) in enumerate(zip(masks, seeds)):
        L = m.n_frames
        if L > T:
            raise ValueError(f"mask {b} covers {L} frames but the batch has {T}")
        keep[b, :L, 0] = ~m.masked
        fill[b, :L][m.masked] = replacement_vectors(m.n_masked, d, cfg, s, latents.dtype)
    return ops.where(keep, latents, fill)
