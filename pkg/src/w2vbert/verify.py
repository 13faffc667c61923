"""Finite-difference verification of the primitives and of a whole micro model."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .masking import MaskSpec
from .model import Batch, W2VBert, reduced_length
from .tensor import no_grad, run_primitive_suite
from .tensor.gradcheck import finite_diff_check
from .trainer import compute_losses

PRIMITIVE_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3

# dim 8, one block per module, 8 codes, 16 frames at the context-vector rate
MICRO = dict(model_dim=8, n_heads=2, conv_kernel=3, n_contrastive_layers=1, n_masked_layers=1,
             ffn_expansion=2, encoder_channels=2, codebook_size=8, code_dim=8, n_distractors=3,
             dtype="float64")
MICRO_FRAMES = 16


def micro_config(**changes) -> TrainConfig:
    return TrainConfig().replace(**{**MICRO, **changes})


def end_to_end_gradcheck(seed: int = 0, coords_per_tensor: int = 3, epsilon: float = 1e-5) -> float:
    """Max relative error of d l_p / d(parameters) on the smooth (soft-selection) path.

    Masks and Gumbel noise are fixed, so the loss is a deterministic smooth
    function of the parameters.  A few random coordinates of every parameter
    tensor are perturbed.
    """
    cfg = micro_config()
    model = W2VBert(cfg.model_config(), seed=seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 0xE2E])
    n_in = 4 * MICRO_FRAMES
    feats = [rng.standard_normal((n_in, cfg.n_mels)), rng.standard_normal((n_in - 5, cfg.n_mels))]
    batch = Batch.from_features(feats, keys=[(seed, 0, 0), (seed, 0, 1)], dtype=np.float64)
    lengths = [reduced_length(len(f)) for f in feats]
    masks = [MaskSpec.from_starts(lengths[0], [2, 9], 4), MaskSpec.from_starts(lengths[1], [5], 5)]
    T = max(lengths)
    noise = rng.gumbel(size=(2, T, cfg.codebook_groups, cfg.codebook_size))

    # the prediction targets read the latents behind a stop-gradient; the
    # check treats that value as a constant fixed at the unperturbed point
    with no_grad():
        frozen = compute_losses(model, batch, cfg, train=True, temp=1.0, masks=masks,
                                noise=noise, straight_through=False)[0].latents.data.copy()

    def loss(*_params):
        _, parts = compute_losses(model, batch, cfg, train=True, temp=1.0, masks=masks,
                                  noise=noise, straight_through=False, target_latents=frozen)
        return parts.total

    # a shared shift of every key cancels in the softmax, so key biases have an
    # identically zero gradient and a relative error there only measures roundoff
    params = [p for name, p in model.parameters().items() if not name.endswith("attn.k.bias")]
    coords = [rng.choice(p.size, size=min(coords_per_tensor, p.size), replace=False) for p in params]
    return finite_diff_check(loss, params, epsilon, coords)


@dataclass
class GradcheckReport:
    primitive_errors: dict[str, float]
    model_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return (all(e < PRIMITIVE_TOLERANCE for e in self.primitive_errors.values())
                and self.model_error < MODEL_TOLERANCE)

    def lines(self) -> list[str]:
        out = [f"{name:<20} {err:.3e}  {'ok' if err < PRIMITIVE_TOLERANCE else 'FAIL'}"
               for name, err in self.primitive_errors.items()]
        ok = "ok" if self.model_error < MODEL_TOLERANCE else "FAIL"
        out.append(f"{'micro model':<20} {self.model_error:.3e}  {ok}")
        return out


def run_gradcheck(seed: int = 0) -> GradcheckReport:
    t0 = time.perf_counter()
    prim = run_primitive_suite(seed)
    model_err = end_to_end_gradcheck(seed)
    return GradcheckReport(prim, model_err, time.perf_counter() - t0)
