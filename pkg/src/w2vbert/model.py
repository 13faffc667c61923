"""Feature encoder, conformer blocks, and the assembled w2v-BERT network."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .masking import MaskConfig, MaskSpec, apply_mask_batch, sample_nonempty_mask
from .nn import LayerNorm, Linear, Module, param
from .quantizer import Codebook, QuantizationResult, gumbel_noise, quantize
from .tensor import Tensor, ops

NEG_INF = -1e9


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 80
    model_dim: int = 32
    n_heads: int = 4
    conv_kernel: int = 5
    n_contrastive_layers: int = 2
    n_masked_layers: int = 2
    ffn_expansion: int = 4
    encoder_channels: int = 8
    codebook_groups: int = 1
    codebook_size: int = 64
    code_dim: int = 32
    use_relative_attention: bool = False
    remove_contrastive_module: bool = False

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by n_heads {self.n_heads}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.n_contrastive_layers < 0 or self.n_masked_layers < 0:
            raise ConfigError("layer counts must be non-negative")
        if self.n_contrastive_layers + self.n_masked_layers < 1:
            raise ConfigError("the network needs at least one conformer block")
        if self.code_dim != self.model_dim:
            raise ConfigError(f"code_dim {self.code_dim} must equal model_dim {self.model_dim} "
                              "(context and quantized vectors are compared by cosine)")
        if self.code_dim % self.codebook_groups:
            raise ConfigError("code_dim must be divisible by codebook_groups")
        if self.use_relative_attention:
            raise ConfigError("relative attention is not supported; positions are absolute sinusoids")

    @property
    def masked_stack_depth(self) -> int:
        if self.remove_contrastive_module:
            return self.n_contrastive_layers + self.n_masked_layers
        return self.n_masked_layers


def reduced_length(n: int) -> int:
    """Frames after the two stride-2 convolutions: ceil(ceil(n/2)/2)."""
    return -(-(-(-n // 2)) // 2)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / (10000.0 ** (i / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


# ------------------------------------------------------------------- encoder

class FeatureEncoder(Module):
    """Two 3x3 stride-(2,2) convolutions with swish, then a linear projection."""

    def __init__(self, n_mels: int, channels: int, model_dim: int, rng, dtype):
        c = channels
        self.conv1_w = param(rng.standard_normal((c, 1, 3, 3)) * math.sqrt(2.0 / 9), dtype)
        self.conv1_b = param(np.zeros(c), dtype)
        self.conv2_w = param(rng.standard_normal((c, c, 3, 3)) * math.sqrt(2.0 / (9 * c)), dtype)
        self.conv2_b = param(np.zeros(c), dtype)
        self.freq_out = reduced_length(n_mels)
        self.proj = Linear(c * self.freq_out, model_dim, rng, dtype)
        self.norm = LayerNorm(model_dim, dtype)

    def __call__(self, feats: Tensor, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
        B, T, F = feats.shape
        if T < 4:
            raise ValueError(f"feature encoder needs at least 4 frames, got {T}")
        x = ops.reshape(feats, (B, 1, T, F))
        l1 = -(-lengths // 2)
        x = ops.swish(ops.conv2d(x, self.conv1_w, self.conv1_b))
        x = ops.mul(x, _time_mask(l1, x.shape[2], x.dtype)[:, None, :, None])
        l2 = -(-l1 // 2)
        x = ops.swish(ops.conv2d(x, self.conv2_w, self.conv2_b))
        x = ops.mul(x, _time_mask(l2, x.shape[2], x.dtype)[:, None, :, None])
        _, C, T2, F2 = x.shape
        x = ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (B, T2, C * F2))
        return self.norm(self.proj(x)), l2


def _time_mask(lengths: np.ndarray, T: int, dtype) -> np.ndarray:
    return (np.arange(T)[None, :] < lengths[:, None]).astype(dtype)


# ----------------------------------------------------------------- conformer

class FeedForward(Module):
    def __init__(self, d: int, expansion: int, rng, dtype):
        self.norm = LayerNorm(d, dtype)
        self.up = Linear(d, d * expansion, rng, dtype)
        self.down = Linear(d * expansion, d, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ops.swish(self.up(self.norm(x))))


class SelfAttention(Module):
    def __init__(self, d: int, heads: int, rng, dtype):
        self.heads = heads
        self.norm = LayerNorm(d, dtype)
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d, d, rng, dtype)
        self.v = Linear(d, d, rng, dtype)
        self.o = Linear(d, d, rng, dtype)

    def __call__(self, x: Tensor, key_bias: np.ndarray) -> Tensor:
        B, T, d = x.shape
        H = self.heads
        dh = d // H
        h = self.norm(x)
        q = ops.transpose(ops.reshape(self.q(h), (B, T, H, dh)), (0, 2, 1, 3))
        k = ops.transpose(ops.reshape(self.k(h), (B, T, H, dh)), (0, 2, 3, 1))
        v = ops.transpose(ops.reshape(self.v(h), (B, T, H, dh)), (0, 2, 1, 3))
        scores = ops.add(ops.scale(ops.matmul(q, k), 1.0 / math.sqrt(dh)), key_bias)
        ctx = ops.matmul(ops.softmax(scores, axis=-1), v)
        return self.o(ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (B, T, d)))


class ConvModule(Module):
    """pointwise -> GLU -> depthwise -> layer norm -> swish -> pointwise."""

    def __init__(self, d: int, kernel: int, rng, dtype):
        self.norm = LayerNorm(d, dtype)
        self.pw_in = Linear(d, 2 * d, rng, dtype)
        self.dw_w = param(rng.uniform(-1, 1, (d, kernel)) / math.sqrt(kernel), dtype)
        self.dw_b = param(np.zeros(d), dtype)
        self.dw_norm = LayerNorm(d, dtype)
        self.pw_out = Linear(d, d, rng, dtype)

    def __call__(self, x: Tensor, frame_mask: np.ndarray) -> Tensor:
        h = ops.glu(self.pw_in(self.norm(x)), axis=-1)
        h = ops.mul(h, frame_mask)                 # padded frames must not leak through the kernel
        h = ops.depthwise_conv1d(h, self.dw_w, self.dw_b)
        return self.pw_out(ops.swish(self.dw_norm(h)))


class ConformerBlock(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        d = cfg.model_dim
        self.ff1 = FeedForward(d, cfg.ffn_expansion, rng, dtype)
        self.attn = SelfAttention(d, cfg.n_heads, rng, dtype)
        self.conv = ConvModule(d, cfg.conv_kernel, rng, dtype)
        self.ff2 = FeedForward(d, cfg.ffn_expansion, rng, dtype)
        self.out_norm = LayerNorm(d, dtype)

    def __call__(self, x: Tensor, key_bias: np.ndarray, frame_mask: np.ndarray) -> Tensor:
        x = ops.add(x, ops.scale(self.ff1(x), 0.5))
        x = ops.add(x, self.attn(x, key_bias))
        x = ops.add(x, self.conv(x, frame_mask))
        x = ops.add(x, ops.scale(self.ff2(x), 0.5))
        return self.out_norm(x)


def run_blocks(blocks: list[ConformerBlock], x: Tensor, valid: np.ndarray) -> Tensor:
    key_bias = np.where(valid, 0.0, NEG_INF).astype(x.dtype)[:, None, None, :]
    frame_mask = valid.astype(x.dtype)[:, :, None]
    for blk in blocks:
        x = blk(x, key_bias, frame_mask)
    return x


# -------------------------------------------------------------- full network

@dataclass
class Batch:
    features: np.ndarray      # (B, T, n_mels), zero beyond each length
    lengths: np.ndarray       # (B,) valid frames per utterance
    keys: list = field(default_factory=list)   # per-utterance RNG keys

    @classmethod
    def from_features(cls, feats: list[np.ndarray], keys=None, dtype=np.float32) -> "Batch":
        T = max(f.shape[0] for f in feats)
        F = feats[0].shape[1]
        out = np.zeros((len(feats), T, F), dtype=dtype)
        for i, f in enumerate(feats):
            out[i, : f.shape[0]] = f
        keys = list(keys) if keys is not None else [(0, 0, i) for i in range(len(feats))]
        return cls(out, np.array([f.shape[0] for f in feats], dtype=np.int64), keys)

    def __len__(self) -> int:
        return self.features.shape[0]


def derive_seed(key, purpose: str) -> int:
    """Independent 63-bit seed for one (utterance key, purpose) pair."""
    tag = int.from_bytes(purpose.encode(), "little")
    ss = np.random.SeedSequence([int(k) for k in key] + [tag])
    return int(ss.generate_state(2, dtype=np.uint32) @ np.array([1, 2 ** 31], dtype=np.uint64))


@dataclass
class ForwardOutput:
    latents: Tensor                      # (B, T', d) unmasked encoder output
    context_vectors_contrastive: Tensor | None
    context_vectors_final: Tensor
    mlm_logits: Tensor                   # (B, T', G*V)
    quantization: QuantizationResult
    masks: list[MaskSpec]
    valid: np.ndarray                    # (B, T') bool
    lengths: np.ndarray                  # (B,) post-encoder lengths


class W2VBert(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        d = cfg.model_dim
        self.encoder = FeatureEncoder(cfg.n_mels, cfg.encoder_channels, d, rng, dtype)
        self.quantizer = Codebook(d, cfg.codebook_groups, cfg.codebook_size, cfg.code_dim, rng, dtype)
        if not cfg.remove_contrastive_module:
            self.input_proj = Linear(d, d, rng, dtype)
            self.contrastive = [ConformerBlock(cfg, rng, dtype) for _ in range(cfg.n_contrastive_layers)]
        self.masked = [ConformerBlock(cfg, rng, dtype) for _ in range(cfg.masked_stack_depth)]
        self.head = Linear(d, cfg.codebook_groups * cfg.codebook_size, rng, dtype)

    # Separate entry points so each stage can be exercised on its own.
    def encode(self, features: Tensor, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
        return self.encoder(features, lengths)

    def contrastive_forward(self, masked_latents: Tensor, valid: np.ndarray) -> Tensor:
        if self.cfg.remove_contrastive_module:
            raise RuntimeError("model was built without a contrastive module")
        x = self.input_proj(masked_latents)
        if not self.contrastive:
            return x
        x = ops.add(x, sinusoidal_positions(x.shape[1], x.shape[2]).astype(x.dtype))
        return run_blocks(self.contrastive, x, valid)

    def masked_prediction_forward(self, c: Tensor, valid: np.ndarray) -> tuple[Tensor, Tensor]:
        final = run_blocks(self.masked, c, valid)
        return final, self.head(final)

    def __call__(self, batch: Batch, *, train: bool, temp: float = 1.0,
                 mask_cfg: MaskConfig | None = None, masks: list[MaskSpec] | None = None,
                 noise: np.ndarray | None = None, straight_through: bool = True,
                 target_latents: np.ndarray | None = None) -> ForwardOutput:
        return w2vbert_forward(self, batch, train=train, temp=temp, mask_cfg=mask_cfg, masks=masks,
                               noise=noise, straight_through=straight_through,
                               target_latents=target_latents)


def w2vbert_forward(model: W2VBert, batch: Batch, *, train: bool, temp: float = 1.0,
                    mask_cfg: MaskConfig | None = None, masks: list[MaskSpec] | None = None,
                    noise: np.ndarray | None = None, straight_through: bool = True,
                    target_latents: np.ndarray | None = None) -> ForwardOutput:
    """Encoder -> (quantizer on unmasked latents, masking -> contrastive -> masked prediction).

    Masks come from ``masks`` when given, else are sampled per utterance from
    ``mask_cfg`` (train mode) or left empty (eval mode without ``mask_cfg``).
    Gumbel noise comes from ``noise`` when given, else is drawn per utterance
    in train mode; eval mode never adds noise.
    """
    cfg = model.cfg
    mask_cfg = mask_cfg or MaskConfig()
    feats = Tensor(batch.features.astype(model.dtype, copy=False))
    latents, lengths = model.encode(feats, batch.lengths)
    B, T, d = latents.shape
    valid = np.arange(T)[None, :] < lengths[:, None]

    if masks is None:
        if train:
            masks = [sample_nonempty_mask(int(L), mask_cfg, derive_seed(k, "mask"))
                     for L, k in zip(lengths, batch.keys)]
        else:
            masks = [MaskSpec.empty(int(L)) for L in lengths]
    if len(masks) != B or any(m.n_frames != L for m, L in zip(masks, lengths)):
        raise ValueError("one mask per utterance, each covering its post-encoder length, is required")

    if train and noise is None:
        G, V = cfg.codebook_groups, cfg.codebook_size
        noise = np.zeros((B, T, G, V))
        for b, (L, k) in enumerate(zip(lengths, batch.keys)):
            noise[b, :L] = gumbel_noise((int(L), G, V), derive_seed(k, "gumbel"))
    quant = quantize(latents, model.quantizer, train=train, temp=temp, noise=noise,
                     valid=valid, straight_through=straight_through, target_latents=target_latents)

    masked = apply_mask_batch(latents, masks, mask_cfg, [derive_seed(k, "replace") for k in batch.keys])
    positions = sinusoidal_positions(T, d).astype(latents.dtype)
    if cfg.remove_contrastive_module:
        c = None
        x = ops.add(masked, positions)
    else:
        c = x = model.contrastive_forward(masked, valid)
        if not model.contrastive:
            x = ops.add(x, positions)      # positions then enter at the masked stack
    final, logits = model.masked_prediction_forward(x, valid)
    return ForwardOutput(latents, c, final, logits, quant, masks, valid, lengths)


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for a config (guards against architecture drift)."""
    d, e, k = cfg.model_dim, cfg.ffn_expansion, cfg.conv_kernel
    c, G, V = cfg.encoder_channels, cfg.codebook_groups, cfg.codebook_size
    enc = (9 * c + c) + (9 * c * c + c) + (c * reduced_length(cfg.n_mels) * d + d) + 2 * d
    quant = (d * G * V + G * V) + V * cfg.code_dim + (cfg.code_dim * cfg.code_dim + cfg.code_dim)
    ffn = 2 * d + (d * d * e + d * e) + (d * e * d + d)
    attn = 2 * d + 4 * (d * d + d)
    conv = 2 * d + (d * 2 * d + 2 * d) + (d * k + d) + 2 * d + (d * d + d)
    block = 2 * ffn + attn + conv + 2 * d
    n_blocks = cfg.n_contrastive_layers + cfg.n_masked_layers
    proj = 0 if cfg.remove_contrastive_module else d * d + d
    head = d * G * V + G * V
    return enc + quant + proj + n_blocks * block + head
