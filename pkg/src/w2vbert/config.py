"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .losses import ContrastiveLossConfig
from .masking import MaskConfig
from .model import ModelConfig
from .quantizer import QuantizerConfig
from .tensor import LrSchedule


class ConfigKeyError(KeyError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # run
    seed: int = 0
    batch_size: int = 8
    total_steps: int = 2000
    log_every: int = 10
    checkpoint_every: int = 500
    dtype: str = "float32"
    # schedule
    peak_lr: float = 1e-3
    warmup_steps: int = 200
    # loss weights
    alpha: float = 0.1
    beta: float = 1.0
    gamma: float = 1.0
    # contrastive task
    n_distractors: int = 10
    contrastive_temperature: float = 0.1
    # masking
    mask_start_prob: float = 0.065
    mask_span: int = 10
    mask_replacement_std: float = 0.1
    # quantizer
    gumbel_temp_start: float = 2.0
    gumbel_temp_min: float = 0.5
    gumbel_temp_decay: float = 0.9999
    # model
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
    # synthetic corpus
    corpus_utts: int = 64
    corpus_seed: int = 0
    corpus_states: int = 16
    corpus_min_s: float = 0.8
    corpus_max_s: float = 1.6
    # held-out corpus for the linear probe
    probe_utts: int = 24
    probe_seed: int = 100000

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ValueError("log_every and checkpoint_every must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.model_config()

    def model_config(self) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(ModelConfig)}
        return ModelConfig(**{k: getattr(self, k) for k in names})

    def mask_config(self) -> MaskConfig:
        return MaskConfig(self.mask_start_prob, self.mask_span, self.mask_replacement_std)

    def loss_config(self) -> ContrastiveLossConfig:
        return ContrastiveLossConfig(self.n_distractors, self.contrastive_temperature)

    def quantizer_config(self) -> QuantizerConfig:
        return QuantizerConfig(self.gumbel_temp_start, self.gumbel_temp_min, self.gumbel_temp_decay)

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.peak_lr, self.warmup_steps)

    def replace(self, **changes) -> "TrainConfig":
        unknown = set(changes) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise ConfigKeyError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in dataclasses.fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def diff(self, other: "TrainConfig") -> dict[str, tuple]:
        return {f.name: (getattr(self, f.name), getattr(other, f.name))
                for f in dataclasses.fields(self) if getattr(self, f.name) != getattr(other, f.name)}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _convert(key: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def parse_assignments(lines, source: str = "<overrides>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    out = {}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, val = (s.strip() for s in text.split("=", 1))
        if key not in types:
            raise ConfigKeyError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = _convert(key, val, types[key])
    return out


def load_config(path=None, overrides=(), base: TrainConfig | None = None) -> TrainConfig:
    """File values over ``base`` (default toy config), then ``overrides`` over both."""
    cfg = base or TrainConfig()
    values = {}
    if path is not None:
        p = Path(path)
        values.update(parse_assignments(p.read_text(encoding="utf-8").splitlines(), str(p)))
    values.update(parse_assignments(overrides))
    return cfg.replace(**values)
