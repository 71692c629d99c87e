"""Typed configuration objects and the flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

CACHE_ENV = "SQWHISPER_CACHE"


class ConfigError(ValueError):
    """Bad or unknown configuration key/value (CLI exit code 2)."""


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "sqwhisper"))


@dataclass(frozen=True)
class SpecialTokens:
    sot: int
    eot: int
    prev: int
    lang: int
    task: int

    def ids(self) -> tuple[int, ...]:
        return (self.sot, self.eot, self.prev, self.lang, self.task)


@dataclass
class ModelConfig:
    n_mels: int = 40
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 256
    n_enc_blocks: int = 2
    n_dec_blocks: int = 2
    vocab_size: int = 13
    max_target_len: int = 16
    special: SpecialTokens = field(default_factory=lambda: SpecialTokens(8, 9, 10, 11, 12))
    # target-speaker conditioning
    adapter: str = "none"
    d_embed: int = 32
    sqformer: bool = False
    n_queries: int = 4
    sq_blocks: int = 2
    sq_heads: int = 4
    d_q: int = 64
    sq_ffn: int = 256
    enc_prompt: bool = True
    dec_prompt: bool = True
    enc_prompt_keep: bool = True
    # fixed input normalisation applied before the conv block
    feat_mean: float = 0.0
    feat_std: float = 1.0
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        ids = self.special.ids()
        if len(set(ids)) != len(ids) or max(ids) >= self.vocab_size or min(ids) < 0:
            raise ConfigError(f"special token ids {ids} must be distinct and < vocab_size={self.vocab_size}")
        if self.adapter not in ("none", "add", "cat", "film", "cln"):
            raise ConfigError(f"unknown adapter {self.adapter!r}")
        if self.sqformer and self.d_q % self.sq_heads:
            raise ConfigError(f"d_q={self.d_q} not divisible by sq_heads={self.sq_heads}")
        if self.sqformer and self.n_queries < 1:
            raise ConfigError("need at least one query vector")

    @property
    def n_prompt(self) -> int:
        return self.n_queries if self.sqformer else 0

    @property
    def max_positions(self) -> int:
        return self.max_target_len + 5 + self.n_prompt

    @classmethod
    def for_vocab(cls, n_content: int, **kwargs) -> "ModelConfig":
        """Content tokens take ids 0..n-1; the five special tokens follow."""
        special = SpecialTokens(n_content, n_content + 1, n_content + 2, n_content + 3, n_content + 4)
        return cls(vocab_size=n_content + 5, special=special, **kwargs)

    @classmethod
    def whisper_medium(cls, **kwargs) -> "ModelConfig":
        """Reference dimensions of the multilingual medium model (parameter audits only)."""
        base = dict(n_mels=80, d_model=1024, n_heads=16, d_ffn=4096, n_enc_blocks=24,
                    n_dec_blocks=24, vocab_size=51865, max_target_len=448,
                    special=SpecialTokens(50258, 50257, 50361, 50259, 50359),
                    d_embed=256, n_queries=16, sq_blocks=2, sq_heads=12, d_q=768, sq_ffn=3072)
        base.update(kwargs)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["special"] = SpecialTokens(**d["special"])
        return cls(**d)


@dataclass
class ExperimentConfig:
    """Everything one reproducible run needs: corpus, model, loss, optimisation."""

    # corpus
    speakers: int = 4
    utts: int = 60
    vocab: int = 8
    min_tokens: int = 2
    max_tokens: int = 4
    condition: str = "clean"
    mode: str = "max"
    n_mels: int = 40
    mixtures: int = 0
    data_dir: str = ""
    # model
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 256
    enc_blocks: int = 2
    dec_blocks: int = 2
    adapter: str = "none"
    d_embed: int = 32
    sqformer: bool = True
    num_queries: int = 4
    sq_blocks: int = 2
    sq_heads: int = 4
    d_q: int = 64
    enc_prompt: bool = True
    dec_prompt: bool = True
    enc_prompt_keep: bool = True
    # loss
    alpha: float = 20.0
    kappa: float = 0.1
    negatives: int = 10
    # optimisation
    seed: int = 0
    epochs: int = 30
    batch_size: int = 16
    peak_lr: float = 3e-3
    warmup_steps: int = 60
    lr_decay: str = "inv-sqrt"
    clip_norm: float = 1.0
    average_best: int = 5
    select_by: str = "loss"
    peft: str = "none"
    lora_rank: int = 16
    init_checkpoint: str = ""
    dtype: str = "float32"
    checkpoint_dir: str = ""
    eval_mismatch: bool = True

    def __post_init__(self):
        checks = [
            (self.condition in ("clean", "noisy"), f"condition must be clean|noisy, got {self.condition!r}"),
            (self.mode in ("min", "max"), f"mode must be min|max, got {self.mode!r}"),
            (self.lr_decay in ("none", "inv-sqrt"), f"lr_decay must be none|inv-sqrt, got {self.lr_decay!r}"),
            (self.select_by in ("loss", "wer"), f"select_by must be loss|wer, got {self.select_by!r}"),
            (self.peft in ("none", "lora"), f"peft must be none|lora, got {self.peft!r}"),
            (self.warmup_steps >= 1, "warmup_steps must be >= 1"),
            (self.peak_lr > 0, "peak_lr must be positive"),
            (self.kappa > 0, "kappa must be positive"),
            (self.negatives >= 1, "negatives must be >= 1"),
            (self.alpha >= 0, "alpha must be >= 0"),
            (self.speakers >= 2, "need at least two speakers"),
            (1 <= self.min_tokens <= self.max_tokens, "need 1 <= min_tokens <= max_tokens"),
            (self.dtype in ("float32", "float64"), "dtype must be float32|float64"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def model_config(self, feat_mean: float = 0.0, feat_std: float = 1.0) -> ModelConfig:
        return ModelConfig.for_vocab(
            self.vocab, n_mels=self.n_mels, d_model=self.d_model, n_heads=self.n_heads,
            d_ffn=self.d_ffn, n_enc_blocks=self.enc_blocks, n_dec_blocks=self.dec_blocks,
            max_target_len=self.max_tokens + 2, adapter=self.adapter, d_embed=self.d_embed,
            sqformer=self.sqformer, n_queries=self.num_queries, sq_blocks=self.sq_blocks,
            sq_heads=self.sq_heads, d_q=self.d_q, sq_ffn=4 * self.d_q,
            enc_prompt=self.enc_prompt, dec_prompt=self.dec_prompt,
            enc_prompt_keep=self.enc_prompt_keep, feat_mean=feat_mean, feat_std=feat_std,
            dtype=self.dtype)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash of every setting that affects results (output locations excluded)."""
        d = self.to_dict()
        d.pop("checkpoint_dir")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def paper_preset(cls) -> "ExperimentConfig":
        """Optimisation values as reported for the full-scale runs (not desk-trainable)."""
        return cls(epochs=10, peak_lr=5e-5, warmup_steps=1500, average_best=5, alpha=20.0,
                   negatives=10, num_queries=16, sq_blocks=2, lora_rank=16)


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ.__name__}") from exc


def parse_overrides(pairs: dict[str, str], cls=ExperimentConfig, base=None):
    """Apply string-valued overrides to ``base`` (or the defaults), rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    values = {}
    for key, raw in pairs.items():
        name = key.strip().replace("-", "_")
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        values[name] = _coerce(name, raw, hints[name])
    if base is None:
        return cls(**values)
    return dataclasses.replace(base, **values)


def read_config_file(path: str | Path, cls=ExperimentConfig, base=None):
    """Read ``key = value`` lines; ``#`` starts a comment."""
    pairs = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return parse_overrides(pairs, cls, base)


def write_config_file(path: str | Path, cfg) -> None:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    Path(path).write_text("\n".join(lines) + "\n")
