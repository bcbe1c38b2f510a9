"""Run configuration, validation and labeled random streams.

The on-disk format is flat ``key value`` lines with ``#`` comments. Every key
maps to a :class:`Config` field; omitted keys keep their defaults.
"""
from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

LOSS_NAMES = ("ITC", "ITM", "MLM", "MIM")
STRATEGIES = ("one", "both")


class ConfigError(ValueError):
    """Raised for unparseable config text or invalid field values."""


@dataclass(frozen=True)
class Config:
    # geometry
    image_size: int = 32
    encoder_patch: int = 4
    mask_patch: int = 8
    channels: int = 3
    grid: int = 2
    # text
    vocab_size: int = 30
    max_text_len: int = 36
    # network
    dim: int = 64
    n_heads: int = 4
    n_enc_blocks: int = 4
    n_cross_blocks: int = 3
    proj_dim: int = 32
    # masking
    image_mask_ratio: float = 0.6
    text_mask_ratio: float = 0.3
    masking_strategy: str = "one"
    # alignment
    temperature: float = 0.07
    learn_temperature: bool = False
    k_candidates: int = 16
    # optimisation
    batch_size: int = 32
    epochs: int = 30
    warmup_epochs: int = 5
    lr_peak: float = 3e-4
    lr_floor: float = 3e-5
    # encoders start from random init, so they train at the cross-modality peak rate
    lr_unimodal: float = 3e-4
    weight_decay: float = 0.05
    seed: int = 0
    loss_set: tuple[str, ...] = LOSS_NAMES
    vqa_answer_weighting: bool = False

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.encoder_patch) ** 2

    @property
    def mask_grid(self) -> int:
        return self.image_size // self.mask_patch

    @property
    def patch_dim(self) -> int:
        return self.encoder_patch ** 2 * self.channels

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss_set"] = list(self.loss_set)
        return d


def _field_types() -> dict[str, type]:
    hints = {"int": int, "float": float, "str": str, "bool": bool}
    out = {}
    for f in fields(Config):
        t = f.type if isinstance(f.type, str) else f.type.__name__
        out[f.name] = hints.get(t, tuple)
    return out


_TYPES = _field_types()


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_loss_set(text: str | Iterable[str]) -> tuple[str, ...]:
    parts = text.replace("+", ",").split(",") if isinstance(text, str) else list(text)
    names = {p.strip().upper() for p in parts if p.strip()}
    unknown = names - set(LOSS_NAMES)
    if unknown:
        raise ConfigError(f"unknown loss name(s): {sorted(unknown)}")
    # canonical order, so equal sets compare and serialize equal
    return tuple(n for n in LOSS_NAMES if n in names)


def parse_value(key: str, text: str):
    """Convert the textual value of ``key`` to its field type."""
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    try:
        if kind is bool:
            return _parse_bool(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return parse_loss_set(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from None


def parse_config(text: str, base: Config | None = None) -> Config:
    """Parse ``key = value`` lines (``#`` starts a comment); unknown keys are errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [t.strip() for t in line.split("=", 1)] if "=" in line else line.split(None, 1)
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = parts[0], parts[1].strip()
        try:
            values[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return (base or Config()).replace(**values)


def load_config(path: str | Path) -> Config:
    return parse_config(Path(path).read_text())


def apply_overrides(cfg: Config, pairs: Sequence[str]) -> Config:
    """Apply ``key=value`` overrides as given on the command line."""
    values = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        values[key.strip()] = parse_value(key.strip(), value.strip())
    return cfg.replace(**values)


def dump_config(cfg: Config) -> str:
    lines = []
    for f in fields(Config):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def validate(cfg: Config) -> list[str]:
    """Return every violated invariant; an empty list means the config is usable."""
    problems = []
    if cfg.mask_patch <= 0 or cfg.encoder_patch <= 0 or cfg.image_size <= 0:
        problems.append("sizes must be positive")
    else:
        if cfg.image_size % cfg.mask_patch:
            problems.append(
                f"divisibility: image_size {cfg.image_size} not divisible by mask_patch {cfg.mask_patch}")
        if cfg.mask_patch % cfg.encoder_patch:
            problems.append(
                f"divisibility: mask_patch {cfg.mask_patch} not divisible by encoder_patch {cfg.encoder_patch}")
        if cfg.grid < 1 or cfg.image_size % cfg.grid:
            problems.append(f"divisibility: image_size {cfg.image_size} not divisible by grid {cfg.grid}")
    if cfg.n_enc_blocks < 1:
        problems.append("n_enc_blocks >= 1")
    if cfg.n_cross_blocks < 1:
        problems.append("n_cross_blocks >= 1")
    if cfg.n_heads < 1 or cfg.dim % cfg.n_heads:
        problems.append(f"dim {cfg.dim} divisible by n_heads {cfg.n_heads}")
    if not 0 < cfg.image_mask_ratio < 1:
        problems.append("0 < image_mask_ratio < 1")
    if not 0 < cfg.text_mask_ratio < 1:
        problems.append("0 < text_mask_ratio < 1")
    if not cfg.temperature > 0:
        problems.append("temperature > 0")
    if cfg.masking_strategy not in STRATEGIES:
        problems.append(f"masking_strategy one of {STRATEGIES}")
    if not cfg.loss_set:
        problems.append("loss_set nonempty")
    elif set(cfg.loss_set) - set(LOSS_NAMES):
        problems.append(f"loss_set subset of {LOSS_NAMES}")
    if cfg.channels != 3:
        problems.append("channels == 3")
    if cfg.vocab_size < 6:
        problems.append("vocab_size covers the five specials plus content")
    if cfg.max_text_len < 3:
        problems.append("max_text_len >= 3")
    if cfg.proj_dim < 1:
        problems.append("proj_dim >= 1")
    if cfg.batch_size < 1:
        problems.append("batch_size >= 1")
    if cfg.epochs < 1:
        problems.append("epochs >= 1")
    if not 0 <= cfg.warmup_epochs <= cfg.epochs:
        problems.append("0 <= warmup_epochs <= epochs")
    if cfg.k_candidates < 0:
        problems.append("k_candidates >= 0")
    if min(cfg.lr_peak, cfg.lr_floor, cfg.lr_unimodal) < 0 or cfg.lr_floor > cfg.lr_peak:
        problems.append("0 <= lr_floor <= lr_peak and lr_unimodal >= 0")
    if cfg.weight_decay < 0:
        problems.append("weight_decay >= 0")
    return problems


def check_config(cfg: Config) -> Config:
    problems = validate(cfg)
    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems))
    return cfg


@dataclass
class RngStream:
    """Deterministic random stream keyed by ``(seed, label)``.

    Backed by numpy's PCG64 seeded through ``SeedSequence([seed, crc32(label)])``.
    Both constants are fixed here and nowhere else.
    """

    seed: int
    label: str
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(self.label.encode("utf-8"))]
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def random(self, size=None):
        return self.generator.random(size)

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, n: int, size=None, replace=True):
        return self.generator.choice(n, size=size, replace=replace)

    def categorical(self, weights) -> int:
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or len(w) == 0 or np.any(w < 0) or not np.isfinite(w).all() or w.sum() <= 0:
            raise ValueError("categorical weights must be finite, nonnegative, nonzero")
        return int(self.generator.choice(len(w), p=w / w.sum()))

    def child(self, suffix: str) -> "RngStream":
        return RngStream(self.seed, f"{self.label}/{suffix}")


def rng_stream(seed: int, label: str) -> RngStream:
    return RngStream(seed, label)
