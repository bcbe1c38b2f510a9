"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

import numpy as np

from .config import Config
from .data import PAD, START


def check_images(images, cfg: Config) -> np.ndarray:
    """Return ``images`` as float32 ``(n, H, W, C)`` matching ``cfg``."""
    arr = np.asarray(images, dtype=np.float32)
    want = (cfg.image_size, cfg.image_size, cfg.channels)
    if arr.ndim != 4 or arr.shape[1:] != want:
        raise ValueError(f"expected images of shape (n, {', '.join(map(str, want))}), got {arr.shape}")
    if len(arr) == 0:
        raise ValueError("no images")
    if not np.isfinite(arr).all():
        raise ValueError("images contain non-finite values")
    return arr


def check_tokens(tokens, cfg: Config) -> np.ndarray:
    """Return token rows as int64 ``(n, max_text_len)``, right-padded with [PAD]."""
    rows = [np.asarray(r) for r in tokens] if not isinstance(tokens, np.ndarray) else list(tokens)
    if not rows:
        raise ValueError("no token rows")
    out = np.full((len(rows), cfg.max_text_len), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        if r.ndim != 1 or len(r) == 0:
            raise ValueError(f"token row {i} is not a non-empty 1-d sequence")
        if not np.issubdtype(r.dtype, np.integer):
            raise ValueError(f"token row {i} is not integer-valued")
        if len(r) > cfg.max_text_len:
            raise ValueError(f"token row {i} has {len(r)} tokens, more than max_text_len={cfg.max_text_len}")
        if r.min() < 0 or r.max() >= cfg.vocab_size:
            raise ValueError(f"token row {i} has ids outside [0, {cfg.vocab_size})")
        if r[0] != START:
            raise ValueError(f"token row {i} does not begin with [START]")
        out[i, :len(r)] = r
    return out


def check_pairs(images, tokens, cfg: Config) -> tuple[np.ndarray, np.ndarray]:
    imgs = check_images(images, cfg)
    toks = check_tokens(tokens, cfg)
    if len(imgs) != len(toks):
        raise ValueError(f"{len(imgs)} images but {len(toks)} captions")
    return imgs, toks
