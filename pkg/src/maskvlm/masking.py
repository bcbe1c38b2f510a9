"""Text and image mask plans.

Text tokens are replaced by ``[MASK]`` only (no random or kept tokens).
Images are masked in whole masking patches, each covering a square group of
encoder patches.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .config import Config, RngStream
from .data import END, MASK, PAD, START

PROTECTED = (PAD, START, END)


def masked_count(ratio: float, n: int) -> int:
    """``max(1, round_half_even(ratio * n))`` evaluated on the decimal value of ``ratio``."""
    # Fraction(str(...)) keeps 0.3 * 5 == 3/2 exactly, so ties round to even as intended
    return max(1, round(Fraction(str(ratio)) * n))


@dataclass
class MaskPlan:
    text_mask: Optional[np.ndarray] = None  # (L,) bool
    image_mask: Optional[np.ndarray] = None  # (G, G) bool over masking patches
    masked_token_ids: Optional[np.ndarray] = None
    strategy_leg: str = "both"

    def to_dict(self) -> dict:
        d = {"strategy_leg": self.strategy_leg}
        if self.text_mask is not None:
            d["text_positions"] = np.flatnonzero(self.text_mask).tolist()
            d["masked_token_ids"] = [int(t) for t in self.masked_token_ids]
        if self.image_mask is not None:
            d["image_patches"] = np.argwhere(self.image_mask).tolist()
        return d


def maskable_positions(tokens: np.ndarray) -> np.ndarray:
    return np.flatnonzero(~np.isin(tokens, PROTECTED))


def mask_text(tokens: np.ndarray, ratio: float, rng: RngStream) -> tuple[np.ndarray, MaskPlan]:
    tokens = np.asarray(tokens)
    if len(tokens) == 0 or tokens[0] != START:
        raise ValueError("token sequence must begin with [START]")
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    candidates = maskable_positions(tokens)
    if len(candidates) == 0:
        raise ValueError("no maskable tokens")
    k = masked_count(ratio, len(candidates))
    chosen = np.sort(rng.permutation(len(candidates))[:k])
    positions = candidates[chosen]
    mask = np.zeros(len(tokens), dtype=bool)
    mask[positions] = True
    masked = tokens.copy()
    masked[mask] = MASK
    return masked, MaskPlan(text_mask=mask, masked_token_ids=tokens[mask].copy(), strategy_leg="mlm_leg")


def mask_image_grid(grid: int, ratio: float, rng: RngStream) -> np.ndarray:
    total = grid * grid
    k = masked_count(ratio, total)
    hidden = np.zeros(total, dtype=bool)
    hidden[rng.permutation(total)[:k]] = True
    return hidden.reshape(grid, grid)


def mask_image(image: np.ndarray, mask_patch: int, ratio: float, rng: RngStream) -> tuple[np.ndarray, MaskPlan]:
    """Return the visibility grid (True = visible) and the plan (True = hidden).

    The image itself is not altered; hidden encoder patches are substituted by
    the mask embedding inside the image encoder.
    """
    size = image.shape[0]
    if size % mask_patch:
        raise ValueError("image size not divisible by mask_patch")
    hidden = mask_image_grid(size // mask_patch, ratio, rng)
    return ~hidden, MaskPlan(image_mask=hidden, strategy_leg="mim_leg")


def encoder_patch_mask(image_mask: np.ndarray, cfg: Config) -> np.ndarray:
    """Expand a (..., G, G) masking-patch grid to a (..., N) encoder-patch mask."""
    k = cfg.mask_patch // cfg.encoder_patch
    expanded = np.repeat(np.repeat(image_mask, k, axis=-2), k, axis=-1)
    return expanded.reshape(*image_mask.shape[:-2], -1)


def pixel_mask(image_mask: np.ndarray, cfg: Config) -> np.ndarray:
    """Expand a (..., G, G) masking-patch grid to (..., H, W)."""
    k = cfg.mask_patch
    return np.repeat(np.repeat(image_mask, k, axis=-2), k, axis=-1)


@dataclass
class Leg:
    """One forward configuration for masked modeling.

    ``text_mask``/``image_mask`` describe what the encoders see; ``mlm``/``mim``
    say which reconstruction losses this leg feeds.
    """

    name: str  # "mlm_leg", "mim_leg" or "both"
    text_tokens: np.ndarray  # (B, L) tokens fed to the text encoder
    text_mask: Optional[np.ndarray]  # (B, L) bool or None
    image_mask: Optional[np.ndarray]  # (B, G, G) bool hidden, or None
    mlm: bool = False
    mim: bool = False
    plans: list = field(default_factory=list)


def plan_strategy(cfg: Config, rng: RngStream, tokens: np.ndarray, need_mlm: bool = True,
                  need_mim: bool = True) -> list[Leg]:
    """Build the masked-modeling legs for a batch of token rows.

    Strategy ``one`` gives an ``(I, T_m)`` leg for MLM and an ``(I_m, T)`` leg
    for MIM. Strategy ``both`` gives a single ``(I_m, T_m)`` leg feeding
    whichever of the two losses is requested.
    """
    tokens = np.atleast_2d(tokens)
    if not (need_mlm or need_mim):
        return []
    joint = cfg.masking_strategy == "both"
    B = tokens.shape[0]
    text_masked = text_mask = image_mask = None
    text_plans = []
    if need_mlm or joint:
        rows, masks = [], []
        for b in range(B):
            m, plan = mask_text(tokens[b], cfg.text_mask_ratio, rng)
            rows.append(m)
            masks.append(plan.text_mask)
            text_plans.append(plan)
        text_masked, text_mask = np.stack(rows), np.stack(masks)
    if need_mim or joint:
        image_mask = np.stack([mask_image_grid(cfg.mask_grid, cfg.image_mask_ratio, rng) for _ in range(B)])
    if joint:
        plans = [MaskPlan(text_mask=text_mask[b], masked_token_ids=text_plans[b].masked_token_ids,
                          image_mask=image_mask[b], strategy_leg="both") for b in range(B)]
        return [Leg("both", text_masked, text_mask, image_mask, need_mlm, need_mim, plans)]
    legs = []
    if need_mlm:
        legs.append(Leg("mlm_leg", text_masked, text_mask, None, True, False, text_plans))
    if need_mim:
        plans = [MaskPlan(image_mask=m, strategy_leg="mim_leg") for m in image_mask]
        legs.append(Leg("mim_leg", tokens.copy(), None, image_mask, False, True, plans))
    return legs
