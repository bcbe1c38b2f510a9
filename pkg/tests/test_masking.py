import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maskvlm.config import Config, rng_stream
from maskvlm.data import END, MASK, PAD, START
from maskvlm.masking import (encoder_patch_mask, mask_image, mask_image_grid, mask_text, masked_count,
                             pixel_mask, plan_strategy)
from conftest import random_tokens


def half_even_oracle(tenths: int, n: int) -> int:
    # ratio = tenths/10 exactly; integer arithmetic only
    q, r = divmod(tenths * n, 10)
    if 2 * r > 10 or (2 * r == 10 and q % 2 == 1):
        q += 1
    return max(1, q)


def test_count_sweep_matches_integer_oracle():
    for n in range(1, 33):
        for tenths in range(1, 10):
            assert masked_count(tenths / 10, n) == half_even_oracle(tenths, n), (n, tenths)


def test_known_ties():
    assert masked_count(0.5, 5) == 2  # 2.5 -> 2
    assert masked_count(0.5, 7) == 4  # 3.5 -> 4
    assert masked_count(0.3, 5) == 2  # 1.5 -> 2
    assert masked_count(0.1, 1) == 1  # floor of one


def test_desk_default_image_mask():
    cfg = Config()
    grid = mask_image_grid(cfg.mask_grid, cfg.image_mask_ratio, rng_stream(0, "m"))
    assert grid.shape == (4, 4) and grid.sum() == 10


def test_desk_default_text_ratio():
    toks = np.array([START] + [10] * 20 + [END] + [PAD] * 4)
    _, plan = mask_text(toks, Config().text_mask_ratio, rng_stream(0, "m"))
    assert plan.text_mask.sum() == 6  # 30% of 20


def test_errors():
    with pytest.raises(ValueError):
        mask_text(np.array([10, 11, END]), 0.3, rng_stream(0, "m"))
    with pytest.raises(ValueError):
        mask_text(np.array([START, 10, END]), 1.0, rng_stream(0, "m"))
    with pytest.raises(ValueError):
        mask_text(np.array([START, END, PAD]), 0.3, rng_stream(0, "m"))
    with pytest.raises(ValueError):
        mask_image(np.zeros((30, 30, 3)), 8, 0.6, rng_stream(0, "m"))


def test_mask_image_leaves_pixels():
    img = np.random.default_rng(0).random((32, 32, 3))
    visible, plan = mask_image(img, 8, 0.6, rng_stream(0, "m"))
    assert (visible == ~plan.image_mask).all()


def test_patch_expansion():
    cfg = Config()
    grid = np.zeros((4, 4), dtype=bool)
    grid[0, 1] = True
    enc = encoder_patch_mask(grid, cfg).reshape(8, 8)
    assert enc.sum() == 4 and enc[0:2, 2:4].all()
    pix = pixel_mask(grid, cfg)
    assert pix.sum() == 64 and pix[0:8, 8:16].all()


def test_masking_deterministic_per_seed():
    toks = np.array([START] + list(range(5, 15)) + [END])
    a = mask_text(toks, 0.3, rng_stream(4, "mask"))[1].text_mask
    b = mask_text(toks, 0.3, rng_stream(4, "mask"))[1].text_mask
    assert (a == b).all()


def test_strategy_one_legs():
    cfg = Config()
    toks = random_tokens(np.random.default_rng(0), 4, cfg.max_text_len, cfg.vocab_size)
    legs = plan_strategy(cfg, rng_stream(0, "mask"), toks)
    names = [leg.name for leg in legs]
    assert names == ["mlm_leg", "mim_leg"]
    mlm, mim = legs
    assert mlm.image_mask is None and (mlm.text_tokens == MASK).any()
    assert mim.text_mask is None and not (mim.text_tokens == MASK).any() and mim.image_mask.any()


def test_strategy_both_single_leg():
    cfg = Config(masking_strategy="both")
    toks = random_tokens(np.random.default_rng(0), 4, cfg.max_text_len, cfg.vocab_size)
    (leg,) = plan_strategy(cfg, rng_stream(0, "mask"), toks)
    assert leg.mlm and leg.mim and leg.image_mask.any() and (leg.text_tokens == MASK).any()


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 30), st.integers(0, 5), st.sampled_from([i / 10 for i in range(1, 10)]), st.integers(0, 10**6))
def test_protected_tokens_never_masked(n_words, n_pad, ratio, seed):
    rng = np.random.default_rng(seed)
    toks = np.array([START] + list(rng.integers(5, 30, n_words)) + [END] + [PAD] * n_pad)
    masked, plan = mask_text(toks, ratio, rng_stream(seed, "mask"))
    assert plan.text_mask.sum() == masked_count(ratio, n_words)
    assert not plan.text_mask[np.isin(toks, [START, END, PAD])].any()
    assert (masked[plan.text_mask] == MASK).all()
    assert (masked[~plan.text_mask] == toks[~plan.text_mask]).all()
    assert (plan.masked_token_ids == toks[plan.text_mask]).all()
