import numpy as np
import pytest
import torch

from maskvlm.config import Config
from maskvlm.data import build_corpus


def tiny_config(**kw) -> Config:
    base = dict(image_size=16, encoder_patch=4, mask_patch=8, dim=16, n_heads=2, n_enc_blocks=1, n_cross_blocks=1,
                proj_dim=8, batch_size=8, epochs=2, warmup_epochs=1, k_candidates=4)
    base.update(kw)
    return Config(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_corpus():
    return build_corpus(48, 0, cfg=tiny_config())


@pytest.fixture(autouse=True)
def _float32():
    torch.set_default_dtype(torch.float32)
    yield


def random_tokens(rng, B, L, vocab, lengths=None):
    from maskvlm.data import END, START
    toks = np.zeros((B, L), dtype=np.int64)
    for b in range(B):
        n = lengths[b] if lengths is not None else int(rng.integers(1, L - 1))
        toks[b, 0] = START
        toks[b, 1:1 + n] = rng.integers(5, vocab, size=n)
        toks[b, 1 + n] = END
    return toks
