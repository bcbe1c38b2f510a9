"""Network definition: uni-modal encoders, cross-modality encoders, decoders and heads.

Shapes use ``B`` for batch, ``N`` for encoder patches, ``L`` for text length
and ``D`` for model width. Image features carry the class token at index 0,
text features the ``[START]`` token.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import Config, RngStream, rng_stream
from .data import PAD

UNIMODAL_PREFIXES = (
    "patch_embed", "image_cls", "image_pos", "image_mask_embed", "image_blocks", "image_norm",
    "token_embed", "text_pos", "text_embed_norm", "text_blocks",
)
NO_DECAY_NAMES = ("image_cls", "image_mask_embed", "image_pos", "text_pos", "log_temperature")


class Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(dim, dim)
        # softmax is shift-invariant per query, so a key bias would never receive gradient
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, kv=None, key_pad=None, causal=False):
        kv = x if kv is None else kv
        B, Lq, D = x.shape
        Lk = kv.shape[1]
        h = self.n_heads
        q = self.q(x).view(B, Lq, h, D // h).transpose(1, 2)
        k = self.k(kv).view(B, Lk, h, D // h).transpose(1, 2)
        v = self.v(kv).view(B, Lk, h, D // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(D // h)
        if key_pad is not None:
            scores = scores.masked_fill(key_pad[:, None, None, :], float("-inf"))
        if causal:
            future = torch.ones(Lq, Lk, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        return self.out((attn @ v).transpose(1, 2).reshape(B, Lq, D))


class MLP(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class PreNormBlock(nn.Module):
    """Self-attention block with layer norm ahead of each sublayer (image encoder)."""

    def __init__(self, dim, n_heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim)

    def forward(self, x, key_pad=None):
        x = x + self.attn(self.norm1(x), key_pad=key_pad)
        return x + self.mlp(self.norm2(x))


class PostNormBlock(nn.Module):
    """Self-attention block with layer norm after each residual (text encoder)."""

    def __init__(self, dim, n_heads):
        super().__init__()
        self.attn = Attention(dim, n_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.mlp = MLP(dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, key_pad=None):
        x = self.norm1(x + self.attn(x, key_pad=key_pad))
        return self.norm2(x + self.mlp(x))


class CrossBlock(nn.Module):
    """Post-norm block: self-attention, cross-attention into the other modality, MLP."""

    def __init__(self, dim, n_heads):
        super().__init__()
        self.self_attn = Attention(dim, n_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, x, kv, x_pad=None, kv_pad=None, causal=False):
        x = self.norm1(x + self.self_attn(x, key_pad=x_pad, causal=causal))
        x = self.norm2(x + self.cross_attn(x, kv=kv, key_pad=kv_pad))
        return self.norm3(x + self.mlp(x))


def run_cross(blocks, x, kv, x_pad=None, kv_pad=None, causal=False):
    for blk in blocks:
        x = blk(x, kv, x_pad=x_pad, kv_pad=kv_pad, causal=causal)
    return x


def patchify(images: torch.Tensor, p: int) -> torch.Tensor:
    """(B, H, W, C) -> (B, N, p*p*C), patches row-major."""
    B, H, W, C = images.shape
    x = images.reshape(B, H // p, p, W // p, p, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (H // p) * (W // p), p * p * C)


def unpatchify(patches: torch.Tensor, p: int, channels: int = 3) -> torch.Tensor:
    B, N, _ = patches.shape
    g = int(round(math.sqrt(N)))
    x = patches.reshape(B, g, g, p, p, channels).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, g * p, g * p, channels)


class MaskVLMNet(nn.Module):
    def __init__(self, cfg: Config):
        super().__init__()
        self.cfg = cfg
        D, h = cfg.dim, cfg.n_heads
        N = cfg.n_patches
        self.patch_embed = nn.Linear(cfg.patch_dim, D)
        self.image_cls = nn.Parameter(torch.zeros(D))
        self.image_pos = nn.Parameter(torch.zeros(N + 1, D))
        self.image_mask_embed = nn.Parameter(torch.zeros(D))
        self.image_blocks = nn.ModuleList(PreNormBlock(D, h) for _ in range(cfg.n_enc_blocks))
        self.image_norm = nn.LayerNorm(D)

        self.token_embed = nn.Embedding(cfg.vocab_size, D)
        self.text_pos = nn.Parameter(torch.zeros(cfg.max_text_len, D))
        self.text_embed_norm = nn.LayerNorm(D)
        self.text_blocks = nn.ModuleList(PostNormBlock(D, h) for _ in range(cfg.n_enc_blocks))

        self.image_cross = nn.ModuleList(CrossBlock(D, h) for _ in range(cfg.n_cross_blocks))
        self.text_cross = nn.ModuleList(CrossBlock(D, h) for _ in range(cfg.n_cross_blocks))
        self.image_decoder = nn.ModuleList(CrossBlock(D, h) for _ in range(cfg.n_cross_blocks))
        self.decoder_pred = nn.Linear(D, cfg.patch_dim)
        self.token_classifier = nn.Linear(D, cfg.vocab_size)

        self.itc_image = nn.Linear(D, cfg.proj_dim)
        self.itc_text = nn.Linear(D, cfg.proj_dim)
        self.itm_head = nn.Linear(D, 2)
        self.log_temperature = nn.Parameter(torch.tensor(math.log(cfg.temperature)),
                                            requires_grad=cfg.learn_temperature)

    # --- uni-modal encoders -------------------------------------------------
    def encode_image(self, images: torch.Tensor, hidden: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Features ``(B, N+1, D)``; ``hidden`` is a (B, N) bool mask of encoder patches to substitute."""
        p = self.cfg.encoder_patch
        if images.shape[1:] != (self.cfg.image_size, self.cfg.image_size, self.cfg.channels):
            raise ValueError(f"image shape {tuple(images.shape[1:])} does not match config")
        x = self.patch_embed(patchify(images, p))
        if hidden is not None:
            x = torch.where(hidden[..., None], self.image_mask_embed.expand_as(x), x)
        cls = self.image_cls.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.image_pos
        for blk in self.image_blocks:
            x = blk(x)
        return self.image_norm(x)

    def encode_text(self, tokens: torch.Tensor) -> torch.Tensor:
        B, L = tokens.shape
        if L > self.cfg.max_text_len:
            raise ValueError("token sequence longer than max_text_len")
        if tokens.numel() and (int(tokens.max()) >= self.cfg.vocab_size or int(tokens.min()) < 0):
            raise ValueError("token id outside vocabulary")
        pad = tokens == PAD
        x = self.text_embed_norm(self.token_embed(tokens) + self.text_pos[:L])
        for blk in self.text_blocks:
            x = blk(x, key_pad=pad)
        return x

    # --- cross-modality ----------------------------------------------------
    def cross_encode(self, side: str, queries, keys_values, query_pad=None, kv_pad=None):
        if queries.shape[-1] != keys_values.shape[-1]:
            raise ValueError("feature widths differ")
        blocks = self.image_cross if side == "image" else self.text_cross
        return run_cross(blocks, queries, keys_values, x_pad=query_pad, kv_pad=kv_pad)

    def decode_image(self, image_cross: torch.Tensor, text_features: torch.Tensor, text_pad=None) -> torch.Tensor:
        """Predicted pixels ``(B, H, W, C)`` for every position; the loss selects the hidden ones."""
        x = run_cross(self.image_decoder, image_cross, text_features, kv_pad=text_pad)
        patches = self.decoder_pred(x[:, 1:])
        return unpatchify(patches, self.cfg.encoder_patch, self.cfg.channels)

    def classify_tokens(self, text_cross: torch.Tensor) -> torch.Tensor:
        return self.token_classifier(text_cross)

    # --- alignment heads ---------------------------------------------------
    def project_itc(self, features: torch.Tensor, side: str) -> torch.Tensor:
        proj = (self.itc_image if side == "image" else self.itc_text)(features)
        norm = proj.norm(dim=-1, keepdim=True)
        if bool((norm == 0).any()):
            raise ValueError("zero vector cannot be normalized")
        return proj / norm

    def itm_logits(self, z_im_cross: torch.Tensor, z_txt_cross: torch.Tensor) -> torch.Tensor:
        return self.itm_head(z_im_cross * z_txt_cross)

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temperature.exp()


def param_group(name: str) -> str:
    return "unimodal_encoders" if name.startswith(UNIMODAL_PREFIXES) else "cross_and_heads"


def decays(name: str) -> bool:
    if name.endswith(".bias") or name in NO_DECAY_NAMES:
        return False
    leaf = name.split(".")[-2] if "." in name else name
    return "norm" not in leaf


def truncated_normal(rng: RngStream, shape, std: float = 0.02) -> np.ndarray:
    out = rng.normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(model: nn.Module, rng: RngStream) -> nn.Module:
    """Fill every array deterministically from ``rng`` in parameter-name order."""
    norm_modules = {n for n, m in model.named_modules() if isinstance(m, nn.LayerNorm)}
    with torch.no_grad():
        for name, p in model.named_parameters():
            owner = name.rsplit(".", 1)[0] if "." in name else ""
            if name == "log_temperature":
                continue
            if owner in norm_modules:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith(".bias"):
                p.zero_()
            else:
                p.copy_(torch.from_numpy(truncated_normal(rng, tuple(p.shape))).to(p.dtype))
    return model


def build_model(cfg: Config, seed: Optional[int] = None) -> MaskVLMNet:
    model = MaskVLMNet(cfg)
    init_params(model, rng_stream(cfg.seed if seed is None else seed, "init"))
    return model


def param_shapes(cfg: Config) -> dict[str, tuple]:
    return {n: tuple(p.shape) for n, p in MaskVLMNet(cfg).named_parameters()}


def interpolate_positions(image_pos, old_grid: int, new_grid: int):
    """Resample a ``(1 + old_grid**2, D)`` positional table to ``new_grid``.

    The class row is copied; the grid rows are bilinearly resampled with
    corner alignment.
    """
    if new_grid < 1:
        raise ValueError("new_grid must be >= 1")
    table = torch.as_tensor(image_pos)
    if table.shape[0] != 1 + old_grid * old_grid:
        raise ValueError("table rows do not match old_grid")
    if old_grid == new_grid:
        return table.clone()
    cls, grid = table[:1], table[1:]
    D = grid.shape[1]
    img = grid.reshape(old_grid, old_grid, D).permute(2, 0, 1)[None]
    out = F.interpolate(img, size=(new_grid, new_grid), mode="bilinear", align_corners=True)
    return torch.cat([cls, out[0].permute(1, 2, 0).reshape(new_grid * new_grid, D)], dim=0)


def resize_model(model: MaskVLMNet, image_size: int) -> MaskVLMNet:
    """Copy of ``model`` for a new image size with interpolated image positions."""
    cfg = model.cfg.replace(image_size=image_size)
    new = MaskVLMNet(cfg).to(next(model.parameters()).dtype)
    state = {k: v for k, v in model.state_dict().items() if k != "image_pos"}
    old_g = model.cfg.image_size // model.cfg.encoder_patch
    new_g = image_size // model.cfg.encoder_patch
    state["image_pos"] = interpolate_positions(model.image_pos.detach(), old_g, new_g)
    new.load_state_dict(state)
    return new
