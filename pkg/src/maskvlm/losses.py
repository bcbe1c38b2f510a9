"""Reconstruction and alignment objectives.

All functions take torch tensors and return scalar tensors so they can be
differentiated; they work in whatever precision the inputs carry.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .config import RngStream


def loss_mlm(logits: torch.Tensor, tokens: torch.Tensor, text_mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over masked positions only."""
    mask = torch.as_tensor(text_mask, dtype=torch.bool)
    if not bool(mask.any()):
        raise ValueError("no masked tokens")
    logp = torch.log_softmax(logits[mask], dim=-1)
    return -logp.gather(-1, tokens[mask].long()[:, None]).mean()


def loss_mim(pred: torch.Tensor, target: torch.Tensor, pixel_mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over hidden pixels; ``pixel_mask`` is (B, H, W), channels all count."""
    mask = torch.as_tensor(pixel_mask, dtype=torch.bool)
    if not bool(mask.any()):
        raise ValueError("no hidden pixels")
    diff = (pred[mask] - target[mask]).abs()
    return diff.sum() / diff.numel()


def itc_similarity(z_im: torch.Tensor, z_txt: torch.Tensor, temperature) -> torch.Tensor:
    return z_im @ z_txt.T / temperature


def loss_itc(z_im: torch.Tensor, z_txt: torch.Tensor, temperature) -> torch.Tensor:
    """Symmetric contrastive loss: row and column log-softmax of the diagonal, summed, averaged over pairs."""
    S = itc_similarity(z_im, z_txt, temperature)
    n = S.shape[0]
    diag = torch.arange(n)
    rows = torch.log_softmax(S, dim=1)[diag, diag]
    cols = torch.log_softmax(S, dim=0)[diag, diag]
    return -(rows + cols).sum() / n


def _negative_weights(row: np.ndarray, k: int, temperature: float) -> np.ndarray:
    logits = np.asarray(row, dtype=np.float64) / temperature
    logits[k] = -np.inf
    logits = logits - logits[np.isfinite(logits)].max()
    w = np.exp(logits)
    return w / w.sum()


def sample_hard_negatives(sim: np.ndarray, rng: RngStream, temperature: float) -> tuple[np.ndarray, np.ndarray]:
    """For each image a negative text, for each text a negative image.

    ``sim`` holds detached cosine similarities (images x texts). Negatives are
    drawn in proportion to ``softmax(sim / temperature)`` with the diagonal
    excluded.
    """
    sim = np.asarray(sim, dtype=np.float64)
    n = sim.shape[0]
    if n < 2:
        raise ValueError("hard negatives need a batch of at least 2")
    neg_text = np.array([rng.categorical(_negative_weights(sim[k], k, temperature)) for k in range(n)])
    neg_image = np.array([rng.categorical(_negative_weights(sim[:, k], k, temperature)) for k in range(n)])
    return neg_text, neg_image


def loss_itm(pos_logits: torch.Tensor, neg_logits: torch.Tensor) -> torch.Tensor:
    """Mean two-class cross-entropy; positives labelled 1, negatives 0."""
    logits = torch.cat([pos_logits, neg_logits], dim=0)
    labels = torch.cat([
        torch.ones(len(pos_logits), dtype=torch.long),
        torch.zeros(len(neg_logits), dtype=torch.long),
    ])
    return F.cross_entropy(logits, labels)


@dataclass
class LossBreakdown:
    """Per-batch losses; a component missing from the loss set stays ``None``."""

    mlm: Optional[torch.Tensor] = None
    mim: Optional[torch.Tensor] = None
    itc: Optional[torch.Tensor] = None
    itm: Optional[torch.Tensor] = None
    masked_token_count: int = 0
    masked_pixel_count: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def components(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in (("mlm", self.mlm), ("mim", self.mim), ("itc", self.itc), ("itm", self.itm))
                if v is not None}

    @property
    def total(self) -> torch.Tensor:
        parts = list(self.components.values())
        if not parts:
            raise ValueError("empty loss breakdown")
        total = parts[0]
        for p in parts[1:]:
            total = total + p
        return total

    def as_floats(self) -> dict:
        out = {k: float(v.detach()) for k, v in self.components.items()}
        out["total"] = float(self.total.detach())
        out["masked_token_count"] = self.masked_token_count
        out["masked_pixel_count"] = self.masked_pixel_count
        return out


def _as_tensor(x, dtype):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=dtype)


def total_loss(model, images, tokens, cfg=None, legs=None, negatives=None,
               mask_rng: Optional[RngStream] = None, neg_rng: Optional[RngStream] = None) -> LossBreakdown:
    """Run the forwards each loss needs and collect the breakdown.

    ITC and ITM use the unmasked pair. MLM and MIM use the masking legs from
    :func:`maskvlm.masking.plan_strategy`. Precomputed ``legs`` or
    ``negatives`` make the result a deterministic function of the parameters,
    which the gradient checker relies on.
    """
    from .data import MASK, PAD
    from .masking import encoder_patch_mask, pixel_mask, plan_strategy

    cfg = cfg or model.cfg
    dtype = next(model.parameters()).dtype
    imgs = _as_tensor(images, dtype).to(dtype)
    tok_np = np.asarray(tokens)
    tok = torch.as_tensor(tok_np, dtype=torch.long)
    pad = tok == PAD
    wanted = set(cfg.loss_set)
    out = LossBreakdown()
    cache = {}

    def v():
        if "v" not in cache:
            cache["v"] = model.encode_image(imgs)
        return cache["v"]

    def w():
        if "w" not in cache:
            cache["w"] = model.encode_text(tok)
        return cache["w"]

    if wanted & {"ITC", "ITM"}:
        z_im = model.project_itc(v()[:, 0], "image")
        z_txt = model.project_itc(w()[:, 0], "text")
        temp = model.temperature
        if "ITC" in wanted:
            out.itc = loss_itc(z_im, z_txt, temp)
        if "ITM" in wanted:
            B = len(tok)
            if negatives is None and B < 2:
                # a lone trailing sample has no in-batch negative
                negatives = (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
            if negatives is None:
                if neg_rng is None:
                    raise ValueError("ITM needs negatives or a negatives rng stream")
                sim = (z_im @ z_txt.T).detach().cpu().numpy()
                negatives = sample_hard_negatives(sim, neg_rng, float(temp.detach()))
            neg_text, neg_image = (torch.as_tensor(np.asarray(a, dtype=np.int64)) for a in negatives)
            out.extras["negatives"] = (neg_text.numpy().copy(), neg_image.numpy().copy())
            v_all = torch.cat([v(), v(), v()[neg_image]])
            w_all = torch.cat([w(), w()[neg_text], w()])
            pad_all = torch.cat([pad, pad[neg_text], pad])
            zi = model.cross_encode("image", v_all, w_all, kv_pad=pad_all)[:, 0]
            zt = model.cross_encode("text", w_all, v_all, query_pad=pad_all)[:, 0]
            logits = model.itm_logits(zi, zt)
            out.itm = loss_itm(logits[:B], logits[B:])

    need_mlm, need_mim = "MLM" in wanted, "MIM" in wanted
    if need_mlm or need_mim:
        if legs is None:
            if mask_rng is None:
                raise ValueError("masked modeling needs legs or a mask rng stream")
            legs = plan_strategy(cfg, mask_rng, tok_np, need_mlm, need_mim)
        audit = []
        for leg in legs:
            if leg.image_mask is not None:
                hidden = torch.as_tensor(encoder_patch_mask(leg.image_mask, cfg))
                v_leg = model.encode_image(imgs, hidden)
            else:
                v_leg = v()
            if leg.text_mask is not None:
                leg_tok = torch.as_tensor(np.asarray(leg.text_tokens), dtype=torch.long)
                w_leg = model.encode_text(leg_tok)
            else:
                leg_tok = tok
                w_leg = w()
            audit.append({"leg": leg.name, "image_masked": leg.image_mask is not None,
                          "mask_tokens_in_text": int((leg_tok == MASK).sum())})
            if leg.mlm:
                tmask = torch.as_tensor(leg.text_mask)
                xt = model.cross_encode("text", w_leg, v_leg, query_pad=pad)
                out.mlm = loss_mlm(model.classify_tokens(xt), tok, tmask)
                out.masked_token_count += int(tmask.sum())
            if leg.mim:
                pmask = torch.as_tensor(pixel_mask(leg.image_mask, cfg))
                xi = model.cross_encode("image", v_leg, w_leg, kv_pad=pad)
                pred = model.decode_image(xi, w_leg, text_pad=pad)
                out.mim = loss_mim(pred, imgs, pmask)
                out.masked_pixel_count += int(pmask.sum()) * cfg.channels
        out.extras["legs"] = audit
    missing = {n for n in wanted if getattr(out, n.lower()) is None}
    if missing:
        raise ValueError(f"loss set requires {sorted(missing)} but no forward produced it")
    return out
