"""AdamW with per-group learning rates, the warmup-cosine schedule, and a gradient checker."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from .config import Config, RngStream, rng_stream
from .model import decays, param_group

BETAS = (0.9, 0.999)
EPS = 1e-8


class NonFiniteGradient(FloatingPointError):
    pass


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    # the incomplete final batch is kept
    return -(-n_train // batch_size)


def schedule_lr(step: int, cfg: Config, steps_per_epoch: int) -> tuple[float, float]:
    """Learning rates ``(lr_cross, lr_unimodal)`` in effect at ``step``.

    Step 0 is the start of training; the update that completes step ``s`` uses
    ``schedule_lr(s)``, so the first update is already warmed by one step and
    the last lands exactly on ``lr_floor``.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    step = min(step, total)
    if warmup and step < warmup:
        lr = cfg.lr_peak * step / warmup
    elif total == warmup:
        lr = cfg.lr_peak if step < total else cfg.lr_floor
    else:
        progress = (step - warmup) / (total - warmup)
        lr = cfg.lr_floor + 0.5 * (cfg.lr_peak - cfg.lr_floor) * (1 + math.cos(math.pi * progress))
    return lr, cfg.lr_unimodal


@dataclass
class OptimState:
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, t in self.exp_avg.items():
            out[f"exp_avg/{name}"] = t.detach().cpu().numpy()
        for name, t in self.exp_avg_sq.items():
            out[f"exp_avg_sq/{name}"] = t.detach().cpu().numpy()
        return out

    @classmethod
    def from_arrays(cls, step: int, arrays: dict[str, np.ndarray]) -> "OptimState":
        st = cls(step=step)
        for key, arr in arrays.items():
            kind, name = key.split("/", 1)
            getattr(st, kind)[name] = torch.from_numpy(np.array(arr))
        return st


class AdamW:
    """Decoupled-weight-decay Adam over named parameters.

    ``lrs`` maps group name to learning rate; ``group_of`` maps a parameter name
    to its group. Parameters without a gradient are left untouched, decay
    included.
    """

    def __init__(self, named_params, weight_decay: float = 0.05, group_of: Callable[[str], str] = param_group,
                 decay_rule: Callable[[str], bool] = decays, betas=BETAS, eps=EPS,
                 state: Optional[OptimState] = None):
        self.params = dict(named_params)
        self.weight_decay = weight_decay
        self.group_of = group_of
        self.decay_rule = decay_rule
        self.betas = betas
        self.eps = eps
        self.state = state or OptimState()
        self.state.groups = {n: group_of(n) for n in self.params}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self, lrs: dict[str, float]):
        for name, p in self.params.items():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
        self.state.step += 1
        t = self.state.step
        b1, b2 = self.betas
        for name, p in self.params.items():
            if p.grad is None or not p.requires_grad:
                continue
            lr = lrs[self.group_of(name)]
            g = p.grad
            m = self.state.exp_avg.get(name)
            if m is None:
                m = self.state.exp_avg[name] = torch.zeros_like(p)
                self.state.exp_avg_sq[name] = torch.zeros_like(p)
            v = self.state.exp_avg_sq[name]
            if self.decay_rule(name) and self.weight_decay:
                p.mul_(1 - lr * self.weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + self.eps))


def adamw_step(model: nn.Module, opt: AdamW, lr_cross: float, lr_unimodal: float):
    opt.step({"cross_and_heads": lr_cross, "unimodal_encoders": lr_unimodal})


# --- gradient checking --------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: Optional[float]  # None: the loss does not reach this array
    coords_checked: int = 0

    @property
    def status(self) -> str:
        return "no gradient" if self.max_rel_error is None else f"{self.max_rel_error:.3e}"


# Central differences at h=1e-5 in float64 resolve gradients to about 1e-10
# absolute. Below |g| = FD_FLOOR the relative error is taken against the floor,
# i.e. the comparison becomes absolute at FD_FLOOR * tolerance.
FD_FLOOR = 1e-3


def relative_error(analytic: float, numeric: float, floor: float = FD_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check_point(model: nn.Module, rng: RngStream) -> nn.Module:
    """Move ``model`` to a well-conditioned point for gradient checking.

    At the training init most attention gradients sit near 1e-8, below what
    finite differences can resolve. Weights get std ``1/sqrt(fan_in)``, vectors
    std 0.5 and norm scales ``1 + N(0, 0.5)``.
    """
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name == "log_temperature":
                continue
            std = 1 / math.sqrt(p.shape[1]) if p.dim() == 2 and not name.endswith("_pos") else 0.5
            draw = torch.from_numpy(rng.normal(tuple(p.shape)) * std).to(p.dtype)
            if "norm" in name and name.endswith("weight"):
                draw += 1.0
            p.copy_(draw)
    return model


def grad_check(model: nn.Module, loss_fn: Callable[[], torch.Tensor], rng: Optional[RngStream] = None,
               coords_per_array: int = 8, h: float = 1e-5) -> list[GradCheckEntry]:
    """Compare autograd gradients with central differences on sampled coordinates.

    ``loss_fn`` must be a deterministic function of the parameters (fixed masks
    and negatives). The model should be in float64.
    """
    rng = rng or rng_stream(0, "gradcheck")
    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    report = []
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = {n: (None if p.grad is None else p.grad.detach().clone()) for n, p in params}
    for name, p in params:
        g = grads[name]
        if g is None:
            report.append(GradCheckEntry(name, None))
            continue
        flat = p.data.view(-1)
        gflat = g.view(-1)
        n = flat.numel()
        idx = rng.choice(n, size=min(coords_per_array, n), replace=False)
        worst = 0.0
        for i in idx:
            i = int(i)
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
            numeric = (up - down) / (2 * h)
            worst = max(worst, relative_error(gflat[i].item(), numeric))
        report.append(GradCheckEntry(name, worst, len(idx)))
    model.zero_grad(set_to_none=True)
    return report


GRAD_CHECK_LOSS_SETS = (("ITC",), ("ITM",), ("MLM",), ("MIM",), ("ITC", "ITM", "MLM", "MIM"))


def grad_check_config(**overrides) -> Config:
    """The small configuration the gradient suite runs on (learned temperature so it is checked too)."""
    base = dict(image_size=8, encoder_patch=2, mask_patch=4, dim=16, n_heads=2, n_enc_blocks=2, n_cross_blocks=2,
                vocab_size=12, max_text_len=8, proj_dim=8, batch_size=4, learn_temperature=True)
    base.update(overrides)
    return Config(**base)


def grad_check_batch(cfg: Config, seed: int = 0):
    """Random images and token rows ``[START] w... [END] [PAD]...`` of varied length."""
    from .data import END, START
    rng = rng_stream(seed, "gradcheck/data")
    B, L = cfg.batch_size, cfg.max_text_len
    images = rng.random((B, cfg.image_size, cfg.image_size, cfg.channels))
    tokens = np.zeros((B, L), dtype=np.int64)
    for b in range(B):
        n = 1 + b % (L - 2)
        tokens[b, 0] = START
        tokens[b, 1:1 + n] = rng.integers(5, cfg.vocab_size, size=n)
        tokens[b, 1 + n] = END
    return images, tokens


def grad_check_suite(cfg: Optional[Config] = None, loss_sets=GRAD_CHECK_LOSS_SETS, seed: int = 0,
                     coords_per_array: int = 8, h: float = 1e-5) -> dict[str, list[GradCheckEntry]]:
    """Gradient check of the full forward in float64, once per loss set.

    Masks and hard negatives are drawn once and then held fixed so the loss is
    a deterministic function of the parameters.
    """
    from .losses import total_loss
    from .masking import plan_strategy
    from .model import build_model
    cfg = cfg or grad_check_config()
    images, tokens = grad_check_batch(cfg, seed)
    out = {}
    for loss_set in loss_sets:
        c = cfg.replace(loss_set=tuple(loss_set))
        model = build_model(c, seed).double()
        grad_check_point(model, rng_stream(seed, "gradcheck/point"))
        legs = plan_strategy(c, rng_stream(seed, "gradcheck/mask"), tokens, "MLM" in loss_set, "MIM" in loss_set)
        first = total_loss(model, images, tokens, c, legs=legs, neg_rng=rng_stream(seed, "gradcheck/negatives"))
        negatives = first.extras.get("negatives")

        def loss_fn():
            return total_loss(model, images, tokens, c, legs=legs, negatives=negatives).total

        out["+".join(c.loss_set)] = grad_check(model, loss_fn, rng_stream(seed, "gradcheck"), coords_per_array, h)
    return out
