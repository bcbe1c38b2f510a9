import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from maskvlm.config import Config, rng_stream
from maskvlm.optim import (AdamW, GradCheckEntry, NonFiniteGradient, grad_check, grad_check_config,
                           grad_check_suite, relative_error, schedule_lr, steps_per_epoch)


def _scalar(value=1.0):
    return torch.nn.Parameter(torch.tensor([value], dtype=torch.float64))


def _opt(p, wd, decay=True):
    return AdamW([("w", p)], wd, group_of=lambda n: "g", decay_rule=lambda n: decay)


def test_decay_only_closed_form():
    p = _scalar()
    opt = _opt(p, 0.05)
    p.grad = torch.zeros(1, dtype=torch.float64)
    opt.step({"g": 0.1})
    assert p.item() == pytest.approx(0.995, abs=1e-15)


def test_one_step_unit_gradient():
    p = _scalar()
    opt = _opt(p, 0.0)
    p.grad = torch.ones(1, dtype=torch.float64)
    opt.step({"g": 0.1})
    # m_hat / sqrt(v_hat) = 1 after bias correction
    assert p.item() - 1.0 == pytest.approx(-0.1, abs=1e-8)


def test_zero_grad_zero_decay_unchanged():
    p = _scalar(0.3)
    opt = _opt(p, 0.0)
    for _ in range(3):
        p.grad = torch.zeros(1, dtype=torch.float64)
        opt.step({"g": 0.1})
    assert p.item() == 0.3


def test_no_grad_means_untouched_even_with_decay():
    p = _scalar(2.0)
    opt = _opt(p, 0.05)
    p.grad = None
    opt.step({"g": 0.1})
    assert p.item() == 2.0


def test_decay_exclusion_respected():
    p = _scalar()
    opt = _opt(p, 0.05, decay=False)
    p.grad = torch.zeros(1, dtype=torch.float64)
    opt.step({"g": 0.1})
    assert p.item() == 1.0


def test_nonfinite_gradient_named():
    p = _scalar()
    opt = _opt(p, 0.0)
    p.grad = torch.tensor([float("nan")], dtype=torch.float64)
    with pytest.raises(NonFiniteGradient, match="'w'"):
        opt.step({"g": 0.1})


def test_matches_torch_adamw():
    torch.manual_seed(0)
    a = torch.nn.Parameter(torch.randn(5, dtype=torch.float64))
    b = torch.nn.Parameter(a.detach().clone())
    ours = _opt(a, 0.05)
    ref = torch.optim.AdamW([b], lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05)
    for _ in range(10):
        g = torch.randn(5, dtype=torch.float64)
        a.grad = g.clone()
        b.grad = g.clone()
        ours.step({"g": 0.01})
        ref.step()
    assert torch.allclose(a, b, atol=1e-12)


def test_deterministic_given_grads():
    runs = []
    for _ in range(2):
        p = _scalar(0.5)
        opt = _opt(p, 0.05)
        for g in (0.3, -1.2, 0.7):
            p.grad = torch.tensor([g], dtype=torch.float64)
            opt.step({"g": 0.05})
        runs.append(p.item())
    assert runs[0] == runs[1]


def test_steps_per_epoch_keeps_partial():
    assert steps_per_epoch(384, 8) == 48
    assert steps_per_epoch(385, 32) == 13


def test_schedule_endpoints():
    cfg = Config()
    spe = 12
    assert schedule_lr(0, cfg, spe)[0] == 0.0
    assert schedule_lr(cfg.warmup_epochs * spe, cfg, spe)[0] == pytest.approx(3e-4, abs=1e-18)
    assert schedule_lr(cfg.epochs * spe, cfg, spe)[0] == pytest.approx(3e-5, abs=1e-18)
    assert schedule_lr(7, cfg, spe)[1] == cfg.lr_unimodal


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10), st.integers(1, 20))
def test_schedule_continuity(epochs, warm, spe):
    warm = min(warm, epochs)
    cfg = Config(epochs=epochs, warmup_epochs=warm)
    total, w = epochs * spe, warm * spe
    lrs = [schedule_lr(s, cfg, spe)[0] for s in range(total + 1)]
    assert all(cfg.lr_floor - 1e-18 <= lr <= cfg.lr_peak + 1e-18 for lr in lrs[max(w, 1):])
    # with no cosine phase the last update lands on the floor, a deliberate jump
    for s in range(total if total > w else total - 1):
        step = abs(lrs[s + 1] - lrs[s])
        if s < w:
            assert step <= cfg.lr_peak / w + 1e-15
        elif total > w:
            bound = 0.5 * (cfg.lr_peak - cfg.lr_floor) * math.pi / (total - w)
            assert step <= bound + 1e-15


def test_relative_error_floor():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(1e-9, 2e-9) == pytest.approx(1e-6)
    assert relative_error(2.0, 1.0) == 0.5


def test_grad_check_detects_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x ** 2

        @staticmethod
        def backward(ctx, g):
            return g * 3.0

    m = torch.nn.Linear(2, 1).double()
    x = torch.tensor([[1.0, 2.0]], dtype=torch.float64)
    rep = grad_check(m, lambda: Bad.apply(m(x)).sum(), rng_stream(0, "gc"))
    assert max(e.max_rel_error for e in rep) > 1e-3


def test_grad_check_single_loss_and_no_gradient_report():
    cfg = grad_check_config(n_enc_blocks=1, n_cross_blocks=1)
    report = grad_check_suite(cfg, loss_sets=[("MLM",)], coords_per_array=2)["MLM"]
    by_name = {e.name: e for e in report}
    assert by_name["itm_head.weight"].status == "no gradient"
    assert by_name["decoder_pred.weight"].max_rel_error is None
    checked = [e for e in report if e.max_rel_error is not None]
    assert checked and max(e.max_rel_error for e in checked) <= 1e-6
    assert isinstance(report[0], GradCheckEntry)
