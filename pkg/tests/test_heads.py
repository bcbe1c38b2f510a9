import numpy as np
import pytest
import torch
import torch.nn.functional as F

from maskvlm import heads
from maskvlm.config import rng_stream
from maskvlm.data import END, PAD, START, build_task_dataset, default_vocab
from maskvlm.heads import (PairClassifier, VqaHead, answer_logits, make_head, nlvr_forward, ve_forward,
                           vqa_forward, vqa_fuse, vqa_generate)
from maskvlm.model import build_model, init_params

from conftest import tiny_config


@pytest.fixture(scope="module")
def setup():
    cfg = tiny_config()
    model = build_model(cfg).eval()
    return cfg, model


@pytest.fixture(scope="module")
def task_sets(tiny_corpus):
    cfg = tiny_config()
    return {t: build_task_dataset(tiny_corpus["train"], t, 8, 0, cfg) for t in ("vqa", "nlvr", "ve")}


def _vqa_arrays(samples):
    images = np.stack([s.images[0] for s in samples]).astype(np.float32)
    questions = np.stack([s.tokens for s in samples])
    answers = np.stack([s.label for s in samples])
    return images, questions, answers


def test_head_shapes_and_two_linear_layers(setup):
    cfg, model = setup
    nlvr, ve = make_head(model, "nlvr"), make_head(model, "ve")
    for head, width, n in ((nlvr, 2 * cfg.dim, 2), (ve, cfg.dim, 3)):
        linears = [m for m in head.modules() if isinstance(m, torch.nn.Linear)]
        assert len(linears) == 2
        assert linears[0].in_features == width and linears[-1].out_features == n
    with pytest.raises(ValueError):
        make_head(model, "captioning")


def test_vqa_head_bit_identical_to_pretrained_blocks(setup):
    _, model = setup
    head = VqaHead(model)
    src = model.text_cross.state_dict()
    for k, v in head.decoder.state_dict().items():
        assert torch.equal(v, src[k])
    for k, v in head.fusion.state_dict().items():
        assert torch.equal(v, model.text_cross[-1].state_dict()[k])
    # copies, not shared storage
    assert head.decoder[0].cross_attn.q.weight.data_ptr() != model.text_cross[0].cross_attn.q.weight.data_ptr()


def test_vqa_loss_equals_stepwise_oracle(setup, task_sets):
    _, model = setup
    head = VqaHead(model).eval()
    images, questions, _ = _vqa_arrays(task_sets["vqa"][:3])
    # longer answers than the synthetic one-word ones, with one row padded early
    answers = np.array([[START, 7, 9, 12, END], [START, 15, END, PAD, PAD], [START, 20, 8, 6, END]])
    with torch.no_grad():
        loss = vqa_forward(model, head, images, questions, answers).item()
        fused, fpad = vqa_fuse(model, head, images, questions)
        total, count = 0.0, 0
        for b in range(3):
            for t in range(1, answers.shape[1]):
                if answers[b, t] == PAD:
                    continue
                prefix = torch.as_tensor(answers[b:b + 1, :t])
                logits = answer_logits(model, head, fused[b:b + 1], fpad[b:b + 1], prefix)[0, -1]
                total += F.cross_entropy(logits[None], torch.as_tensor([answers[b, t]])).item()
                count += 1
    assert loss == pytest.approx(total / count, abs=1e-6)


def test_one_token_answer_is_single_position_ce(setup, task_sets):
    _, model = setup
    head = VqaHead(model).eval()
    images, questions, _ = _vqa_arrays(task_sets["vqa"][:1])
    answers = np.array([[START, END]])
    with torch.no_grad():
        loss = vqa_forward(model, head, images, questions, answers).item()
        fused, fpad = vqa_fuse(model, head, images, questions)
        logits = answer_logits(model, head, fused, fpad, torch.as_tensor([[START]]))[0, 0]
        want = F.cross_entropy(logits[None], torch.as_tensor([END])).item()
    assert loss == pytest.approx(want, abs=1e-7)


def test_vqa_rejects_empty_and_unstarted_answers(setup, task_sets):
    _, model = setup
    head = VqaHead(model)
    images, questions, _ = _vqa_arrays(task_sets["vqa"][:1])
    with pytest.raises(ValueError, match="empty"):
        vqa_forward(model, head, images, questions, np.array([[START]]))
    with pytest.raises(ValueError, match="empty"):
        vqa_forward(model, head, images, questions, np.array([[START, PAD]]))
    with pytest.raises(ValueError, match="START"):
        vqa_forward(model, head, images, questions, np.array([[7, END]]))


@pytest.mark.parametrize("t", [1, 2, 3])
def test_answer_decoder_is_causal(setup, task_sets, t):
    _, model = setup
    head = VqaHead(model).eval()
    images, questions, _ = _vqa_arrays(task_sets["vqa"][:2])
    prefix = torch.as_tensor([[START, 7, 9, 12, 14], [START, 6, 8, 10, 11]])
    changed = prefix.clone()
    changed[:, t] = 25
    with torch.no_grad():
        fused, fpad = vqa_fuse(model, head, images, questions)
        a = answer_logits(model, head, fused, fpad, prefix)
        b = answer_logits(model, head, fused, fpad, changed)
    assert torch.equal(a[:, :t], b[:, :t])
    assert not torch.allclose(a[:, t:], b[:, t:])


def test_generate_is_deterministic(setup, task_sets):
    _, model = setup
    head = VqaHead(model).eval()
    images, questions, _ = _vqa_arrays(task_sets["vqa"])
    first = vqa_generate(model, head, images, questions, max_len=4)
    assert first == vqa_generate(model, head, images, questions, max_len=4)
    assert all(len(a) <= 4 and START not in a and END not in a for a in first)
    with pytest.raises(ValueError):
        vqa_generate(model, head, images, questions, max_len=0)


def test_generate_always_end_gives_empty_answer(setup, task_sets):
    _, model = setup
    head = VqaHead(model).eval()
    with torch.no_grad():
        head.classifier.weight.zero_()
        head.classifier.bias.zero_()
        head.classifier.bias[END] = 1.0
    images, questions, _ = _vqa_arrays(task_sets["vqa"])
    assert vqa_generate(model, head, images, questions, max_len=3) == [[] for _ in range(len(images))]


def _nlvr_arrays(samples):
    a = np.stack([s.images[0] for s in samples]).astype(np.float32)
    b = np.stack([s.images[1] for s in samples]).astype(np.float32)
    return a, b, np.stack([s.tokens for s in samples])


def test_nlvr_swap_and_equal_halves(setup, task_sets):
    cfg, model = setup
    head = make_head(model, "nlvr")
    init_params(head, rng_stream(0, "init/head/nlvr"))
    a, b, toks = _nlvr_arrays(task_sets["nlvr"])
    captured = []
    hook = head.fc1.register_forward_hook(lambda m, inp, out: captured.append(inp[0].detach().clone()))
    with torch.no_grad():
        ab = nlvr_forward(model, head, a, b, toks)
        ba = nlvr_forward(model, head, b, a, toks)
        aa = nlvr_forward(model, head, a, a, toks)
    hook.remove()
    D = cfg.dim
    x_ab, x_ba, x_aa = captured
    assert torch.equal(x_ab[:, :D], x_ba[:, D:]) and torch.equal(x_ab[:, D:], x_ba[:, :D])
    assert torch.equal(x_aa[:, :D], x_aa[:, D:])
    assert ab.shape == (len(a), 2) and torch.isfinite(ab).all() and torch.isfinite(aa).all()
    assert not torch.allclose(ab, ba)


def test_ve_zeroed_text_gives_bias_path(setup, task_sets, monkeypatch):
    cfg, model = setup
    head = make_head(model, "ve")
    init_params(head, rng_stream(0, "init/head/ve"))
    with torch.no_grad():
        head.fc1.bias.normal_()
        head.fc2.bias.normal_()
    samples = task_sets["ve"]
    images = np.stack([s.images[0] for s in samples]).astype(np.float32)
    toks = np.stack([s.tokens for s in samples])
    real = heads.joint_features

    def zero_text(model, images, tokens):
        v, w, pad = real(model, images, tokens)
        return v, torch.zeros_like(w), pad

    monkeypatch.setattr(heads, "joint_features", zero_text)
    with torch.no_grad():
        logits = ve_forward(model, head, images, toks)
        bias_path = head.fc2(F.gelu(head.fc1.bias))
    assert logits.shape == (len(samples), 3)
    assert torch.allclose(logits, bias_path.expand_as(logits), atol=1e-7)


def test_ve_deterministic(setup, task_sets):
    _, model = setup
    head = make_head(model, "ve")
    samples = task_sets["ve"]
    images = np.stack([s.images[0] for s in samples]).astype(np.float32)
    toks = np.stack([s.tokens for s in samples])
    with torch.no_grad():
        assert torch.equal(ve_forward(model, head, images, toks), ve_forward(model, head, images, toks))


def test_pair_classifier_is_linear_gelu_linear():
    torch.manual_seed(0)
    head = PairClassifier(4, 5, 3)
    x = torch.randn(6, 4)
    want = F.linear(F.gelu(F.linear(x, head.fc1.weight, head.fc1.bias)), head.fc2.weight, head.fc2.bias)
    assert torch.allclose(head(x), want)


def test_synthetic_answers_use_vocab_colors(task_sets):
    vocab = default_vocab()
    colors = {vocab[c] for c in ("red", "green", "blue", "yellow", "white")}
    for s in task_sets["vqa"]:
        assert s.label[0] == START and s.label[-1] == END and s.label[1] in colors
