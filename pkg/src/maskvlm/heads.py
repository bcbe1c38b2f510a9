"""Downstream heads: VQA fusion encoder plus answer decoder, NLVR and VE classifiers."""
from __future__ import annotations

import copy

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import END, PAD, START
from .model import MaskVLMNet, run_cross

TASK_CLASSES = {"nlvr": 2, "ve": 3}


class VqaHead(nn.Module):
    """Fusion block and answer decoder, copied from the text cross-modality encoder.

    The fusion block starts as the last pretrained text cross block, the
    decoder as all of them (run with causal self-attention), and the answer
    classifier as the pretrained token classifier.
    """

    def __init__(self, model: MaskVLMNet):
        super().__init__()
        self.fusion = copy.deepcopy(model.text_cross[-1])
        self.decoder = copy.deepcopy(model.text_cross)
        self.classifier = copy.deepcopy(model.token_classifier)


class PairClassifier(nn.Module):
    def __init__(self, in_dim: int, hidden: int, n_classes: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, n_classes)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def make_head(model: MaskVLMNet, task: str) -> nn.Module:
    D = model.cfg.dim
    if task == "vqa":
        return VqaHead(model)
    if task == "nlvr":
        return PairClassifier(2 * D, D, 2)
    if task == "ve":
        return PairClassifier(D, D, 3)
    raise ValueError(f"unknown task {task!r}")


def _t(x, dtype=None):
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def joint_features(model: MaskVLMNet, images, tokens):
    """Image and text cross-modality outputs for aligned pairs."""
    dtype = next(model.parameters()).dtype
    images = _t(images, dtype)
    tokens = _t(tokens, torch.long)
    pad = tokens == PAD
    v = model.encode_image(images)
    w = model.encode_text(tokens)
    v_cross = model.cross_encode("image", v, w, kv_pad=pad)
    w_cross = model.cross_encode("text", w, v, query_pad=pad)
    return v_cross, w_cross, pad


def vqa_fuse(model: MaskVLMNet, head: VqaHead, images, questions):
    v_cross, w_cross, pad = joint_features(model, images, questions)
    # question tokens query the image side
    return head.fusion(w_cross, v_cross, x_pad=pad), pad


def embed_answer(model: MaskVLMNet, answer: torch.Tensor) -> torch.Tensor:
    L = answer.shape[1]
    return model.text_embed_norm(model.token_embed(answer) + model.text_pos[:L])


def answer_logits(model: MaskVLMNet, head: VqaHead, fused, fused_pad, answer_prefix) -> torch.Tensor:
    """Next-token logits ``(B, L, V)`` for every prefix position."""
    x = embed_answer(model, answer_prefix)
    x = run_cross(head.decoder, x, fused, kv_pad=fused_pad, causal=True)
    return head.classifier(x)


def vqa_forward(model: MaskVLMNet, head: VqaHead, images, questions, answers,
                weights=None) -> torch.Tensor:
    """Teacher-forced mean cross-entropy over answer positions after [START].

    ``answers`` is ``(B, L)`` with [START] first, [END] last and [PAD] after.
    ``weights`` optionally scales each sample's loss.
    """
    answers = _t(answers, torch.long)
    if answers.dim() != 2 or answers.shape[1] < 2:
        raise ValueError("empty answer")
    if bool((answers[:, 0] != START).any()):
        raise ValueError("answers must begin with [START]")
    fused, fpad = vqa_fuse(model, head, images, questions)
    logits = answer_logits(model, head, fused, fpad, answers[:, :-1])
    target = answers[:, 1:]
    valid = target != PAD
    if not bool(valid.any()):
        raise ValueError("empty answer")
    ce = F.cross_entropy(logits.transpose(1, 2), target, reduction="none")
    if weights is not None:
        ce = ce * _t(weights, ce.dtype)[:, None]
    return ce[valid].sum() / valid.sum()


@torch.no_grad()
def vqa_generate(model: MaskVLMNet, head: VqaHead, images, questions, max_len: int = 4) -> list[list[int]]:
    """Greedy decoding from [START]; returns answer ids without [START]/[END]."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    fused, fpad = vqa_fuse(model, head, images, questions)
    B = fused.shape[0]
    seq = torch.full((B, 1), START, dtype=torch.long)
    done = torch.zeros(B, dtype=torch.bool)
    for _ in range(max_len):
        nxt = answer_logits(model, head, fused, fpad, seq)[:, -1].argmax(-1)
        nxt = torch.where(done, torch.full_like(nxt, PAD), nxt)
        seq = torch.cat([seq, nxt[:, None]], dim=1)
        done |= nxt == END
        if bool(done.all()):
            break
    out = []
    for row in seq[:, 1:].tolist():
        ans = []
        for t in row:
            if t in (END, PAD):
                break
            ans.append(t)
        out.append(ans)
    return out


def fused_cls(model: MaskVLMNet, images, tokens) -> torch.Tensor:
    v_cross, w_cross, _ = joint_features(model, images, tokens)
    return v_cross[:, 0] * w_cross[:, 0]


def nlvr_forward(model: MaskVLMNet, head: PairClassifier, images1, images2, tokens) -> torch.Tensor:
    """Two passes sharing the statement; fused features concatenated, 2 logits."""
    f1 = fused_cls(model, images1, tokens)
    f2 = fused_cls(model, images2, tokens)
    return head(torch.cat([f1, f2], dim=-1))


def ve_forward(model: MaskVLMNet, head: PairClassifier, images, tokens) -> torch.Tensor:
    return head(fused_cls(model, images, tokens))
