"""Two-stage retrieval, Recall@k, zero-shot classification and task accuracy.

Stage 1 ranks the gallery by contrastive similarity of the uni-modal
projections. Stage 2 re-scores the top ``k_candidates`` with the matching
head on full cross-modality passes; the rest of the gallery keeps its stage-1
order below them. Ties break by gallery index everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .config import Config, rng_stream
from .data import (COLORS, END, PAD, SHAPES, START, PairedSample, Scene, Vocabulary, default_vocab, render_image,
                   stack, tokenize)
from .model import MaskVLMNet

DEFAULT_KS = (1, 5, 10)


@dataclass
class RetrievalReport:
    direction: str  # "image_to_text" or "text_to_image"
    recalls: dict
    k_candidates: int
    ranks: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"direction": self.direction, "recalls": {str(k): v for k, v in self.recalls.items()},
                "k_candidates": self.k_candidates, "ranks": [int(r) for r in self.ranks]}


@dataclass
class NotEvaluable:
    reason: str

    def to_dict(self) -> dict:
        return {"evaluable": False, "reason": self.reason}


def recall_at_k(ranks: Sequence[int], ks: Sequence[int] = DEFAULT_KS) -> dict:
    ranks = np.asarray(ranks)
    if len(ranks) == 0:
        raise ValueError("no ranks")
    if ranks.min() < 1:
        raise ValueError("ranks are 1-based")
    return {int(k): 100.0 * int(np.sum(ranks <= k)) / len(ranks) for k in ks}


def stage1_order(scores: np.ndarray) -> np.ndarray:
    """Gallery indices by descending score, stable on index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def two_stage_order(scores: np.ndarray, k_candidates: int,
                    rerank: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> np.ndarray:
    order = stage1_order(scores)
    if not k_candidates or rerank is None:
        return order
    pool = order[:k_candidates]
    pool_scores = np.asarray(rerank(pool), dtype=np.float64)
    # stable sort keeps stage-1 order among equal rerank scores
    return np.concatenate([pool[np.argsort(-pool_scores, kind="stable")], order[k_candidates:]])


def _batched(fn, x, batch=64):
    return torch.cat([fn(x[a:a + batch]) for a in range(0, len(x), batch)])


@torch.no_grad()
def encode_pairs(model: MaskVLMNet, images: np.ndarray, tokens: np.ndarray):
    dtype = next(model.parameters()).dtype
    imgs = torch.as_tensor(images, dtype=dtype)
    tok = torch.as_tensor(tokens, dtype=torch.long)
    v = _batched(model.encode_image, imgs)
    w = _batched(model.encode_text, tok)
    z_im = model.project_itc(v[:, 0], "image")
    z_txt = model.project_itc(w[:, 0], "text")
    return v, w, tok == PAD, z_im, z_txt


@torch.no_grad()
def itm_match_prob(model: MaskVLMNet, v: torch.Tensor, w: torch.Tensor, pad: torch.Tensor) -> np.ndarray:
    """Matched-class probability for aligned rows of ``v`` and ``w``."""
    zi = model.cross_encode("image", v, w, kv_pad=pad)[:, 0]
    zt = model.cross_encode("text", w, v, query_pad=pad)[:, 0]
    return torch.softmax(model.itm_logits(zi, zt), dim=-1)[:, 1].double().numpy()


def rank_of(order: np.ndarray, target: int) -> int:
    return int(np.flatnonzero(order == target)[0]) + 1


def retrieve(model: MaskVLMNet, images: np.ndarray, tokens: np.ndarray, direction: str, k_candidates: int,
             ks: Sequence[int] = DEFAULT_KS, itm_scorer: Optional[Callable] = None) -> RetrievalReport:
    """Retrieve item ``i`` of the other modality for every query ``i``.

    ``itm_scorer(query_index, candidate_indices)`` overrides the matching head
    (used to inject oracle scores in tests).
    """
    if len(images) == 0 or len(tokens) == 0:
        raise ValueError("empty gallery")
    if direction not in ("image_to_text", "text_to_image"):
        raise ValueError(direction)
    v, w, pad, z_im, z_txt = encode_pairs(model, images, tokens)
    sim = (z_im @ z_txt.T).double().numpy()
    if direction == "text_to_image":
        sim = sim.T
    k = min(k_candidates, sim.shape[1])

    def scorer(q):
        if itm_scorer is not None:
            return lambda cands: itm_scorer(q, cands)

        def score(cands):
            cands = torch.as_tensor(cands)
            if direction == "image_to_text":
                return itm_match_prob(model, v[q].expand(len(cands), -1, -1), w[cands], pad[cands])
            return itm_match_prob(model, v[cands], w[q].expand(len(cands), -1, -1), pad[q].expand(len(cands), -1))
        return score

    ranks = [rank_of(two_stage_order(sim[q], k, scorer(q)), q) for q in range(sim.shape[0])]
    return RetrievalReport(direction, recall_at_k(ranks, ks), k, ranks)


def evaluable_for_retrieval(cfg) -> Optional[str]:
    if "ITC" not in cfg.loss_set:
        return ("not evaluable: the contrastive projection layers were not trained "
                f"(loss set {'+'.join(cfg.loss_set)})")
    return None


def zero_shot_eval(model: MaskVLMNet, samples: Sequence[PairedSample], k_candidates: Optional[int] = None,
                   trained_losses: Optional[Sequence[str]] = None) -> dict:
    """Both retrieval directions with the pretrained model as-is.

    The rerank stage runs only when the matching head was trained.
    """
    cfg = model.cfg
    if trained_losses is not None:
        cfg = cfg.replace(loss_set=tuple(trained_losses))
    reason = evaluable_for_retrieval(cfg)
    if reason:
        return NotEvaluable(reason).to_dict()
    k = cfg.k_candidates if k_candidates is None else k_candidates
    if "ITM" not in cfg.loss_set:
        k = 0
    images, tokens = stack(samples)
    i2t = retrieve(model, images, tokens, "image_to_text", k)
    t2i = retrieve(model, images, tokens, "text_to_image", k)
    return {"evaluable": True, "image_to_text": i2t.to_dict(), "text_to_image": t2i.to_dict()}


def mean_recall(report: dict) -> float:
    """Mean of R@1/5/10 over both directions; used for model selection."""
    vals = list(report["image_to_text"]["recalls"].values()) + list(report["text_to_image"]["recalls"].values())
    return float(np.mean(vals))


def prompt_tokens(name: str, template: str, vocab: Vocabulary, max_len: int) -> np.ndarray:
    text = template.format(name) if template.strip() else name
    ids = [START] + tokenize(text, vocab) + [END]
    if len(ids) > max_len:
        raise ValueError("prompt longer than max_text_len")
    return np.asarray(ids + [PAD] * (max_len - len(ids)), dtype=np.int64)


def classification_set(n: int, seed: int, cfg: Config) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    """Single-object images labelled by shape; the class names are the shape words."""
    rng = rng_stream(seed, "data/classify")
    cells = cfg.grid * cfg.grid
    images, labels = [], []
    for _ in range(n):
        shape = int(rng.integers(len(SHAPES)))
        color = COLORS[int(rng.integers(len(COLORS)))]
        where = int(rng.integers(cells))
        scene = Scene(cfg.grid, tuple((SHAPES[shape], color) if i == where else None for i in range(cells)))
        images.append(render_image(scene, cfg.image_size))
        labels.append(shape)
    return np.stack(images).astype(np.float32), np.asarray(labels), SHAPES


@torch.no_grad()
def zero_shot_classify(model: MaskVLMNet, images: np.ndarray, labels: Sequence[int], class_names: Sequence[str],
                       prompts: Optional[Sequence[str]] = None, vocab: Optional[Vocabulary] = None,
                       modes: Sequence[str] = ("itc", "itm")) -> dict:
    """Top-1 accuracy of classifying images by retrieving their class name.

    Scores are averaged over the prompt templates (``"{}"`` marks the class
    name; an empty template means the bare name).
    """
    vocab = vocab or default_vocab()
    templates = list(prompts) if prompts else [""]
    L = model.cfg.max_text_len
    tokens = np.stack([prompt_tokens(c, t, vocab, L) for t in templates for c in class_names])
    n_cls, n_tpl = len(class_names), len(templates)
    dtype = next(model.parameters()).dtype
    imgs = torch.as_tensor(images, dtype=dtype)
    v = _batched(model.encode_image, imgs)
    w = model.encode_text(torch.as_tensor(tokens))
    pad = torch.as_tensor(tokens) == PAD
    labels = np.asarray(labels)
    out = {}
    if "itc" in modes:
        z_im = model.project_itc(v[:, 0], "image")
        z_txt = model.project_itc(w[:, 0], "text")
        scores = (z_im @ z_txt.T).double().numpy().reshape(len(images), n_tpl, n_cls).mean(axis=1)
        out["itc"] = 100.0 * float(np.mean(scores.argmax(axis=1) == labels))
    if "itm" in modes:
        scores = np.zeros((len(images), n_tpl * n_cls))
        for i in range(len(images)):
            scores[i] = itm_match_prob(model, v[i].expand(len(tokens), -1, -1), w, pad)
        scores = scores.reshape(len(images), n_tpl, n_cls).mean(axis=1)
        out["itm"] = 100.0 * float(np.mean(scores.argmax(axis=1) == labels))
    return out


def _task_arrays(samples):
    images = np.stack([s.images[0] for s in samples]).astype(np.float32)
    tokens = np.stack([s.tokens for s in samples]).astype(np.int64)
    return images, tokens


@torch.no_grad()
def task_predictions(model: MaskVLMNet, head, samples, batch: int = 64) -> list:
    from .heads import PairClassifier, VqaHead, nlvr_forward, ve_forward, vqa_generate
    if not samples:
        raise ValueError("empty task dataset")
    task = samples[0].task
    if any(s.task != task for s in samples):
        raise ValueError("mixed task dataset")
    expected = VqaHead if task == "vqa" else PairClassifier
    if not isinstance(head, expected) or (task != "vqa" and head.fc2.out_features != (2 if task == "nlvr" else 3)):
        raise ValueError(f"head does not match task {task!r}")
    model.eval()
    head.eval()
    preds = []
    for a in range(0, len(samples), batch):
        part = samples[a:a + batch]
        images, tokens = _task_arrays(part)
        if task == "vqa":
            preds.extend(vqa_generate(model, head, images, tokens, max_len=4))
        elif task == "nlvr":
            images2 = np.stack([s.images[1] for s in part]).astype(np.float32)
            preds.extend(nlvr_forward(model, head, images, images2, tokens).argmax(-1).tolist())
        else:
            preds.extend(ve_forward(model, head, images, tokens).argmax(-1).tolist())
    return preds


def prediction_accuracy(task: str, preds: Sequence, samples) -> float:
    if task == "vqa":
        # exact token-sequence match, [START]/[END] stripped
        hits = [list(p) == [int(t) for t in s.label[1:] if t not in (END, PAD)] for p, s in zip(preds, samples)]
    else:
        hits = [int(p) == int(s.label) for p, s in zip(preds, samples)]
    return 100.0 * float(np.mean(hits))


def task_accuracy(model: MaskVLMNet, head, samples) -> float:
    preds = task_predictions(model, head, samples)
    return prediction_accuracy(samples[0].task, preds, samples)
