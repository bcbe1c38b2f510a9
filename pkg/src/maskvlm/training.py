"""Pretraining and finetuning loops, loss ablation and the reconstruction demo."""
from __future__ import annotations

import math
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import Config, RngStream, check_config, rng_stream
from .data import PAD, PairedSample, corpus_hash, stack
from .losses import total_loss
from .model import MaskVLMNet, build_model, param_group, param_shapes
from .optim import AdamW, schedule_lr, steps_per_epoch
from .persistence import MetricsLog, TOOL_VERSION, save_checkpoint, state_arrays

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class RunResult:
    model: torch.nn.Module
    stage: str
    cfg: Config
    records: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    best_epoch: Optional[int] = None
    head: Optional[torch.nn.Module] = None


def manifest(cfg: Config, stage: str, corpus_id: str, parent: Optional[str] = None, **extra) -> dict:
    out = {"tool_version": TOOL_VERSION, "config": cfg.to_dict(), "stage": stage, "corpus_hash": corpus_id,
           "start_checkpoint": parent}
    out.update(extra)
    return out


def batches(n: int, batch_size: int, rng: RngStream):
    perm = rng.permutation(n)
    for b in range(steps_per_epoch(n, batch_size)):
        yield perm[b * batch_size:(b + 1) * batch_size]


def _mean_breakdowns(parts: list[tuple[int, dict]]) -> dict:
    total_n = sum(n for n, _ in parts)
    keys = [k for k in parts[0][1] if k not in ("masked_token_count", "masked_pixel_count")]
    return {k: sum(n * d[k] for n, d in parts) / total_n for k in keys}


@torch.no_grad()
def evaluate_losses(model: MaskVLMNet, samples: Sequence[PairedSample], cfg: Config) -> dict:
    """Mean loss breakdown over ``samples`` with fixed evaluation masks and negatives."""
    if not samples:
        return {}
    images, tokens = stack(samples)
    mask_rng = rng_stream(cfg.seed, "eval/mask")
    neg_rng = rng_stream(cfg.seed, "eval/negatives")
    parts = []
    for a in range(0, len(samples), cfg.batch_size):
        sl = slice(a, a + cfg.batch_size)
        out = total_loss(model, images[sl], tokens[sl], cfg, mask_rng=mask_rng, neg_rng=neg_rng)
        parts.append((len(tokens[sl]), out.as_floats()))
    return _mean_breakdowns(parts)


def _round(d: dict) -> dict:
    return {k: (float(np.float64(v)) if isinstance(v, float) else v) for k, v in d.items()}



# --- generic loop --------------------------------------------------------------

def _state(model: torch.nn.Module, head: Optional[torch.nn.Module]) -> dict[str, np.ndarray]:
    arrays = state_arrays(model)
    if head is not None:
        arrays.update({f"head.{k}": v for k, v in state_arrays(head).items()})
    return arrays


def _named_params(model, head):
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    if head is not None:
        named += [(f"head.{n}", p) for n, p in head.named_parameters()]
    return named


def _group_of(name: str) -> str:
    return "task_head" if name.startswith("head.") else param_group(name)


def _run(stage: str, cfg: Config, model: MaskVLMNet, head: Optional[torch.nn.Module], n_train: int, epochs: int,
         lrs_at, batch_loss, evaluate, select: str, maximize: bool, keep: str,
         out_dir: Optional[Path], metrics: MetricsLog, man: dict) -> RunResult:
    """Shared epoch loop.

    ``lrs_at(step, spe)`` gives the per-group learning rates for the update
    completing ``step``; ``batch_loss(idx)`` returns ``(loss, log dict)``;
    ``evaluate()`` returns the per-epoch validation record, ``select`` names
    the key used to pick the best epoch. ``keep`` is ``"best"`` or ``"last"``
    and decides which weights the returned model carries.
    """
    torch.manual_seed(0)  # nothing should draw from torch's global stream; pinned regardless
    opt = AdamW(_named_params(model, head), cfg.weight_decay, group_of=_group_of)
    spe = steps_per_epoch(n_train, cfg.batch_size)
    data_rng = rng_stream(cfg.seed, f"data/shuffle/{stage}" if stage != "pretrain" else "data/shuffle")
    best, best_epoch, best_state = None, None, None
    step = 0
    t0 = time.time()
    for epoch in range(1, epochs + 1):
        model.train()
        if head is not None:
            head.train()
        for b, idx in enumerate(batches(n_train, cfg.batch_size, data_rng)):
            step += 1
            lrs = lrs_at(step, spe)
            total, logged = batch_loss(idx)
            if not torch.isfinite(total):
                raise NonFiniteLoss(f"non-finite loss at step {step} (epoch {epoch}, batch {b})")
            opt.zero_grad()
            total.backward()
            opt.step(lrs)
            metrics.write({"stage": stage, "kind": "step", "step": step, "epoch": epoch,
                           "lr_cross": lrs["cross_and_heads"], "lr_unimodal": lrs["unimodal_encoders"],
                           **_round(logged)})
        model.eval()
        if head is not None:
            head.eval()
        val = evaluate()
        metrics.write({"stage": stage, "kind": "eval", "step": step, "epoch": epoch, **val})
        log.info("%s epoch %d/%d %s=%s (%.0fs)", stage, epoch, epochs, select, val.get(select), time.time() - t0)
        score = val.get(select)
        if score is not None and (best is None or (score > best if maximize else score < best)):
            best, best_epoch = score, epoch
            best_state = _state(model, head)
    result = RunResult(model, stage, cfg, metrics.records, best_epoch=best_epoch, head=head)
    man = dict(man, steps=step)
    if out_dir:
        result.checkpoints["final"] = save_checkpoint(out_dir / f"{stage}.final.ckpt", _state(model, head), man,
                                                      optim=opt.state.state_arrays(), optim_step=opt.state.step)
        if best_state is not None:
            result.checkpoints["best"] = save_checkpoint(out_dir / f"{stage}.best.ckpt", best_state,
                                                         dict(man, best_epoch=best_epoch))
    if keep == "best" and best_state is not None:
        _load_into(model, head, best_state)
    result.checkpoints["selected"] = result.checkpoints.get("best" if keep == "best" and best_state is not None
                                                            else "final")
    return result


def _load_into(model, head, arrays: dict[str, np.ndarray]):
    own = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items() if not k.startswith("head.")}
    model.load_state_dict(own)
    if head is not None:
        head.load_state_dict({k[5:]: torch.from_numpy(np.array(v)) for k, v in arrays.items()
                              if k.startswith("head.")})


# --- pretraining -----------------------------------------------------------------

def pretrain(cfg: Config, corpus: dict, out_dir: Optional[str | Path] = None, model: Optional[MaskVLMNet] = None,
             metrics: Optional[MetricsLog] = None, stage: str = "pretrain") -> RunResult:
    """Train on ``corpus['train']`` with the configured loss set.

    Logs one line per optimizer step and one ``eval`` line per epoch, and keeps
    the final and best-validation weights. The returned model holds the final
    weights.
    """
    check_config(cfg)
    out_dir = Path(out_dir) if out_dir else None
    if metrics is None:
        metrics = MetricsLog(out_dir / f"{stage}.metrics.jsonl" if out_dir else None)
    model = model or build_model(cfg)
    images, tokens = stack(corpus["train"])
    mask_rng = rng_stream(cfg.seed, "mask")
    neg_rng = rng_stream(cfg.seed, "negatives")

    def lrs_at(step, spe):
        lr_cross, lr_uni = schedule_lr(step, cfg, spe)
        return {"cross_and_heads": lr_cross, "unimodal_encoders": lr_uni}

    def batch_loss(idx):
        out = total_loss(model, images[idx], tokens[idx], cfg, mask_rng=mask_rng, neg_rng=neg_rng)
        return out.total, out.as_floats()

    man = manifest(cfg, stage, corpus_hash(corpus))
    return _run(stage, cfg, model, None, len(images), cfg.epochs, lrs_at, batch_loss,
                lambda: evaluate_losses(model, corpus.get("val", []), cfg), "total", False, "last",
                out_dir, metrics, man)


# --- finetuning ------------------------------------------------------------------

@dataclass(frozen=True)
class Recipe:
    """Per-task finetuning defaults; the schedule is cosine from each peak to ``floor_ratio`` of it."""

    epochs: int
    lr_cross: float  # cross-modality encoders and pretrained heads
    lr_unimodal: float
    lr_task_head: float
    floor_ratio: float = 0.1

    def scaled(self, factor: float) -> "Recipe":
        """Every peak learning rate multiplied by ``factor``."""
        if not factor > 0:
            raise ValueError("learning-rate scale must be positive")
        return Recipe(self.epochs, self.lr_cross * factor, self.lr_unimodal * factor, self.lr_task_head * factor,
                      self.floor_ratio)


FINETUNE_RECIPES = {
    "retrieval": Recipe(15, 1e-5, 1e-5, 1e-5),
    "vqa": Recipe(15, 2e-5, 1e-5, 2e-5),
    "nlvr": Recipe(5, 1e-5, 1e-5, 1e-4),
    "ve": Recipe(5, 1e-5, 1e-5, 1e-4),
}


def cosine_lrs(recipe: Recipe, epochs: int):
    def lrs_at(step, spe):
        total = max(1, epochs * spe)
        f = recipe.floor_ratio + (1 - recipe.floor_ratio) * 0.5 * (1 + math.cos(math.pi * min(step, total) / total))
        return {"cross_and_heads": recipe.lr_cross * f, "unimodal_encoders": recipe.lr_unimodal * f,
                "task_head": recipe.lr_task_head * f}
    return lrs_at


def retrieval_report(model: MaskVLMNet, samples, cfg: Config) -> dict:
    from .evaluation import zero_shot_eval
    return zero_shot_eval(model, samples, cfg.k_candidates, trained_losses=("ITC", "ITM"))


def finetune_retrieval(cfg: Config, corpus: dict, model: MaskVLMNet, out_dir: Optional[str | Path] = None,
                       recipe: Optional[Recipe] = None, epochs: Optional[int] = None, parent: Optional[str] = None,
                       metrics: Optional[MetricsLog] = None) -> RunResult:
    """ITC + ITM finetuning; keeps the epoch with the best mean of the six val recalls."""
    from .evaluation import mean_recall
    recipe = recipe or FINETUNE_RECIPES["retrieval"]
    epochs = recipe.epochs if epochs is None else epochs
    stage = "finetune_retrieval"
    ft_cfg = cfg.replace(loss_set=("ITC", "ITM"))
    check_config(ft_cfg)
    out_dir = Path(out_dir) if out_dir else None
    if metrics is None:
        metrics = MetricsLog(out_dir / f"{stage}.metrics.jsonl" if out_dir else None)
    images, tokens = stack(corpus["train"])
    neg_rng = rng_stream(cfg.seed, f"negatives/{stage}")

    def batch_loss(idx):
        out = total_loss(model, images[idx], tokens[idx], ft_cfg, neg_rng=neg_rng)
        return out.total, out.as_floats()

    def evaluate():
        report = retrieval_report(model, corpus["val"], ft_cfg)
        return {"mean_recall": mean_recall(report),
                "image_to_text": report["image_to_text"]["recalls"],
                "text_to_image": report["text_to_image"]["recalls"]}

    man = manifest(ft_cfg, stage, corpus_hash(corpus), parent, recipe=recipe.__dict__, epochs=epochs)
    return _run(stage, ft_cfg, model, None, len(images), epochs, cosine_lrs(recipe, epochs), batch_loss, evaluate,
                "mean_recall", True, "best", out_dir, metrics, man)


def answer_weights(samples) -> dict:
    """Inverse answer frequency, normalised to mean 1 over the samples."""
    counts: dict = {}
    for s in samples:
        key = tuple(int(t) for t in s.label)
        counts[key] = counts.get(key, 0) + 1
    n, k = len(samples), len(counts)
    return {key: n / (k * c) for key, c in counts.items()}


def _pad_answers(labels) -> np.ndarray:
    L = max(len(a) for a in labels)
    return np.stack([np.pad(np.asarray(a, dtype=np.int64), (0, L - len(a)), constant_values=PAD) for a in labels])


def finetune_task(cfg: Config, task: str, datasets: dict, model: MaskVLMNet, out_dir: Optional[str | Path] = None,
                  recipe: Optional[Recipe] = None, epochs: Optional[int] = None, parent: Optional[str] = None,
                  metrics: Optional[MetricsLog] = None) -> RunResult:
    """Train a task head together with the base model.

    VQA keeps the last epoch; NLVR and VE keep the best validation accuracy.
    """
    from .evaluation import task_accuracy
    from .heads import make_head, nlvr_forward, ve_forward, vqa_forward
    from .model import init_params
    if task not in ("vqa", "nlvr", "ve"):
        raise ValueError(f"unknown task {task!r}")
    check_config(cfg)
    recipe = recipe or FINETUNE_RECIPES[task]
    epochs = recipe.epochs if epochs is None else epochs
    stage = f"finetune_{task}"
    out_dir = Path(out_dir) if out_dir else None
    if metrics is None:
        metrics = MetricsLog(out_dir / f"{stage}.metrics.jsonl" if out_dir else None)
    head = make_head(model, task)
    if task != "vqa":
        init_params(head, rng_stream(cfg.seed, f"init/head/{task}"))
    head = head.to(next(model.parameters()).dtype)
    train = datasets["train"]
    images = np.stack([s.images[0] for s in train]).astype(np.float32)
    tokens = np.stack([s.tokens for s in train])
    if task == "vqa":
        labels = _pad_answers([s.label for s in train])
        weights = None
        if cfg.vqa_answer_weighting:
            table = answer_weights(train)
            weights = np.asarray([table[tuple(int(t) for t in s.label)] for s in train])
    else:
        labels = np.asarray([int(s.label) for s in train])
    images2 = np.stack([s.images[1] for s in train]).astype(np.float32) if task == "nlvr" else None

    def batch_loss(idx):
        if task == "vqa":
            loss = vqa_forward(model, head, images[idx], tokens[idx], labels[idx],
                               None if weights is None else weights[idx])
            return loss, {"vqa": float(loss.detach()), "total": float(loss.detach())}
        y = torch.as_tensor(labels[idx])
        if task == "nlvr":
            logits = nlvr_forward(model, head, images[idx], images2[idx], tokens[idx])
        else:
            logits = ve_forward(model, head, images[idx], tokens[idx])
        loss = torch.nn.functional.cross_entropy(logits, y)
        acc = float((logits.argmax(-1) == y).double().mean())
        return loss, {task: float(loss.detach()), "total": float(loss.detach()), "batch_accuracy": acc}

    def evaluate():
        return {"accuracy": task_accuracy(model, head, datasets["val"])} if datasets.get("val") else {}

    man = manifest(cfg, stage, task_dataset_hash(datasets), parent, task=task, recipe=recipe.__dict__,
                   epochs=epochs)
    keep = "last" if task == "vqa" else "best"
    return _run(stage, cfg, model, head, len(train), epochs, cosine_lrs(recipe, epochs), batch_loss, evaluate,
                "accuracy", True, keep, out_dir, metrics, man)


def task_dataset_hash(datasets: dict) -> str:
    import hashlib
    h = hashlib.blake2b(digest_size=8)
    for name in ("train", "val", "test"):
        for s in datasets.get(name, []):
            for im in s.images:
                h.update(np.ascontiguousarray(im, dtype="<f4").tobytes())
            h.update(np.ascontiguousarray(s.tokens, dtype="<u2").tobytes())
            h.update(np.ascontiguousarray(np.atleast_1d(s.label), dtype="<u2").tobytes())
    return h.hexdigest()


def build_task_splits(corpus: dict, task: str, cfg: Config, n_train: int = 512, n_eval: int = 128) -> dict:
    """Task datasets drawn from the matching corpus splits, so no test scene is seen in training."""
    from .data import build_task_dataset
    sizes = {"train": n_train, "val": n_eval, "test": n_eval}
    return {name: build_task_dataset(corpus[name], task, n, cfg.seed + i, cfg)
            for i, (name, n) in enumerate(sizes.items())}


# --- checkpoints -----------------------------------------------------------------

def model_from_checkpoint(path: str | Path):
    """Rebuild ``(model, head, header)`` from a checkpoint; ``head`` is ``None`` for non-task stages."""
    from .heads import make_head
    from .persistence import config_from_header, load_checkpoint, read_header
    header = read_header(path)
    cfg = config_from_header(header)
    model = MaskVLMNet(cfg)
    task = header["manifest"].get("task")
    head = make_head(model, task) if task else None
    expected = dict(param_shapes(cfg))
    if head is not None:
        expected.update({f"head.{n}": tuple(p.shape) for n, p in head.named_parameters()})
    _, params, _ = load_checkpoint(path, expected)
    _load_into(model, head, params)
    model.eval()
    return model, head, header


# --- ablation ----------------------------------------------------------------------

ABLATION_ROWS = (("ITC",), ("MLM", "MIM"), ("ITC", "ITM"), ("ITC", "ITM", "MLM"), ("ITC", "ITM", "MIM"),
                 ("ITC", "ITM", "MLM", "MIM"))


def _recalls(report: dict) -> Optional[dict]:
    if not report.get("evaluable", True):
        return None
    return {d: {int(k): v for k, v in report[d]["recalls"].items()} for d in ("image_to_text", "text_to_image")}


def ablate(cfg: Config, corpus: dict, out_dir: Optional[str | Path] = None,
           finetune_epochs: Optional[int] = None, rows: Sequence[tuple] = ABLATION_ROWS) -> dict:
    """Pretrain once per loss set, then report zero-shot and finetuned test retrieval."""
    from .evaluation import zero_shot_eval
    out_dir = Path(out_dir) if out_dir else None
    finetune_epochs = cfg.epochs if finetune_epochs is None else finetune_epochs
    table = []
    for loss_set in rows:
        row_cfg = cfg.replace(loss_set=tuple(loss_set))
        name = "+".join(loss_set)
        sub = out_dir / name if out_dir else None
        t0 = time.time()
        pre = pretrain(row_cfg, corpus, sub)
        zs = zero_shot_eval(pre.model, corpus["test"], row_cfg.k_candidates)
        ft = finetune_retrieval(row_cfg, corpus, pre.model, sub, epochs=finetune_epochs)
        fin = retrieval_report(ft.model, corpus["test"], row_cfg)
        table.append({"loss_set": list(loss_set), "zero_shot": _recalls(zs),
                      "zero_shot_note": None if zs.get("evaluable", True) else zs["reason"],
                      "finetuned": _recalls(fin), "seconds": round(time.time() - t0, 1)})
        log.info("ablation row %s done in %.0fs", name, time.time() - t0)
    return {"tool_version": TOOL_VERSION, "config": cfg.to_dict(), "corpus_hash": corpus_hash(corpus),
            "finetune_epochs": finetune_epochs, "rows": table}


def format_ablation(report: dict) -> str:
    """Aligned text table: one row per loss set, '-' where zero-shot is not evaluable."""
    head = ["Loss", "FT TR@1", "TR@5", "TR@10", "IR@1", "IR@5", "IR@10",
            "ZS TR@1", "TR@5", "TR@10", "IR@1", "IR@5", "IR@10"]
    lines = []
    for row in report["rows"]:
        cells = ["+".join(row["loss_set"])]
        for part in ("finetuned", "zero_shot"):
            r = row[part]
            for d in ("image_to_text", "text_to_image"):
                for k in (1, 5, 10):
                    cells.append("-" if r is None else f"{r[d][k]:.1f}")
        lines.append(cells)
    widths = [max(len(c[i]) for c in [head] + lines) for i in range(len(head))]
    fmt = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    return "\n".join([fmt(head)] + [fmt(c) for c in lines])


# --- reconstruction demo -------------------------------------------------------------

@torch.no_grad()
def demo_reconstruct(model: MaskVLMNet, samples: Sequence[PairedSample], seed: int = 0,
                     trained_losses: Optional[Sequence[str]] = None) -> dict:
    """Predict masked caption tokens from the masked and from the original image.

    Text and image masks come from the ``demo`` stream; unmasked tokens are
    copied verbatim into both reconstructions.
    """
    from .data import default_vocab, detokenize
    from .masking import encoder_patch_mask, mask_image_grid, mask_text
    cfg = model.cfg
    losses = tuple(trained_losses) if trained_losses is not None else cfg.loss_set
    if "MLM" not in losses:
        raise ValueError("checkpoint has no trained text reconstruction (MLM not in its loss set)")
    vocab = default_vocab()
    rng = rng_stream(seed, "demo")
    images, tokens = stack(samples)
    masked, tmask, imask = [], [], []
    for row in tokens:
        m, plan = mask_text(row, cfg.text_mask_ratio, rng)
        masked.append(m)
        tmask.append(plan.text_mask)
        imask.append(mask_image_grid(cfg.mask_grid, cfg.image_mask_ratio, rng))
    masked, tmask, imask = np.stack(masked), np.stack(tmask), np.stack(imask)
    dtype = next(model.parameters()).dtype
    imgs = torch.as_tensor(images, dtype=dtype)
    tok_m = torch.as_tensor(masked)
    pad = tok_m == PAD
    w = model.encode_text(tok_m)
    preds = {}
    for name, hidden in (("mask", torch.as_tensor(encoder_patch_mask(imask, cfg))), ("org", None)):
        v = model.encode_image(imgs, hidden)
        xt = model.cross_encode("text", w, v, query_pad=pad)
        preds[name] = model.classify_tokens(xt).argmax(-1).numpy()
    records = []
    for b in range(len(samples)):
        pos = np.flatnonzero(tmask[b])
        body = slice(1, int((tokens[b] != PAD).sum()) - 1)  # between [START] and [END]
        rec = {"scene_id": int(samples[b].scene_id), "original": detokenize(tokens[b, body], vocab),
               "masked": detokenize(masked[b, body], vocab), "masked_positions": pos.tolist()}
        for name in ("mask", "org"):
            filled = tokens[b].copy()
            filled[pos] = preds[name][b, pos]
            flags = (preds[name][b, pos] == tokens[b, pos]).tolist()
            # a predicted special token is shown verbatim so word positions stay aligned
            rec[f"recon_{name}"] = detokenize(filled[body], vocab)
            rec[f"correct_{name}"] = flags
            rec[f"accuracy_{name}"] = float(np.mean(flags))
        records.append(rec)
    return {"tool_version": TOOL_VERSION, "records": records,
            "mean_accuracy_mask": float(np.mean([r["accuracy_mask"] for r in records])),
            "mean_accuracy_org": float(np.mean([r["accuracy_org"] for r in records]))}


def format_demo(report: dict) -> str:
    out = []
    for r in report["records"]:
        out += [f"scene {r['scene_id']}", f"  Original    : {r['original']}", f"  Masked      : {r['masked']}",
                f"  Recon (mask): {r['recon_mask']}", f"  Recon (org) : {r['recon_org']}", ""]
    out.append(f"mean masked-token accuracy: mask {report['mean_accuracy_mask']:.3f}  "
               f"org {report['mean_accuracy_org']:.3f}")
    return "\n".join(out)
