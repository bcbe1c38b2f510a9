"""Command-line entry point: ``maskvlm <subcommand> [options]``.

Exit codes: 0 success, 1 gradient check failed, 2 usage error, 3 invalid
configuration, 4 runtime failure (non-finite loss, I/O, bad checkpoint).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from .config import Config, ConfigError, apply_overrides, check_config, load_config
from .persistence import TOOL_VERSION

EXIT_OK, EXIT_GRADCHECK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3, 4
TASKS = ("retrieval", "vqa", "nlvr", "ve")


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="config file (key = value lines)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field (repeatable)")
    p.add_argument("--seed", type=int, help="seed for every random stream")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    p.add_argument("--checkpoint", type=Path, help="input checkpoint")
    p.add_argument("--data", type=Path, help="corpus directory written by gen-data")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskvlm", description="Joint masked vision-and-language modeling at desk scale")
    parser.add_argument("--version", action="version", version=TOOL_VERSION)
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("gen-data", help="write the synthetic paired corpus")
    _common(p)
    p.add_argument("--n", type=int, default=512, help="number of distinct scenes")

    p = sub.add_parser("pretrain", help="pretrain with the configured loss set")
    _common(p)
    p.add_argument("--n", type=int, default=512, help="corpus size when --data is not given")

    p = sub.add_parser("finetune", help="finetune a pretrained checkpoint")
    _common(p)
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--epochs", type=int, help="override the task's epoch count")
    p.add_argument("--n", type=int, default=512, help="corpus size when --data is not given")
    p.add_argument("--task-train", type=int, default=512, help="task training samples")
    p.add_argument("--task-eval", type=int, default=128, help="task val/test samples")
    p.add_argument("--lr-scale", type=float, default=1.0, help="multiply the task's peak learning rates")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--mode", choices=("retrieval", "zero-shot", "task", "classify"), required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--k-candidates", type=int, help="rerank pool size")
    p.add_argument("--n", type=int, default=512, help="corpus size when --data is not given")
    p.add_argument("--task-eval", type=int, default=128, help="task test samples")
    p.add_argument("--prompt", dest="prompts", action="append", default=[],
                   help="prompt template with {} for the class name (classify mode, repeatable)")

    p = sub.add_parser("ablate", help="loss-set ablation")
    _common(p)
    p.add_argument("--n", type=int, default=128, help="corpus size when --data is not given")
    p.add_argument("--finetune-epochs", type=int, help="retrieval finetuning epochs per row (default: epochs)")

    p = sub.add_parser("demo-reconstruct", help="masked caption reconstruction from masked vs original images")
    _common(p)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--n", type=int, default=512, help="corpus size when --data is not given")

    p = sub.add_parser("grad-check", help="finite-difference gradient check of every loss set")
    _common(p)
    p.add_argument("--threshold", type=float, default=1e-6)
    p.add_argument("--coords", type=int, default=8, help="sampled coordinates per parameter array")
    return parser


def resolve_config(args, base: Config | None = None) -> Config:
    cfg = load_config(args.config) if args.config else (base or Config())
    cfg = apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return check_config(cfg)


def _write_json(path: Path, obj: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _emit(args, name: str, report: dict, cfg: Config) -> dict:
    report = {"tool_version": TOOL_VERSION, "config": cfg.to_dict(), **report}
    _write_json(args.out / name, report)
    print(json.dumps(report, sort_keys=True))
    return report


def _corpus(args, cfg: Config):
    from .data import build_corpus, load_corpus
    if args.data:
        corpus, _ = load_corpus(args.data)
        return corpus
    return build_corpus(args.n, cfg.seed, cfg=cfg)


def _need_checkpoint(args):
    if not args.checkpoint:
        raise UsageError(f"{args.command} needs --checkpoint")
    from .training import model_from_checkpoint
    return model_from_checkpoint(args.checkpoint)


def cmd_gen_data(args) -> int:
    from .data import build_corpus, corpus_hash, save_corpus
    cfg = resolve_config(args)
    corpus = build_corpus(args.n, cfg.seed, cfg=cfg)
    save_corpus(corpus, args.out, cfg, extra={"tool_version": TOOL_VERSION, "config": cfg.to_dict()})
    print(json.dumps({"out": str(args.out), "counts": {k: len(v) for k, v in corpus.items()},
                      "corpus_hash": corpus_hash(corpus)}, sort_keys=True))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .training import model_from_checkpoint, pretrain
    cfg = resolve_config(args)
    model = model_from_checkpoint(args.checkpoint)[0] if args.checkpoint else None
    res = pretrain(cfg, _corpus(args, cfg), args.out, model=model)
    ev = [r for r in res.records if r["kind"] == "eval"]
    _emit(args, "pretrain.summary.json", {"checkpoints": {k: str(v) for k, v in res.checkpoints.items() if v},
                                          "best_epoch": res.best_epoch, "final_val": ev[-1] if ev else None}, cfg)
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .training import FINETUNE_RECIPES, build_task_splits, finetune_retrieval, finetune_task
    if not args.lr_scale > 0:
        print("error: --lr-scale must be positive", file=sys.stderr)
        return EXIT_USAGE
    recipe = FINETUNE_RECIPES[args.task].scaled(args.lr_scale)
    model, _, header = _need_checkpoint(args)
    from .persistence import config_from_header
    cfg = resolve_config(args, config_from_header(header))
    corpus = _corpus(args, cfg)
    parent = str(args.checkpoint)
    if args.task == "retrieval":
        res = finetune_retrieval(cfg, corpus, model, args.out, recipe, args.epochs, parent)
    else:
        datasets = build_task_splits(corpus, args.task, cfg, args.task_train, args.task_eval)
        res = finetune_task(cfg, args.task, datasets, model, args.out, recipe, args.epochs, parent)
    _emit(args, f"finetune_{args.task}.summary.json",
          {"task": args.task, "checkpoints": {k: str(v) for k, v in res.checkpoints.items() if v},
           "best_epoch": res.best_epoch, "start_checkpoint": parent}, cfg)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import retrieve, task_accuracy, zero_shot_classify, zero_shot_eval
    from .data import stack
    model, head, header = _need_checkpoint(args)
    cfg = model.cfg
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    base = {"checkpoint": str(args.checkpoint), "stage": header["manifest"].get("stage"), "mode": args.mode}
    if args.mode == "classify":
        from .evaluation import classification_set
        images, labels, names = classification_set(128, cfg.seed, cfg)
        acc = zero_shot_classify(model, images, labels, names, args.prompts or None)
        _emit(args, "eval.classify.json", {**base, "class_names": list(names), "prompts": args.prompts,
                                           "accuracy": acc}, cfg)
        return EXIT_OK
    corpus = _corpus(args, cfg)
    if args.mode == "task":
        task = header["manifest"].get("task")
        if head is None or task is None:
            raise UsageError("task mode needs a checkpoint written by finetune --task vqa|nlvr|ve")
        from .data import build_task_dataset
        samples = build_task_dataset(corpus[args.split], task, args.task_eval, cfg.seed + 2, cfg)
        _emit(args, "eval.task.json", {**base, "task": task, "accuracy": task_accuracy(model, head, samples)}, cfg)
        return EXIT_OK
    k = cfg.k_candidates if args.k_candidates is None else args.k_candidates
    trained = tuple(cfg.loss_set)
    if args.mode == "zero-shot":
        report = zero_shot_eval(model, corpus[args.split], k, trained_losses=trained)
    else:
        images, tokens = stack(corpus[args.split])
        report = {"evaluable": True,
                  "image_to_text": retrieve(model, images, tokens, "image_to_text", k).to_dict(),
                  "text_to_image": retrieve(model, images, tokens, "text_to_image", k).to_dict()}
    _emit(args, f"eval.{args.mode}.json", {**base, **report}, cfg)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .training import ablate, format_ablation
    cfg = resolve_config(args, Config(epochs=5, warmup_epochs=1))
    report = ablate(cfg, _corpus(args, cfg), args.out, args.finetune_epochs)
    _write_json(args.out / "ablation.json", report)
    text = format_ablation(report)
    (args.out / "ablation.txt").write_text(f"# maskvlm {TOOL_VERSION}\n{text}\n")
    print(text)
    return EXIT_OK


def cmd_demo(args) -> int:
    from .training import demo_reconstruct, format_demo
    model, _, _ = _need_checkpoint(args)
    cfg = model.cfg if args.seed is None else model.cfg.replace(seed=args.seed)
    corpus = _corpus(args, cfg)
    report = demo_reconstruct(model, corpus["test"][:args.samples], cfg.seed)
    report["config"] = cfg.to_dict()
    _write_json(args.out / "demo_reconstruct.json", report)
    text = format_demo(report)
    (args.out / "demo_reconstruct.txt").write_text(f"# maskvlm {TOOL_VERSION}\n{text}\n")
    print(text)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .optim import grad_check_config, grad_check_suite
    cfg = resolve_config(args, grad_check_config())
    suite = grad_check_suite(cfg, seed=cfg.seed, coords_per_array=args.coords)
    failed = False
    report = {}
    for loss_set, entries in suite.items():
        rows = []
        for e in entries:
            bad = e.max_rel_error is not None and e.max_rel_error > args.threshold
            failed |= bad
            rows.append({"name": e.name, "max_rel_error": e.max_rel_error, "coords": e.coords_checked,
                         "status": "FAIL" if bad else ("no gradient" if e.max_rel_error is None else "ok")})
        worst = max((e.max_rel_error for e in entries if e.max_rel_error is not None), default=0.0)
        print(f"{loss_set:<16} worst rel. error {worst:.2e}  {'FAIL' if worst > args.threshold else 'ok'}")
        report[loss_set] = rows
    summary = {"tool_version": TOOL_VERSION, "config": cfg.to_dict(), "threshold": args.threshold,
                  "passed": not failed, "loss_sets": report}
    _write_json(args.out / "grad_check.json", summary)
    return EXIT_GRADCHECK if failed else EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval,
            "ablate": cmd_ablate, "demo-reconstruct": cmd_demo, "grad-check": cmd_grad_check}


def main(argv=None) -> int:
    from .persistence import CheckpointError
    from .training import NonFiniteLoss
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"maskvlm: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"maskvlm: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLoss, CheckpointError, OSError, ValueError, FloatingPointError) as e:
        print(f"maskvlm: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
