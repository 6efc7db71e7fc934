"""Command line entry point: plan, train, eval, infer, synth."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import DeskQLoraError
from .harness.data import load_jsonl, pattern_task, write_jsonl
from .harness.runner import RunConfig, generate_batch, run_eval, run_finetune
from .model import load_checkpoint
from .planner import plan

# flag dest -> RunConfig field
_FLAG_FIELDS = {
    "arch": "arch",
    "rank": "rank",
    "bits": "bits",
    "seed": "seed",
    "one_shot": "one_shot",
    "workers": "workers",
    "pipeline_stages": "pipeline_stages",
    "lr": "lr",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "grad_accum": "grad_accum",
    "optimizer": "optimizer",
    "codebook": "codebook",
    "eval_bits": "eval_bits",
    "micro_batches": "micro_batches",
    "max_new_tokens": "max_new_tokens",
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with RunConfig fields (flags override it)")
    p.add_argument("--arch")
    p.add_argument("--rank", type=int)
    p.add_argument("--bits", type=int, choices=(4, 8, 16))
    p.add_argument("--codebook", choices=("nf4", "int_absmax"))
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--pipeline-stages", type=int)
    p.add_argument("--micro-batches", type=int)
    p.add_argument("--one-shot", action="store_true", default=None)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--grad-accum", type=int)
    p.add_argument("--optimizer", choices=("zero_one_adam", "adam"))
    p.add_argument("--eval-bits", type=int, choices=(4, 8, 16))
    p.add_argument("--max-new-tokens", type=int)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if getattr(args, "config", None):
        values.update(json.loads(Path(args.config).read_text()))
    for dest, name in _FLAG_FIELDS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[name] = v
    return RunConfig.from_mapping(values)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deskqlora", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="parameter and storage report for an architecture")
    p.add_argument("--arch", default="llama3-8b")
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--bits", type=int, default=4, choices=(4, 8, 16))
    p.add_argument("--json", action="store_true", help="print only the JSON record")

    p = sub.add_parser("train", help="finetune adapters on one or more JSONL datasets")
    _add_run_flags(p)
    p.add_argument("--data", action="append", required=True, help="dataset path; repeat for multi-task")
    p.add_argument("--eval-data", help="held-out JSONL scored after every epoch")
    p.add_argument("--label-map", help="JSON object remapping gold labels")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score a checkpoint on a JSONL dataset")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--classes", help="comma-separated class list for weighted F1")
    p.add_argument("--label-map", help="JSON object remapping gold labels")
    p.add_argument("--out", help="write the evaluation record here")

    p = sub.add_parser("infer", help="greedy generation from a checkpoint")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", action="append", required=True)

    p = sub.add_parser("synth", help="write a synthetic 3-class pattern task as JSONL")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def _label_map(args) -> dict | None:
    return json.loads(args.label_map) if getattr(args, "label_map", None) else None


def cmd_plan(args) -> int:
    report = plan(args.arch, args.rank, args.bits)
    if not args.json:
        print(report.to_text())
    print(json.dumps(report.to_record()))
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    art = run_finetune(args.data, cfg, args.out, eval_path=args.eval_data, label_map=_label_map(args))
    print(json.dumps({
        "adapter": str(art.adapter_path),
        "checkpoint": str(art.checkpoint_path),
        "metrics": str(art.metrics_path),
        "adapter_payload_bytes": art.adapter_payload_bytes,
        "worker_hours": art.result.worker_hours,
        "bits_transmitted": art.result.bits_transmitted,
    }))
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    model = load_checkpoint(args.checkpoint)
    records = load_jsonl(args.data, label_map=_label_map(args))
    classes = args.classes.split(",") if args.classes else sorted({r.output for r in records})
    res = run_eval(model, records, cfg, classes=classes)
    rec = res.to_record()
    if args.out:
        Path(args.out).write_text(json.dumps(rec, indent=2))
    print(json.dumps(rec))
    return 0


def cmd_infer(args) -> int:
    cfg = resolve_config(args)
    model = load_checkpoint(args.checkpoint)
    outs = generate_batch(model, args.prompt, cfg.max_new_tokens or 8, cfg.pipeline_stages, cfg.micro_batches)
    for prompt, out in zip(args.prompt, outs):
        print(json.dumps({"prompt": prompt, "output": out}))
    return 0


def cmd_synth(args) -> int:
    write_jsonl(pattern_task(args.n, args.seed), args.out)
    return 0


COMMANDS = {"plan": cmd_plan, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "synth": cmd_synth}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DeskQLoraError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
