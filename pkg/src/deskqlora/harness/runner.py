"""Training and evaluation orchestration.

Defaults follow the reference finetuning recipe: 0/1 Adam, lr 1e-4,
LoRA alpha 32, dropout 0.1, evaluation on an 8-bit base. Toy-scale runs
typically need a larger learning rate.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from ..errors import ConfigError, DeskQLoraError
from ..lora import save_adapters
from ..model import ToyModel, build_model, decode, encode, forward, get_arch, save_checkpoint
from ..optim import AdamState, ZeroOneAdamState, default_freeze_step
from ..parallel import Example, ddp_step, make_group, pipeline_forward, plan_pipeline
from ..quant import QuantConfig
from .data import TaskRecord, assemble_prompt, load_jsonl, mix_tasks, query_prompt
from .metrics import EvalResult, evaluate_texts

log = logging.getLogger(__name__)

OPTIMIZERS = ("zero_one_adam", "adam")


@dataclass
class RunConfig:
    arch: str = "toy"
    rank: int = 4
    bits: int = 4
    codebook: str = "nf4"
    block_size: int = 64
    alpha: float = 32.0
    dropout: float = 0.1
    lr: float = 1e-4
    epochs: int = 4
    batch_size: int = 16  # per worker
    grad_accum: int = 1
    workers: int = 1
    optimizer: str = "zero_one_adam"
    freeze_fraction: float = 0.25
    seed: int = 0
    one_shot: bool = False
    eval_bits: int | None = 8
    max_new_tokens: int | None = None
    pipeline_stages: int = 1
    micro_batches: int = 1

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.bits not in (4, 8, 16):
            raise ConfigError(f"bits must be 4, 8 or 16, got {self.bits}")
        if self.epochs < 0 or self.batch_size < 1 or self.grad_accum < 1 or self.workers < 1:
            raise ConfigError("epochs must be >= 0; batch_size, grad_accum and workers >= 1")

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def quant_config(self, bits: int | None = None) -> QuantConfig | None:
        bits = self.bits if bits is None else bits
        if bits == 16:
            return None
        codebook = self.codebook if bits == 4 else "int_absmax"
        return QuantConfig(bits, self.block_size, codebook)

    @property
    def global_batch(self) -> int:
        return self.batch_size * self.workers * self.grad_accum


@dataclass
class EpochLog:
    epoch: int
    loss: float
    accuracy: float | None
    weighted_f1: float | None
    worker_hours: float
    bits_transmitted: int


@dataclass
class TrainResult:
    model: ToyModel
    history: list[EpochLog]
    worker_hours: float
    bits_transmitted: int
    base_digest: str


@dataclass
class RunArtifact:
    out_dir: Path
    adapter_path: Path
    checkpoint_path: Path
    metrics_path: Path
    adapter_payload_bytes: int
    result: TrainResult


def _examples(records: Sequence[TaskRecord], epoch: int) -> list[Example]:
    n = len(records)
    return [
        Example(tuple(encode(assemble_prompt(r))), tuple(encode(r.output)), key=epoch * n + i)
        for i, r in enumerate(records)
    ]


def _batches(cfg: RunConfig, n: int) -> list[tuple[int, int]]:
    """Global batch bounds for one epoch; a tail smaller than the worker count is dropped."""
    size = cfg.global_batch
    out = []
    for start in range(0, n, size):
        stop = min(start + size, n)
        if stop - start >= cfg.workers:
            out.append((start, stop))
    return out


def _make_optimizer(cfg: RunConfig, total_steps: int):
    if cfg.optimizer == "adam":
        return lambda: AdamState(lr=cfg.lr)
    freeze = default_freeze_step(total_steps, cfg.freeze_fraction) if total_steps else math.inf
    return lambda: ZeroOneAdamState(lr=cfg.lr, freeze_step=freeze)


def finetune(
    records: Sequence[TaskRecord],
    cfg: RunConfig,
    eval_records: Sequence[TaskRecord] | None = None,
    classes: Sequence[str] | None = None,
) -> TrainResult:
    """Data-parallel finetuning of a freshly built model on ``records``."""
    model = build_model(get_arch(cfg.arch), cfg.quant_config(), cfg.rank, cfg.alpha, cfg.dropout, cfg.seed)
    base_digest = model.base_digest()
    batches = _batches(cfg, len(records))
    total_steps = cfg.epochs * len(batches)
    group = make_group(model, cfg.workers, _make_optimizer(cfg, total_steps), seed=cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 5, epoch]).permutation(len(records))
        examples = _examples([records[i] for i in order], epoch)
        losses = []
        for start, stop in batches:
            ddp_step(group, examples[start:stop])
            losses.append(group.last_loss)
        trained = group.replicas[0].model
        if trained.base_digest() != base_digest:
            raise DeskQLoraError("frozen base weights changed during training")
        acc = f1 = None
        if eval_records:
            res = run_eval(trained, eval_records, cfg, classes=classes)
            acc, f1 = res.accuracy, res.weighted_f1
        entry = EpochLog(epoch, float(np.mean(losses)) if losses else float("nan"), acc, f1,
                         group.worker_hours, group.bits_transmitted)
        log.info("epoch %d loss %.4f accuracy %s", epoch, entry.loss, acc)
        history.append(entry)
    final = group.replicas[0].model
    final.set_parameters(final.parameter_arrays(), trainable=False)
    return TrainResult(final, history, group.worker_hours, group.bits_transmitted, base_digest)


def run_finetune(
    data_paths: Sequence[str | Path],
    cfg: RunConfig,
    out_dir: str | Path,
    eval_path: str | Path | None = None,
    label_map: Mapping[str, str] | None = None,
) -> RunArtifact:
    """Single-task (one path) or multi-task (several paths, pooled and shuffled) finetuning."""
    if not data_paths:
        raise ConfigError("at least one dataset path is required")
    try:
        datasets = [load_jsonl(p, label_map=label_map) for p in data_paths]
        records = mix_tasks(datasets, cfg.seed)
        eval_records = load_jsonl(eval_path, label_map=label_map) if eval_path else None
    except DeskQLoraError as exc:
        raise type(exc)(f"loading data: {exc}") from exc
    classes = sorted({r.output for r in records}) if eval_records else None
    try:
        result = finetune(records, cfg, eval_records, classes)
    except DeskQLoraError as exc:
        raise type(exc)(f"training: {exc}") from exc

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    adapter_path = out / "adapter.flra"
    ckpt_path = out / "model.ckpt"
    metrics_path = out / "metrics.jsonl"
    payload = save_adapters(result.model.adapters(), adapter_path)
    save_checkpoint(result.model, ckpt_path)
    with metrics_path.open("w") as fh:
        for entry in result.history:
            fh.write(json.dumps(asdict(entry)) + "\n")
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2))
    return RunArtifact(out, adapter_path, ckpt_path, metrics_path, payload, result)


# ---------------------------------------------------------------------------
# inference


def rebase(model: ToyModel, quant: QuantConfig | None) -> ToyModel:
    """Rebuild the base weights from the model's seed at a different precision, keeping its adapters."""
    if quant == model.quant:
        return model
    fresh = build_model(model.arch, quant, model.r, model.alpha, model.dropout, model.seed)
    fresh.set_parameters(model.parameter_arrays(), trainable=False)
    return fresh


def generate_batch(
    model: ToyModel,
    prompts: Sequence[str],
    max_new_tokens: int,
    pipeline_stages: int = 1,
    micro_batches: int = 1,
) -> list[str]:
    """Greedy decoding for a batch of prompts, optionally through a layer pipeline."""
    max_seq = model.arch.max_seq
    seqs = [encode(p) for p in prompts]
    new: list[list[int]] = [[] for _ in prompts]
    plan = None
    if pipeline_stages > 1 or micro_batches > 1:
        plan = plan_pipeline(model.arch.n_layers, pipeline_stages, min(micro_batches, len(prompts)))
    for _ in range(max_new_tokens):
        windows = [s[-max_seq:] for s in seqs]
        if plan is not None:
            logits = pipeline_forward(model, plan, windows)
        else:
            logits = [forward(model, w) for w in windows]
        for i, lg in enumerate(logits):
            nxt = int(np.argmax(lg.data[-1]))
            seqs[i].append(nxt)
            new[i].append(nxt)
    return [decode(n) for n in new]


def run_eval(
    model: ToyModel,
    records: Sequence[TaskRecord],
    cfg: RunConfig | None = None,
    classes: Sequence[str] | None = None,
    one_shot: bool | None = None,
) -> EvalResult:
    """Greedy-decode every record and score containment accuracy and weighted F1.

    With one-shot prompting the first record serves as the worked example and
    the remaining records are scored.
    """
    cfg = cfg or RunConfig()
    one_shot = cfg.one_shot if one_shot is None else one_shot
    records = list(records)
    shot = None
    if one_shot and records:
        shot, records = records[0], records[1:]
    if cfg.eval_bits is not None:
        model = rebase(model, cfg.quant_config(cfg.eval_bits))
    max_new = cfg.max_new_tokens or (max((len(encode(r.output)) for r in records), default=1) + 1)
    preds: list[str] = []
    errors: list[tuple[int, str]] = []
    t0 = time.perf_counter()
    for i, rec in enumerate(records):
        try:
            (text,) = generate_batch(model, [assemble_prompt(rec, shot)], max_new)
        except DeskQLoraError as exc:
            errors.append((i, str(exc)))
            text = ""
        preds.append(text)
    elapsed = time.perf_counter() - t0
    golds = [r.output for r in records]
    if classes is not None:
        classes = list(classes)
    result = evaluate_texts(preds, golds, classes)
    result.errors = errors
    result.mean_latency_s = elapsed / len(records) if records else 0.0
    return result


__all__ = [
    "RunArtifact",
    "RunConfig",
    "TrainResult",
    "finetune",
    "generate_batch",
    "query_prompt",
    "rebase",
    "run_eval",
    "run_finetune",
]
