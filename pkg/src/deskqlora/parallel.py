"""Simulated data-parallel training and layer-partitioned pipeline inference.

Data parallelism: ``k`` replicas, each with its own model copy and optimizer
state, run in their own threads and meet only in blocking collectives that
reduce in fixed rank order. Per-example dropout streams are keyed by the
example, not the worker, so results do not depend on ``k``.

Pipeline parallelism: contiguous layer ranges per stage and a fill-drain
forward schedule (stage ``s`` runs micro-batch ``j`` at tick ``s + j``).
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence, TypeVar

import numpy as np

from .errors import PartitionError, ShardingError, SynchronizationError
from .model import ToyModel, block_forward, embed, example_loss, unembed
from .numerics import Rng, Tensor
from .optim import AdamState, Collective, GradientSum, ZeroOneAdamState, adam_step, zero_one_adam_step

T = TypeVar("T")


def shard_batch(batch: Sequence[T], k: int) -> list[list[T]]:
    """Contiguous shards; the first ``len(batch) % k`` shards get one extra item."""
    if k < 1:
        raise ShardingError(f"worker count must be >= 1, got {k}")
    n = len(batch)
    if n < k:
        raise ShardingError(f"cannot shard {n} examples across {k} workers")
    base, extra = divmod(n, k)
    shards, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        shards.append(list(batch[start:start + size]))
        start += size
    return shards


@dataclass(frozen=True)
class Example:
    """A tokenized training pair. ``key`` seeds the example's dropout stream."""

    prompt: tuple[int, ...]
    answer: tuple[int, ...]
    key: int = 0


@dataclass
class Replica:
    model: ToyModel
    optimizer: AdamState


@dataclass
class WorkerGroup:
    replicas: list[Replica]
    seed: int = 0
    steps: int = 0
    worker_seconds: float = 0.0
    comm: Collective = field(init=False)
    last_loss: float = float("nan")

    def __post_init__(self):
        self.comm = Collective(self.k)

    @property
    def k(self) -> int:
        return len(self.replicas)

    @property
    def worker_hours(self) -> float:
        return self.worker_seconds / 3600.0

    @property
    def bits_transmitted(self) -> int:
        """Bits sent by rank 0 (every rank sends the same amount)."""
        return int(getattr(self.replicas[0].optimizer, "bits_transmitted", 0))

    def digests(self) -> list[str]:
        return [r.model.adapter_digest() for r in self.replicas]

    def check_coherent(self) -> None:
        d = self.digests()
        if len(set(d)) != 1:
            bad = [i for i, x in enumerate(d) if x != d[0]]
            raise SynchronizationError(f"replicas {bad} diverged from rank 0")


def make_group(model: ToyModel, k: int, make_optimizer: Callable[[], AdamState], seed: int = 0) -> WorkerGroup:
    """``k`` bitwise-identical replicas of ``model``, each with a fresh optimizer state."""
    if k < 1:
        raise ShardingError(f"worker count must be >= 1, got {k}")
    return WorkerGroup([Replica(model.clone(), make_optimizer()) for _ in range(k)], seed=seed)


def local_gradients(model: ToyModel, shard: Sequence[Example], seed: int, step: int) -> tuple[GradientSum, float]:
    """Compensated sum of per-example gradients over the shard, and the summed loss."""
    params = model.parameter_arrays()
    acc = GradientSum()
    loss_sum = 0.0
    for ex in shard:
        model.set_parameters(params, trainable=True)
        rng = Rng(seed).derive(step, ex.key)
        l = example_loss(model, ex.prompt, ex.answer, "train", rng)
        l.backward()
        loss_sum += l.item()
        acc.add({name: t.grad if t.grad is not None else np.zeros_like(t.data)
                 for name, t in model.trainable_parameters().items()})
    model.set_parameters(params, trainable=False)
    return acc, loss_sum


def ddp_step(group: WorkerGroup, global_batch: Sequence[Example]) -> WorkerGroup:
    """One synchronized data-parallel optimizer step over ``global_batch``."""
    group.check_coherent()
    shards = shard_batch(global_batch, group.k)
    step = group.steps
    losses = [0.0] * group.k

    def work(rank: int) -> None:
        try:
            rep = group.replicas[rank]
            shard = shards[rank]
            partial, loss_sum = local_gradients(rep.model, shard, group.seed, step)
            losses[rank] = loss_sum
            n = len(shard)
            local = partial.mean()
            params = rep.model.parameter_arrays()
            if isinstance(rep.optimizer, ZeroOneAdamState):
                new = zero_one_adam_step(rep.optimizer, params, local, group.comm, rank, weight=n, partial=partial)
            else:
                averaged = group.comm.allreduce_sum(rank, partial).mean()
                new = adam_step(rep.optimizer, params, averaged)
            rep.model.set_parameters(new, trainable=False)
        except BaseException:
            group.comm.abort()
            raise

    t0 = time.perf_counter()
    if group.k == 1:
        work(0)
    else:
        with ThreadPoolExecutor(max_workers=group.k) as pool:
            for fut in [pool.submit(work, r) for r in range(group.k)]:
                fut.result()
    group.worker_seconds += (time.perf_counter() - t0) * group.k
    group.steps += 1
    group.last_loss = sum(losses) / len(global_batch)
    group.check_coherent()
    return group


# ---------------------------------------------------------------------------
# pipeline


@dataclass(frozen=True)
class PipelinePlan:
    stages: tuple[tuple[int, int], ...]
    micro_batches: int = 1

    @property
    def k(self) -> int:
        return len(self.stages)

    @property
    def n_layers(self) -> int:
        return self.stages[-1][1]


def plan_pipeline(n_layers: int, k: int, micro_batches: int = 1) -> PipelinePlan:
    """Balanced contiguous partition; remainder layers go to the earliest stages."""
    if k < 1 or k > n_layers:
        raise PartitionError(f"cannot split {n_layers} layers into {k} stages")
    if micro_batches < 1:
        raise PartitionError(f"micro_batches must be >= 1, got {micro_batches}")
    base, extra = divmod(n_layers, k)
    stages, start = [], 0
    for s in range(k):
        size = base + (1 if s < extra else 0)
        stages.append((start, start + size))
        start += size
    return PipelinePlan(tuple(stages), micro_batches)


def pipeline_schedule(m: int, k: int) -> list[tuple[int, int, int]]:
    """Fill-drain forward schedule as (tick, stage, micro_batch), sorted by tick then stage."""
    if m < 1 or k < 1:
        raise PartitionError(f"need m >= 1 and k >= 1, got m={m}, k={k}")
    return sorted((s + j, s, j) for s in range(k) for j in range(m))


def makespan(schedule: Sequence[tuple[int, int, int]]) -> int:
    return max(t for t, _, _ in schedule) + 1 if schedule else 0


def activation_elements(model: ToyModel, seqs: Sequence[Sequence[int]], first: int, last: int, with_head: bool) -> int:
    """Activations a stage holds while running layers [first, last) on ``seqs``."""
    tokens = sum(len(s) for s in seqs)
    n = tokens * model.arch.d_model * (last - first + 1)
    if with_head:
        n += tokens * model.arch.vocab_size
    return n


@dataclass
class PipelineRun:
    logits: list[Tensor]
    schedule: list[tuple[int, int, int]]
    makespan: int
    occupancy: dict[int, list[int]]  # stage -> ticks it was busy
    peak_activations: dict[int, int]  # stage -> elements


def run_pipeline(model: ToyModel, plan: PipelinePlan, batch: Sequence[Sequence[int]]) -> PipelineRun:
    if plan.n_layers != model.arch.n_layers or plan.stages[0][0] != 0:
        raise PartitionError(f"plan covers layers [0, {plan.n_layers}) but model has {model.arch.n_layers}")
    for (a0, a1), (b0, _) in zip(plan.stages, plan.stages[1:]):
        if a1 != b0 or a0 >= a1:
            raise PartitionError(f"stages {plan.stages} are not contiguous and non-empty")
    micro = shard_batch(list(batch), plan.micro_batches)
    sched = pipeline_schedule(plan.micro_batches, plan.k)
    last_stage = plan.k - 1
    hand_off: dict[tuple[int, int], list[Tensor]] = {}
    outputs: dict[int, list[Tensor]] = {}
    occupancy: dict[int, list[int]] = {s: [] for s in range(plan.k)}
    peaks = {s: 0 for s in range(plan.k)}
    for tick, s, j in sched:
        first, last = plan.stages[s]
        seqs = micro[j]
        states = [embed(model, seq) for seq in seqs] if s == 0 else hand_off.pop((s - 1, j))
        for i in range(first, last):
            states = [block_forward(model, i, h) for h in states]
        if s == last_stage:
            outputs[j] = [unembed(model, h) for h in states]
        else:
            hand_off[(s, j)] = states
        occupancy[s].append(tick)
        peaks[s] = max(peaks[s], activation_elements(model, seqs, first, last, s == last_stage))
    logits = [t for j in range(plan.micro_batches) for t in outputs[j]]
    return PipelineRun(logits, sched, makespan(sched), occupancy, peaks)


def pipeline_forward(model: ToyModel, plan: PipelinePlan, batch: Sequence[Sequence[int]]) -> list[Tensor]:
    return run_pipeline(model, plan, batch).logits
