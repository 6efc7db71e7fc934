"""Adam and 0/1 Adam (frozen variance, 1-bit compressed momentum with error feedback).

0/1 Adam runs in two phases. During warmup it is plain Adam over the
uncompressed, averaged gradient. At ``freeze_step`` the bias-corrected
second moment is snapshotted. From then on each worker updates its momentum
with its local gradient and the momenta are averaged through a 1-bit
compressed allreduce: every worker sends ``sign(c)`` plus one FP64 scale,
where ``c`` is the momentum plus the worker's residual; the server averages
the reconstructions and compresses again with its own residual.

The error-feedback channel works on a fixed-point grid (multiples of
``2**-GRID_EXP``, magnitudes below ``2**GRID_RANGE_EXP``). Every value on it
is exactly representable in FP64 and so are sums and differences of two of
them, so ``transmitted + new_residual == input + residual`` holds bit for bit.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import OptimizerError, ProtocolError, SynchronizationError

GRID_EXP = 40
GRID_RANGE_EXP = 11
_GRID = 2.0**-GRID_EXP
_GRID_LIMIT = 2.0**GRID_RANGE_EXP
SCALE_BITS = 64

Params = Mapping[str, np.ndarray]


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def _ensure(self, params: Params) -> None:
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p, dtype=np.float64)
                self.v[name] = np.zeros_like(p, dtype=np.float64)


@dataclass
class ZeroOneAdamState(AdamState):
    freeze_step: float = math.inf
    phase: str = "warmup"
    v_frozen: dict[str, np.ndarray] = field(default_factory=dict)
    residual_local: dict[str, np.ndarray] = field(default_factory=dict)
    residual_server: dict[str, np.ndarray] = field(default_factory=dict)
    bits_transmitted: int = 0

    def _ensure(self, params: Params) -> None:
        super()._ensure(params)
        for name, p in params.items():
            if name not in self.residual_local:
                self.residual_local[name] = np.zeros_like(p, dtype=np.float64)
                self.residual_server[name] = np.zeros_like(p, dtype=np.float64)


def default_freeze_step(total_steps: int, fraction: float = 0.25) -> int:
    return max(1, math.ceil(fraction * total_steps))


def _check_finite(grads: Params) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")


def _check_shapes(params: Params, grads: Params) -> None:
    if params.keys() != grads.keys():
        raise OptimizerError(f"gradient names {sorted(grads)} do not match parameters {sorted(params)}")
    for name, p in params.items():
        if np.shape(grads[name]) != np.shape(p):
            raise OptimizerError(f"gradient for {name!r} has shape {np.shape(grads[name])}, expected {np.shape(p)}")


def adam_step(state: AdamState, params: Params, grads: Params) -> dict[str, np.ndarray]:
    _check_shapes(params, grads)
    _check_finite(grads)
    state._ensure(params)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        out[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


# ---------------------------------------------------------------------------
# 1-bit compression


def to_grid(x: np.ndarray) -> np.ndarray:
    """Snap values onto the error-feedback grid (round half to even)."""
    x = np.asarray(x, dtype=np.float64)
    snapped = np.rint(x / _GRID) * _GRID
    if snapped.size and np.abs(snapped).max() >= _GRID_LIMIT:
        raise OptimizerError(f"value {np.abs(x).max():g} outside the compression range +-2**{GRID_RANGE_EXP}")
    return snapped


@dataclass(frozen=True)
class SignPacket:
    """What a worker actually sends: one bit per element plus one FP64 scale."""

    bits: bytes
    scale: float
    numel: int

    @property
    def payload_bits(self) -> int:
        return self.numel + SCALE_BITS

    def decode(self, shape) -> np.ndarray:
        signs = np.unpackbits(np.frombuffer(self.bits, dtype=np.uint8), bitorder="little", count=self.numel)
        return (np.where(signs == 1, self.scale, -self.scale)).reshape(shape)


def compress_1bit(u: np.ndarray, residual: np.ndarray) -> tuple[SignPacket, np.ndarray, np.ndarray]:
    """Sign compression with error feedback.

    Returns ``(packet, transmitted, new_residual)`` where
    ``transmitted = scale * sign(c)`` (``sign(0) = +1``), ``c = grid(u) + residual``
    and ``scale`` is ``mean(|c|)`` snapped to the grid.
    """
    u = np.asarray(u, dtype=np.float64)
    residual = np.asarray(residual, dtype=np.float64)
    if u.shape != residual.shape:
        raise OptimizerError(f"residual shape {residual.shape} does not match input {u.shape}")
    c = to_grid(u) + residual
    if c.size and np.abs(c).max() >= _GRID_LIMIT:
        raise OptimizerError("compressed value left the exact-arithmetic range")
    scale = float(to_grid(math.fsum(np.abs(c).ravel()) / c.size)) if c.size else 0.0
    positive = c >= 0
    transmitted = np.where(positive, scale, -scale)
    new_residual = c - transmitted
    packet = SignPacket(np.packbits(positive.ravel(), bitorder="little").tobytes(), scale, int(c.size))
    return packet, transmitted, new_residual


# ---------------------------------------------------------------------------
# collectives


def allreduce_mean(tensors: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> np.ndarray:
    """Weighted elementwise mean, accumulated in list (rank) order."""
    if not tensors:
        raise ProtocolError("allreduce over zero tensors")
    shape = np.shape(tensors[0])
    for i, t in enumerate(tensors):
        if np.shape(t) != shape:
            raise ProtocolError(f"rank {i} contributed shape {np.shape(t)}, rank 0 contributed {shape}")
    if weights is None:
        weights = [1.0] * len(tensors)
    acc = np.zeros(shape)
    for w, t in zip(weights, tensors):
        acc = acc + w * np.asarray(t, dtype=np.float64)
    return acc / float(sum(weights))


def two_sum(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``s + e == a + b`` exactly, with ``s = fl(a + b)``."""
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


class GradientSum:
    """Per-tensor running sums held as unevaluated pairs ``hi + lo`` (double-double).

    The pair carries about 106 significant bits, so the rounded total is the
    same however the examples were grouped before merging. This is what lets
    k workers reproduce a single worker's gradient bit for bit.
    """

    def __init__(self, count: int = 0):
        self.hi: dict[str, np.ndarray] = {}
        self.lo: dict[str, np.ndarray] = {}
        self.count = count

    def add(self, tensors: Mapping[str, np.ndarray], count: int = 1) -> "GradientSum":
        for name, t in tensors.items():
            self._add_pair(name, np.asarray(t, dtype=np.float64), None)
        self.count += count
        return self

    def merge(self, other: "GradientSum") -> "GradientSum":
        for name in other.hi:
            self._add_pair(name, other.hi[name], other.lo[name])
        self.count += other.count
        return self

    def _add_pair(self, name: str, hi: np.ndarray, lo: np.ndarray | None) -> None:
        if name not in self.hi:
            self.hi[name] = hi.copy()
            self.lo[name] = np.zeros_like(hi) if lo is None else lo.copy()
            return
        s, e = two_sum(self.hi[name], hi)
        e = e + self.lo[name] + (0.0 if lo is None else lo)
        self.hi[name] = s + e
        self.lo[name] = e - (self.hi[name] - s)

    def total(self) -> dict[str, np.ndarray]:
        return {name: self.hi[name] + self.lo[name] for name in self.hi}

    def mean(self) -> dict[str, np.ndarray]:
        if self.count == 0:
            raise ProtocolError("mean of an empty gradient sum")
        return {name: t / self.count for name, t in self.total().items()}


class Collective:
    """Blocking collectives for ``k`` simulated workers, one thread per rank.

    Every rank deposits its contribution and waits; all ranks then read the
    same contributions in rank order, so every rank computes the identical
    reduction regardless of thread scheduling.
    """

    def __init__(self, k: int, timeout: float = 120.0):
        if k < 1:
            raise ValueError(f"worker count must be >= 1, got {k}")
        self.k = k
        self._slots: list = [None] * k
        self._barrier = threading.Barrier(k, timeout=timeout) if k > 1 else None
        self.bytes_exchanged = 0
        self._lock = threading.Lock()

    def all_gather(self, rank: int, item) -> list:
        if not 0 <= rank < self.k:
            raise ProtocolError(f"rank {rank} outside [0, {self.k})")
        if self._barrier is None:
            return [item]
        self._slots[rank] = item
        try:
            self._barrier.wait()
            gathered = list(self._slots)
            self._barrier.wait()
        except threading.BrokenBarrierError as exc:
            raise SynchronizationError(f"rank {rank}: collective broken (a peer failed or timed out)") from exc
        return gathered

    def abort(self) -> None:
        if self._barrier is not None:
            self._barrier.abort()

    def count_bytes(self, n: int) -> None:
        with self._lock:
            self.bytes_exchanged += n

    def allreduce_mean(self, rank: int, tensors: Mapping[str, np.ndarray], weight: float = 1.0) -> dict[str, np.ndarray]:
        gathered = self.all_gather(rank, (dict(tensors), float(weight)))
        names = list(tensors)
        for r, (t, _) in enumerate(gathered):
            if list(t) != names:
                raise ProtocolError(f"rank {r} sent tensors {list(t)}, rank {rank} sent {names}")
        if rank == 0:
            self.count_bytes(sum(8 * np.size(t) for d, _ in gathered for t in d.values()))
        weights = [w for _, w in gathered]
        return {n: allreduce_mean([d[n] for d, _ in gathered], weights) for n in names}


    def allreduce_sum(self, rank: int, partial: GradientSum) -> GradientSum:
        """Merge every rank's compensated partial sum in rank order."""
        gathered = self.all_gather(rank, partial)
        names = list(partial.hi)
        for r, g in enumerate(gathered):
            if list(g.hi) != names:
                raise ProtocolError(f"rank {r} sent tensors {list(g.hi)}, rank {rank} sent {names}")
        if rank == 0:
            self.count_bytes(sum(16 * np.size(t) for g in gathered for t in g.hi.values()))
        out = GradientSum()
        for g in gathered:
            out.merge(g)
        return out


# ---------------------------------------------------------------------------
# 0/1 Adam


def zero_one_adam_step(
    state: ZeroOneAdamState,
    params: Params,
    grads: Params,
    comm: Collective | None = None,
    rank: int = 0,
    weight: float = 1.0,
    partial: GradientSum | None = None,
) -> dict[str, np.ndarray]:
    """One synchronized 0/1 Adam step for worker ``rank``.

    ``grads`` is the worker's local gradient; ``weight`` its share of the
    global batch (shard size) used in averaging. When ``partial`` (the
    worker's compensated gradient sum) is given, warmup steps reduce it
    instead, which makes the averaged gradient independent of sharding.
    """
    comm = comm if comm is not None else Collective(1)
    _check_shapes(params, grads)
    _check_finite(grads)
    state._ensure(params)
    tags = comm.all_gather(rank, (state.step, state.phase))
    if len(set(tags)) != 1:
        raise ProtocolError(f"workers disagree on (step, phase): {tags}")

    if state.phase == "warmup":
        if partial is not None:
            averaged = comm.allreduce_sum(rank, partial).mean()
            state.bits_transmitted += sum(2 * SCALE_BITS * np.size(g) for g in grads.values())
        else:
            averaged = comm.allreduce_mean(rank, grads, weight)
            state.bits_transmitted += sum(SCALE_BITS * np.size(g) for g in grads.values())
        out = adam_step(state, params, averaged)
        if state.step >= state.freeze_step:
            bc = 1 - state.beta2**state.step
            state.v_frozen = {n: v / bc for n, v in state.v.items()}
            state.phase = "frozen"
        return out

    state.step += 1
    t = state.step
    b1 = state.beta1
    local_m = {n: b1 * state.m[n] + (1 - b1) * np.asarray(g, dtype=np.float64) for n, g in grads.items()}
    packets = {}
    for name, m in local_m.items():
        packet, _, state.residual_local[name] = compress_1bit(m, state.residual_local[name])
        packets[name] = packet
        state.bits_transmitted += packet.payload_bits
    gathered = comm.all_gather(rank, (packets, float(weight)))
    if rank == 0:
        comm.count_bytes(sum((p.payload_bits + 7) // 8 for d, _ in gathered for p in d.values()))
    weights = [w for _, w in gathered]
    out = {}
    for name, p in params.items():
        shape = np.shape(p)
        server_in = allreduce_mean([d[name].decode(shape) for d, _ in gathered], weights)
        # every rank runs the identical server compression on an identical input
        _, m_avg, state.residual_server[name] = compress_1bit(server_in, state.residual_server[name])
        state.m[name] = m_avg
        m_hat = m_avg / (1 - b1**t)
        out[name] = p - state.lr * m_hat / (np.sqrt(state.v_frozen[name]) + state.eps)
    return out
