"""A small decoder-only transformer with frozen quantized weights and LoRA on q, k, v.

Only the adapters train. Sequences are processed one at a time, so a
sequence's logits never depend on which other sequences share its batch.
That is what makes pipeline and data-parallel execution reproduce the
single-device numbers exactly.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError, RankError, VocabularyError
from .lora import AdaptedLinear, LoraAdapter, dumps_adapters, init_adapter, lora_forward, loads_adapters
from .numerics import (
    Rng,
    Tensor,
    add,
    bf16_round_array,
    causal_attention,
    cross_entropy,
    matmul,
    relu,
    rms_norm,
    take_rows,
)
from .quant import QuantConfig, QuantizedTensor, quantize

MAX_DESK_D_MODEL = 256
MAX_DESK_VOCAB = 4096


@dataclass(frozen=True)
class ArchConfig:
    n_layers: int
    d_model: int
    d_kv: int
    n_heads: int
    vocab_size: int
    max_seq: int
    d_ff: int = 0
    preset_id: str | None = None

    def __post_init__(self):
        for name in ("n_layers", "d_model", "d_kv", "n_heads", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_kv > self.d_model:
            raise ConfigError(f"d_kv={self.d_kv} exceeds d_model={self.d_model}")
        head_dim = self.d_model // self.n_heads
        if self.d_kv % head_dim or self.n_heads % (self.d_kv // head_dim):
            raise ConfigError(f"d_kv={self.d_kv} must be a whole number of kv heads dividing n_heads")
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 2 * self.d_model)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def lora_dims(self) -> list[tuple[int, int]]:
        """(n_in, n_out) of every adapted projection, layer by layer: q, k, v."""
        per_layer = [(self.d_model, self.d_model), (self.d_model, self.d_kv), (self.d_model, self.d_kv)]
        return per_layer * self.n_layers


PRESETS: dict[str, ArchConfig] = {
    "llama3-8b": ArchConfig(32, 4096, 1024, 32, 128256, 8192, 14336, "llama3-8b"),
    "llama3-70b": ArchConfig(80, 8192, 1024, 64, 128256, 8192, 28672, "llama3-70b"),
    "toy": ArchConfig(2, 32, 16, 4, 256, 48, 64, "toy"),
}


def get_arch(name: str) -> ArchConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown arch preset {name!r}; choose from {sorted(PRESETS)}") from None


PROJECTIONS = ("q", "k", "v")
FrozenWeight = QuantizedTensor | Tensor


def dense_of(w: FrozenWeight) -> np.ndarray:
    return w.dense if isinstance(w, QuantizedTensor) else w.data


@dataclass
class Block:
    q: AdaptedLinear
    k: AdaptedLinear
    v: AdaptedLinear
    o: FrozenWeight
    up: FrozenWeight
    down: FrozenWeight
    _frozen_t: dict = field(default_factory=dict, repr=False)

    def frozen_t(self, name: str) -> Tensor:
        t = self._frozen_t.get(name)
        if t is None:
            t = Tensor(dense_of(getattr(self, name)).T, frozen=True)
            self._frozen_t[name] = t
        return t


@dataclass
class ToyModel:
    arch: ArchConfig
    quant: QuantConfig | None  # None keeps frozen weights as dense bf16
    embedding: FrozenWeight
    positions: FrozenWeight
    layers: list[Block]
    head: FrozenWeight
    r: int
    alpha: float
    dropout: float
    seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def _dense(self, name: str, transpose: bool = False) -> Tensor:
        key = (name, transpose)
        t = self._cache.get(key)
        if t is None:
            arr = dense_of(getattr(self, name))
            t = Tensor(arr.T if transpose else arr, frozen=True)
            self._cache[key] = t
        return t

    def adapters(self) -> list[LoraAdapter]:
        return [a for blk in self.layers for p in PROJECTIONS for a in getattr(blk, p).adapters]

    def trainable_parameters(self) -> dict[str, Tensor]:
        out = {}
        for a in self.adapters():
            out[f"{a.name}.A"] = a.A
            out[f"{a.name}.B"] = a.B
        return out

    def trainable_count(self) -> int:
        return sum(a.param_count for a in self.adapters())

    def set_parameters(self, params: dict[str, np.ndarray], trainable: bool = True) -> None:
        for a in self.adapters():
            a.A = Tensor(params[f"{a.name}.A"], requires_grad=trainable, name=f"{a.name}.A")
            a.B = Tensor(params[f"{a.name}.B"], requires_grad=trainable, name=f"{a.name}.B")

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.trainable_parameters().items()}

    def frozen_weights(self) -> dict[str, FrozenWeight]:
        out = {"embedding": self.embedding, "positions": self.positions, "head": self.head}
        for i, blk in enumerate(self.layers):
            for p in PROJECTIONS:
                out[f"layers.{i}.{p}"] = getattr(blk, p).base
            for p in ("o", "up", "down"):
                out[f"layers.{i}.{p}"] = getattr(blk, p)
        return out

    def base_digest(self) -> str:
        """Hash of every frozen payload; constant for the life of a run."""
        h = hashlib.sha256()
        for name, w in self.frozen_weights().items():
            h.update(name.encode())
            if isinstance(w, QuantizedTensor):
                h.update(w.digest().encode())
            else:
                h.update(np.ascontiguousarray(w.data).tobytes())
        return h.hexdigest()

    def adapter_digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.parameter_arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def clone(self) -> "ToyModel":
        """Independent replica: frozen weights are shared (immutable), adapters copied."""
        layers = []
        for blk in self.layers:
            projs = {}
            for p in PROJECTIONS:
                src = getattr(blk, p)
                lin = AdaptedLinear.__new__(AdaptedLinear)
                lin.base, lin._base_t = src.base, src._base_t
                lin.adapters = [replace(a, A=Tensor(a.A.data), B=Tensor(a.B.data)) for a in src.adapters]
                projs[p] = lin
            layers.append(Block(o=blk.o, up=blk.up, down=blk.down, _frozen_t=blk._frozen_t, **projs))
        return replace(self, layers=layers, _cache=self._cache)


def _freeze(w: np.ndarray, quant: QuantConfig | None) -> FrozenWeight:
    if quant is None:
        return Tensor(bf16_round_array(w), precision="bf16", frozen=True)
    return quantize(Tensor(w), quant)


def build_model(
    arch: ArchConfig,
    quant: QuantConfig | None,
    r: int,
    alpha: float = 32.0,
    dropout: float = 0.1,
    seed: int = 0,
) -> ToyModel:
    """Sample base weights from ``seed``, freeze/quantize them and attach fresh adapters."""
    if arch.d_model > MAX_DESK_D_MODEL or arch.vocab_size > MAX_DESK_VOCAB:
        raise ConfigError(
            f"arch {arch.preset_id or ''} (d_model={arch.d_model}, vocab={arch.vocab_size}) is too large to "
            "materialise; use the planner for full-size presets"
        )
    if r < 1:
        raise RankError(f"rank must be >= 1, got {r}")
    base_rng = Rng(seed).derive(0)
    lora_rng = Rng(seed).derive(1)
    d, dkv, dff = arch.d_model, arch.d_kv, arch.d_ff

    def w(n_out, n_in):
        return _freeze(base_rng.normal((n_out, n_in), 1.0 / np.sqrt(n_in)), quant)

    embedding = _freeze(base_rng.normal((arch.vocab_size, d)), quant)
    positions = _freeze(base_rng.normal((arch.max_seq, d), 0.5), quant)
    layers = []
    for i in range(arch.n_layers):
        projs = {}
        for p, n_out in zip(PROJECTIONS, (d, dkv, dkv)):
            lin = AdaptedLinear(w(n_out, d))
            lin.attach(init_adapter(d, n_out, r, alpha, dropout, lora_rng, name=f"layers.{i}.{p}"))
            projs[p] = lin
        layers.append(Block(o=w(d, d), up=w(dff, d), down=w(d, dff), **projs))
    head = w(arch.vocab_size, d)
    return ToyModel(arch, quant, embedding, positions, layers, head, r, alpha, dropout, seed)


# ---------------------------------------------------------------------------
# forward pieces (split so a pipeline stage can run a contiguous slice)


def embed(model: ToyModel, token_ids: Sequence[int]) -> Tensor:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise VocabularyError("token_ids must be a non-empty 1-D sequence")
    if ids.min() < 0 or ids.max() >= model.arch.vocab_size:
        raise VocabularyError(f"token id out of range [0, {model.arch.vocab_size})")
    if ids.size > model.arch.max_seq:
        raise VocabularyError(f"sequence length {ids.size} exceeds max_seq={model.arch.max_seq}")
    tok = take_rows(model._dense("embedding"), ids)
    pos = take_rows(model._dense("positions"), np.arange(ids.size))
    return add(tok, pos)


def block_forward(model: ToyModel, index: int, h: Tensor, mode: str = "eval", rng: Rng | None = None) -> Tensor:
    blk = model.layers[index]
    x = rms_norm(h)
    q = lora_forward(blk.q, x, mode, rng)
    k = lora_forward(blk.k, x, mode, rng)
    v = lora_forward(blk.v, x, mode, rng)
    attn = causal_attention(q, k, v, model.arch.n_heads)
    h = add(h, matmul(attn, blk.frozen_t("o")))
    x = rms_norm(h)
    return add(h, matmul(relu(matmul(x, blk.frozen_t("up"))), blk.frozen_t("down")))


def unembed(model: ToyModel, h: Tensor) -> Tensor:
    return matmul(rms_norm(h), model._dense("head", transpose=True))


def forward(model: ToyModel, token_ids: Sequence[int], mode: str = "eval", rng: Rng | None = None) -> Tensor:
    """Logits (seq x vocab) for one token sequence."""
    h = embed(model, token_ids)
    for i in range(model.arch.n_layers):
        h = block_forward(model, i, h, mode, rng)
    return unembed(model, h)


def forward_batch(model: ToyModel, batch: Sequence[Sequence[int]]) -> list[Tensor]:
    return [forward(model, seq) for seq in batch]


def loss(logits: Tensor, target_ids: Sequence[int], mask: Sequence[bool] | None = None) -> Tensor:
    """Mean token cross-entropy (over ``mask``-selected positions)."""
    return cross_entropy(logits, target_ids, mask)


def example_loss(
    model: ToyModel, prompt: Sequence[int], answer: Sequence[int], mode: str = "train", rng: Rng | None = None
) -> Tensor:
    """Causal LM loss on the answer span only; prompt positions are masked out."""
    seq = list(prompt) + list(answer)
    if len(answer) == 0:
        raise ValueError("answer must be non-empty")
    seq = seq[-(model.arch.max_seq + 1):]
    inputs, targets = seq[:-1], seq[1:]
    n_answer = len(answer)
    mask = [j >= len(targets) - n_answer for j in range(len(targets))]
    return loss(forward(model, inputs, mode, rng), targets, mask)


def encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode(ids: Sequence[int]) -> str:
    return bytes(int(i) for i in ids).decode("utf-8", errors="replace")


def greedy_generate(model: ToyModel, prompt_ids: Sequence[int], max_new_tokens: int) -> list[int]:
    ids = list(prompt_ids)
    out: list[int] = []
    for _ in range(max_new_tokens):
        window = ids[-model.arch.max_seq:]
        logits = forward(model, window)
        nxt = int(np.argmax(logits.data[-1]))
        ids.append(nxt)
        out.append(nxt)
    return out


# ---------------------------------------------------------------------------
# checkpoint: header, frozen payloads, then an embedded adapter file

CKPT_MAGIC = b"FQCK"
CKPT_VERSION = 1
_CODEBOOK_IDS = {"int_absmax": 0, "nf4": 1}
_ARCH = struct.Struct("<7I")
_RUN = struct.Struct("<IIIIffQ")


def dumps_checkpoint(model: ToyModel) -> bytes:
    a = model.arch
    q = model.quant
    bits, block, book = (16, 0, 0) if q is None else (q.bits, q.block_size, _CODEBOOK_IDS[q.codebook_id])
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    out.append(_ARCH.pack(a.n_layers, a.d_model, a.d_kv, a.n_heads, a.vocab_size, a.max_seq, a.d_ff))
    out.append(_RUN.pack(bits, block, book, model.r, model.alpha, model.dropout, model.seed))
    weights = model.frozen_weights()
    out.append(struct.pack("<I", len(weights)))
    for name, w in weights.items():
        nb = name.encode()
        shape = w.shape
        out.append(struct.pack("<I", len(nb)) + nb + struct.pack(f"<I{len(shape)}I", len(shape), *shape))
        if isinstance(w, QuantizedTensor):
            scales = np.ascontiguousarray(w.scales, dtype="<f4").tobytes()
            payload = w.packed
        else:
            scales = b""
            payload = (w.data.astype("<f4").view("<u4") >> 16).astype("<u2").tobytes()
        out.append(struct.pack("<I", len(scales) // 4) + scales + struct.pack("<Q", len(payload)) + payload)
    blob = dumps_adapters(model.adapters())
    out.append(struct.pack("<Q", len(blob)) + blob)
    return b"".join(out)


def loads_checkpoint(blob: bytes) -> ToyModel:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated checkpoint: need {n} bytes for {what} at offset {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic at offset 0")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset 4")
    arch = ArchConfig(*_ARCH.unpack(take(_ARCH.size, "arch")))
    bits, block, book, r, alpha, dropout, seed = _RUN.unpack(take(_RUN.size, "run config"))
    books = {v: k for k, v in _CODEBOOK_IDS.items()}
    quant = None if bits == 16 else QuantConfig(bits, block, books[book])
    (n_weights,) = struct.unpack("<I", take(4, "weight count"))
    weights: dict[str, FrozenWeight] = {}
    for _ in range(n_weights):
        (nl,) = struct.unpack("<I", take(4, "name length"))
        name = take(nl, "name").decode()
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        (n_scales,) = struct.unpack("<I", take(4, "scale count"))
        scales = np.frombuffer(take(4 * n_scales, "scales"), dtype="<f4").astype(np.float32)
        (n_payload,) = struct.unpack("<Q", take(8, "payload length"))
        payload = take(n_payload, f"{name} payload")
        if quant is None:
            words = np.frombuffer(payload, dtype="<u2").astype("<u4") << 16
            weights[name] = Tensor(words.view("<f4").astype(np.float64).reshape(shape), precision="bf16", frozen=True)
        else:
            scales.flags.writeable = False
            weights[name] = QuantizedTensor(tuple(shape), payload, scales, quant)
    (n_blob,) = struct.unpack("<Q", take(8, "adapter length"))
    adapters = {a.name: a for a in loads_adapters(take(n_blob, "adapters"))}
    if pos != len(blob):
        raise FormatError(f"trailing bytes after checkpoint at offset {pos}")

    layers = []
    for i in range(arch.n_layers):
        projs = {}
        for p in PROJECTIONS:
            lin = AdaptedLinear(weights[f"layers.{i}.{p}"])
            lin.attach(adapters[f"layers.{i}.{p}"])
            projs[p] = lin
        layers.append(Block(o=weights[f"layers.{i}.o"], up=weights[f"layers.{i}.up"],
                            down=weights[f"layers.{i}.down"], **projs))
    return ToyModel(arch, quant, weights["embedding"], weights["positions"], layers, weights["head"],
                    r, alpha, dropout, seed)


def save_checkpoint(model: ToyModel, path: str | Path) -> None:
    Path(path).write_bytes(dumps_checkpoint(model))


def load_checkpoint(path: str | Path) -> ToyModel:
    return loads_checkpoint(Path(path).read_bytes())
