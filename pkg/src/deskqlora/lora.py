"""Low-rank adapters over frozen (optionally quantized) linear weights.

The adapted projection is never merged: ``y = W0 x + (alpha/r) B A drop(x)``,
summed over every adapter attached to the layer. Rows of ``x`` are tokens, so
in code the product is written ``x W0^T + s * (drop(x) A^T) B^T``.

Adapter file layout (all little-endian)::

    b"FLRA"  u32 version  u32 n_entries
    per entry: u32 n_in, u32 n_out, u32 r, f32 alpha, f32 dropout, u32 name_len, name (UTF-8)
    per entry: A (r x n_in) then B (n_out x r), row-major, BF16 words

A BF16 word is the upper half of the value's FP32 bit pattern.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, FormatError, RankError
from .numerics import Rng, Tensor, add, as_tensor, bf16_round_array, matmul, mul, reshape, scale, transpose
from .quant import QuantizedTensor

MAGIC = b"FLRA"
VERSION = 1
INIT_STD = 0.02
BF16_BYTES = 2


@dataclass
class LoraAdapter:
    A: Tensor
    B: Tensor
    alpha: float = 32.0
    dropout_p: float = 0.1
    name: str = ""

    def __post_init__(self):
        self.A, self.B = as_tensor(self.A), as_tensor(self.B)
        if self.A.data.ndim != 2 or self.B.data.ndim != 2 or self.B.shape[1] != self.A.shape[0]:
            raise DimensionError(f"adapter factors do not chain: A{self.A.shape} B{self.B.shape}")
        if not 0 <= self.dropout_p < 1:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.r > min(self.n_in, self.n_out):
            raise RankError(f"rank {self.r} exceeds min(n_in={self.n_in}, n_out={self.n_out})")

    @property
    def r(self) -> int:
        return self.A.shape[0]

    @property
    def n_in(self) -> int:
        return self.A.shape[1]

    @property
    def n_out(self) -> int:
        return self.B.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    @property
    def param_count(self) -> int:
        return self.r * (self.n_in + self.n_out)

    def trainable(self) -> "LoraAdapter":
        """Mark A and B as fresh trainable leaves (dropping any accumulated grads)."""
        self.A = Tensor(self.A.data, requires_grad=True, name=f"{self.name}.A")
        self.B = Tensor(self.B.data, requires_grad=True, name=f"{self.name}.B")
        return self


def init_adapter(
    n_in: int,
    n_out: int,
    r: int,
    alpha: float = 32.0,
    dropout_p: float = 0.1,
    rng: Rng | None = None,
    name: str = "",
) -> LoraAdapter:
    """Gaussian A (std 0.02), zero B, so the adapter starts as an exact no-op."""
    if n_in < 1 or n_out < 1:
        raise DimensionError(f"adapter dims must be positive, got n_in={n_in}, n_out={n_out}")
    if r < 1 or r > min(n_in, n_out):
        raise RankError(f"rank must be in [1, {min(n_in, n_out)}], got {r}")
    rng = rng if rng is not None else Rng(0)
    A = rng.normal((r, n_in), INIT_STD)
    return LoraAdapter(A=Tensor(A), B=Tensor(np.zeros((n_out, r))), alpha=alpha, dropout_p=dropout_p, name=name)


class AdaptedLinear:
    """A frozen base weight (n_out x n_in) with any number of attached adapters."""

    def __init__(self, base: QuantizedTensor | Tensor | np.ndarray, adapters: Iterable[LoraAdapter] = ()):
        if isinstance(base, QuantizedTensor):
            dense = base.dense
        else:
            dense = as_tensor(base).data
        if dense.ndim != 2:
            raise DimensionError(f"base weight must be 2-D, got shape {dense.shape}")
        self.base = base
        self._base_t = Tensor(dense.T, frozen=True)
        self.adapters: list[LoraAdapter] = []
        for a in adapters:
            self.attach(a)

    @property
    def n_out(self) -> int:
        return self._base_t.shape[1]

    @property
    def n_in(self) -> int:
        return self._base_t.shape[0]

    def attach(self, adapter: LoraAdapter) -> None:
        if adapter.n_in != self.n_in or adapter.n_out != self.n_out:
            raise DimensionError(
                f"adapter {adapter.name!r} is {adapter.n_out}x{adapter.n_in}, base is {self.n_out}x{self.n_in}"
            )
        self.adapters.append(adapter)

    def base_forward(self, x: Tensor) -> Tensor:
        return matmul(x, self._base_t)


def lora_forward(layer: AdaptedLinear, x, mode: str = "eval", rng: Rng | None = None) -> Tensor:
    """Unmerged adapted projection of the rows of ``x`` (a 1-D ``x`` is one row)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = as_tensor(x)
    vector = x.data.ndim == 1
    if vector:
        x = Tensor(x.data.reshape(1, -1))
    if x.data.ndim != 2 or x.shape[1] != layer.n_in:
        raise DimensionError(f"input shape {x.shape} incompatible with base {layer.n_out}x{layer.n_in}")
    y = layer.base_forward(x)
    for adapter in layer.adapters:
        xin = x
        if mode == "train" and adapter.dropout_p > 0:
            if rng is None:
                raise ValueError("train-mode dropout needs an rng")
            keep = rng.uniform(x.shape) >= adapter.dropout_p
            xin = mul(x, Tensor(keep / (1.0 - adapter.dropout_p)))
        delta = matmul(matmul(xin, transpose(adapter.A)), transpose(adapter.B))
        y = add(y, scale(delta, adapter.scaling))
    return reshape(y, (layer.n_out,)) if vector else y


def merge(W0_dense, adapter: LoraAdapter) -> Tensor:
    """W0 + (alpha/r) B A. Only used as a reference for the unmerged path."""
    W0 = as_tensor(W0_dense)
    if W0.shape != (adapter.n_out, adapter.n_in):
        raise DimensionError(f"W0 shape {W0.shape} vs adapter {adapter.n_out}x{adapter.n_in}")
    return Tensor(W0.data + adapter.scaling * (adapter.B.data @ adapter.A.data))


def adapter_param_count(dims: Iterable[tuple[int, int]], r: int) -> int:
    return sum(r * (n_in + n_out) for n_in, n_out in dims)


def adapter_payload_bytes(adapters: Sequence[LoraAdapter]) -> int:
    return sum(BF16_BYTES * a.param_count for a in adapters)


# ---------------------------------------------------------------------------
# serialization

_ENTRY = struct.Struct("<IIIffI")


def _to_bf16_words(a: np.ndarray) -> bytes:
    f32 = bf16_round_array(a).astype("<f4")
    return (f32.view("<u4") >> 16).astype("<u2").tobytes()


def _from_bf16_words(buf: bytes, shape: tuple[int, int]) -> np.ndarray:
    words = np.frombuffer(buf, dtype="<u2").astype("<u4") << 16
    return words.view("<f4").astype(np.float64).reshape(shape)


def dumps_adapters(adapters: Sequence[LoraAdapter]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(adapters))]
    for a in adapters:
        name = a.name.encode("utf-8")
        out.append(_ENTRY.pack(a.n_in, a.n_out, a.r, a.alpha, a.dropout_p, len(name)))
        out.append(name)
    for a in adapters:
        out.append(_to_bf16_words(a.A.data))
        out.append(_to_bf16_words(a.B.data))
    return b"".join(out)


def loads_adapters(blob: bytes) -> list[LoraAdapter]:
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated adapter file: need {n} bytes for {what} at offset {pos}, have {len(view) - pos}")
        chunk = bytes(view[pos:pos + n])
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad adapter magic at offset 0")
    version, n_entries = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported adapter format version {version} at offset 4")
    headers = []
    for i in range(n_entries):
        n_in, n_out, r, alpha, dropout, name_len = _ENTRY.unpack(take(_ENTRY.size, f"entry {i} header"))
        name_at = pos
        try:
            name = take(name_len, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"entry {i} name is not UTF-8 at offset {name_at}") from exc
        headers.append((n_in, n_out, r, alpha, dropout, name))
    adapters = []
    for n_in, n_out, r, alpha, dropout, name in headers:
        A = _from_bf16_words(take(BF16_BYTES * r * n_in, f"{name!r} A"), (r, n_in))
        B = _from_bf16_words(take(BF16_BYTES * n_out * r, f"{name!r} B"), (n_out, r))
        adapters.append(LoraAdapter(A=Tensor(A, precision="bf16"), B=Tensor(B, precision="bf16"),
                                    alpha=alpha, dropout_p=dropout, name=name))
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after adapter payload at offset {pos}")
    return adapters


def save_adapters(adapters: Sequence[LoraAdapter], path: str | Path) -> int:
    """Write adapters to ``path``; returns the payload (A/B) byte count."""
    Path(path).write_bytes(dumps_adapters(adapters))
    return adapter_payload_bytes(adapters)


def load_adapters(path: str | Path) -> list[LoraAdapter]:
    return loads_adapters(Path(path).read_bytes())


def save_adapter(adapter: LoraAdapter, path: str | Path) -> int:
    return save_adapters([adapter], path)


def load_adapter(path: str | Path) -> LoraAdapter:
    adapters = load_adapters(path)
    if len(adapters) != 1:
        raise FormatError(f"expected a single adapter, file holds {len(adapters)}")
    return adapters[0]
