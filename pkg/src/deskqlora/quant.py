"""Block-wise absmax quantization (8-bit and 4-bit) of frozen weights.

Each block of ``block_size`` consecutive elements (row-major) shares one scale,
the block's largest magnitude. Values are mapped to the nearest level of a
symmetric codebook on [-1, 1]. Dequantization multiplies back and rounds to
BF16, the 16-bit compute format.

Codes are packed little-endian: element ``i`` occupies bits
``[i*bits, (i+1)*bits)`` of the byte stream. ``int_absmax`` codes are signed
integers stored in two's complement; ``nf4`` codes are level indices.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from statistics import NormalDist

import numpy as np

from .errors import ConfigError, DomainError, FormatError
from .numerics import Tensor, as_tensor, bf16_round_array

CODEBOOKS = ("int_absmax", "nf4")
SCALE_BYTES = 4

# offset used to build the 4-bit normal-float grid: the outermost quantile
_NF4_OFFSET = 0.9677083


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 8
    block_size: int = 64
    codebook_id: str = "int_absmax"

    def __post_init__(self):
        if self.bits not in (4, 8):
            raise ConfigError(f"bits must be 4 or 8, got {self.bits}")
        if self.block_size < 1:
            raise ConfigError(f"block_size must be positive, got {self.block_size}")
        if self.codebook_id not in CODEBOOKS:
            raise ConfigError(f"unknown codebook {self.codebook_id!r}")
        if self.codebook_id == "nf4" and self.bits != 4:
            raise ConfigError("the nf4 codebook is 4-bit only")


@dataclass(frozen=True, eq=False)
class Codebook:
    """Sorted representative levels on [-1, 1] plus the code assigned to each level."""

    codebook_id: str
    bits: int
    levels: np.ndarray
    codes: np.ndarray  # code stored for levels[i]

    @property
    def signed(self) -> bool:
        return self.codebook_id == "int_absmax"


def int_absmax_codebook(bits: int) -> Codebook:
    qmax = 2 ** (bits - 1) - 1
    codes = np.arange(-qmax, qmax + 1, dtype=np.int64)
    return Codebook("int_absmax", bits, codes / qmax, codes)


def nf4_codebook() -> Codebook:
    """16 normal-quantile levels: 8 positive, 7 negative, exact zero, extremes at +-1."""
    nd = NormalDist()
    pos = [nd.inv_cdf(p) for p in np.linspace(_NF4_OFFSET, 0.5, 9)[:-1]]
    neg = [-nd.inv_cdf(p) for p in np.linspace(_NF4_OFFSET, 0.5, 8)[:-1]]
    raw = np.array(sorted(pos + [0.0] + neg))
    levels = raw / np.abs(raw).max()
    levels[0], levels[-1] = -1.0, 1.0
    return Codebook("nf4", 4, levels, np.arange(16, dtype=np.int64))


def codebook_for(cfg: QuantConfig) -> Codebook:
    if cfg.codebook_id == "nf4":
        return nf4_codebook()
    return int_absmax_codebook(cfg.bits)


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    shape: tuple[int, ...]
    packed: bytes
    scales: np.ndarray = field(repr=False)
    config: QuantConfig

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def codes(self) -> np.ndarray:
        """Unpacked integer codes, one per element."""
        return unpack_codes(self.packed, self.numel, self.config.bits, codebook_for(self.config).signed)

    @cached_property
    def dense(self) -> np.ndarray:
        """Read-only dequantized values; computed once since the tensor is immutable."""
        arr = dequantize(self).data
        return arr

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.shape, self.config)).encode())
        h.update(self.packed)
        h.update(np.ascontiguousarray(self.scales, dtype="<f4").tobytes())
        return h.hexdigest()


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Pack integer codes (signed values use two's complement) into a little-endian bitstream."""
    u = np.asarray(codes, dtype=np.int64) & ((1 << bits) - 1)
    bit_matrix = ((u[:, None] >> np.arange(bits)) & 1).astype(np.uint8)
    return np.packbits(bit_matrix.reshape(-1), bitorder="little").tobytes()


def unpack_codes(packed: bytes, n: int, bits: int, signed: bool) -> np.ndarray:
    expected = (n * bits + 7) // 8
    if len(packed) != expected:
        raise FormatError(f"packed code stream has {len(packed)} bytes, expected {expected} for {n} x {bits}-bit codes")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    raw = np.unpackbits(np.frombuffer(packed, dtype=np.uint8), bitorder="little", count=n * bits)
    u = (raw.reshape(n, bits).astype(np.int64) << np.arange(bits)).sum(axis=1)
    if signed:
        u = np.where(u >= 1 << (bits - 1), u - (1 << bits), u)
    return u


def _nearest_level_index(x: np.ndarray, book: Codebook) -> np.ndarray:
    if book.signed:
        qmax = 2 ** (book.bits - 1) - 1
        # round half to even, as numpy's rint
        code = np.clip(np.rint(x * qmax), -qmax, qmax).astype(np.int64)
        return code + qmax
    levels = book.levels
    mid = (levels[:-1] + levels[1:]) / 2
    left = np.searchsorted(mid, x, side="left")
    right = np.searchsorted(mid, x, side="right")
    # on an exact midpoint pick the smaller-magnitude level
    return np.where(x >= 0, left, right)


def quantize(t: Tensor, cfg: QuantConfig) -> QuantizedTensor:
    t = as_tensor(t)
    flat = t.data.reshape(-1)
    if not np.all(np.isfinite(flat)):
        raise DomainError("cannot quantize non-finite values")
    n = flat.size
    bs = cfg.block_size
    n_blocks = -(-n // bs)
    padded = np.zeros(n_blocks * bs)
    padded[:n] = flat
    blocks = padded.reshape(n_blocks, bs)
    # scales on the bf16 grid (exact in fp32) so the block max reconstructs exactly
    absmax = np.abs(blocks).max(axis=1) if n_blocks else np.zeros(0)
    scales = bf16_round_array(absmax)
    safe = np.where(scales == 0, 1.0, scales)
    normalized = blocks / safe[:, None]
    book = codebook_for(cfg)
    idx = _nearest_level_index(normalized.reshape(-1)[:n], book)
    codes = book.codes[idx]
    return QuantizedTensor(
        shape=tuple(t.shape),
        packed=pack_codes(codes, cfg.bits),
        scales=_readonly(scales.astype(np.float32)),
        config=cfg,
    )


def dequantize(q: QuantizedTensor) -> Tensor:
    """scale * level, rounded to BF16."""
    n = q.numel
    bs = q.config.block_size
    n_blocks = -(-n // bs)
    if len(q.scales) != n_blocks:
        raise FormatError(f"expected {n_blocks} block scales, found {len(q.scales)}")
    book = codebook_for(q.config)
    codes = q.codes()
    if book.signed:
        qmax = 2 ** (book.bits - 1) - 1
        if codes.size and np.abs(codes).max() > qmax:
            raise FormatError(f"code outside the symmetric range +-{qmax}")
        levels = codes / qmax
    else:
        levels = book.levels[codes]
    per_elem = np.repeat(q.scales.astype(np.float64), bs)[:n]
    values = bf16_round_array(per_elem * levels)
    return Tensor(values.reshape(q.shape), precision="bf16")


def packed_bytes(q: QuantizedTensor) -> int:
    """Stored size: packed codes plus 4 bytes per block scale."""
    return len(q.packed) + SCALE_BYTES * len(q.scales)


def packed_bytes_for(numel: int, cfg: QuantConfig) -> int:
    return (numel * cfg.bits + 7) // 8 + SCALE_BYTES * (-(-numel // cfg.block_size))


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a
