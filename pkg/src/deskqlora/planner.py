"""Closed-form capacity planning: trainable LoRA parameters, adapter bytes, weight storage.

Only weight storage is modelled. Activation and optimizer memory depend on
the workload and are not predicted here.

Units: model sizes in decimal GB (1e9 bytes), adapter sizes in MiB (2**20 bytes).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

from .errors import ConfigError
from .lora import BF16_BYTES, adapter_param_count
from .model import PRESETS, ArchConfig, get_arch

# total base parameters per preset; the LoRA counts never depend on these
BASE_PARAMS = {
    "llama3-8b": 8_030_000_000,
    "llama3-70b": 70_560_000_000,
}

PRESET_NOTES = {
    "llama3-70b": (
        "published 70B footprints run ~7% above params*bits/8 "
        "(unquantized embeddings or runtime overhead); this report gives the formula value"
    ),
}

GB = 10**9
MIB = 2**20
BIT_WIDTHS = (16, 8, 4)


def _gb_text(n_bytes: int) -> str:
    # half-up on the exact decimal value, so 4.015e9 bytes reads 4.02 GB
    return str((Decimal(n_bytes) / GB).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def count_lora_params(arch: ArchConfig, r: int) -> int:
    """LoRA on q (d_model->d_model), k and v (d_model->d_kv) in every layer."""
    if r < 0:
        raise ConfigError(f"rank must be non-negative, got {r}")
    return adapter_param_count(arch.lora_dims(), r)


def model_bytes(base_params: int, bits: int) -> int:
    if bits not in BIT_WIDTHS:
        raise ConfigError(f"bits must be one of {BIT_WIDTHS}, got {bits}")
    return base_params * bits // 8


def base_params_of(arch: ArchConfig) -> int:
    if arch.preset_id in BASE_PARAMS:
        return BASE_PARAMS[arch.preset_id]
    return dense_param_count(arch)


def dense_param_count(arch: ArchConfig) -> int:
    """Parameters of the toy architecture built by :func:`deskqlora.model.build_model`."""
    d, dkv, dff, V = arch.d_model, arch.d_kv, arch.d_ff, arch.vocab_size
    per_layer = d * d + 2 * d * dkv + d * d + 2 * d * dff
    return 2 * V * d + arch.max_seq * d + arch.n_layers * per_layer


@dataclass(frozen=True)
class PlanReport:
    arch: str
    r: int
    bits: int
    base_params: int
    trainable_params: int
    adapter_bytes: int
    model_bytes_by_bits: dict[int, int]
    notes: tuple[str, ...] = field(default=())

    @property
    def adapter_mib(self) -> float:
        return self.adapter_bytes / MIB

    def ratio(self, bits: int) -> float:
        """Weight storage at ``bits`` as a percentage of the 16-bit figure."""
        return 100.0 * self.model_bytes_by_bits[bits] / self.model_bytes_by_bits[16]

    @property
    def size_ratio_vs_16bit(self) -> float:
        return self.ratio(self.bits)

    def to_record(self) -> dict:
        return {
            "arch": self.arch,
            "r": self.r,
            "bits": self.bits,
            "base_params": self.base_params,
            "trainable_params": self.trainable_params,
            "adapter_bytes": self.adapter_bytes,
            "model_bytes_16": self.model_bytes_by_bits[16],
            "model_bytes_8": self.model_bytes_by_bits[8],
            "model_bytes_4": self.model_bytes_by_bits[4],
            "ratio_8": round(self.ratio(8), 4),
            "ratio_4": round(self.ratio(4), 4),
            "notes": list(self.notes),
        }

    def to_text(self) -> str:
        rows = [
            ("arch", self.arch),
            ("rank", str(self.r)),
            ("bits", str(self.bits)),
            ("base params", f"{self.base_params:,} ({self.base_params / 1e9:.2f} B)"),
            ("trainable params", f"{self.trainable_params:,} ({self.trainable_params / 1e6:.2f} M)"),
            ("adapter size", f"{self.adapter_bytes:,} B ({self.adapter_mib:.2f} MiB)"),
        ]
        for b in BIT_WIDTHS:
            rows.append((f"weights {b}-bit", f"{_gb_text(self.model_bytes_by_bits[b])} GB ({self.ratio(b):.1f}%)"))
        width = max(len(k) for k, _ in rows)
        lines = [f"{k:<{width}}  {v}" for k, v in rows]
        lines.append("(weight storage only; activations and optimizer state not modelled)")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines)


def plan(arch: ArchConfig | str, r: int, bits: int) -> PlanReport:
    if isinstance(arch, str):
        arch = get_arch(arch)
    if bits not in BIT_WIDTHS:
        raise ConfigError(f"bits must be one of {BIT_WIDTHS}, got {bits}")
    base = base_params_of(arch)
    trainable = count_lora_params(arch, r)
    notes = (PRESET_NOTES[arch.preset_id],) if arch.preset_id in PRESET_NOTES else ()
    return PlanReport(
        arch=arch.preset_id or "custom",
        r=r,
        bits=bits,
        base_params=base,
        trainable_params=trainable,
        adapter_bytes=BF16_BYTES * trainable,
        model_bytes_by_bits={b: model_bytes(base, b) for b in BIT_WIDTHS},
        notes=notes,
    )


__all__ = [
    "PRESETS",
    "PlanReport",
    "base_params_of",
    "count_lora_params",
    "dense_param_count",
    "model_bytes",
    "plan",
]
