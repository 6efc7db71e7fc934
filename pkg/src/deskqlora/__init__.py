"""Quantized-base LoRA finetuning on a small numpy decoder, with simulated data and pipeline parallelism."""

from .errors import DeskQLoraError
from .lora import LoraAdapter, init_adapter, load_adapters, lora_forward, merge, save_adapters
from .model import ArchConfig, ToyModel, build_model, forward, get_arch, load_checkpoint, save_checkpoint
from .numerics import Rng, Tensor, grad
from .optim import AdamState, ZeroOneAdamState, adam_step, compress_1bit, zero_one_adam_step
from .parallel import ddp_step, make_group, plan_pipeline, run_pipeline
from .planner import PlanReport, count_lora_params, plan
from .quant import QuantConfig, QuantizedTensor, dequantize, packed_bytes, quantize

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "ArchConfig",
    "DeskQLoraError",
    "LoraAdapter",
    "PlanReport",
    "QuantConfig",
    "QuantizedTensor",
    "Rng",
    "Tensor",
    "ToyModel",
    "ZeroOneAdamState",
    "adam_step",
    "build_model",
    "compress_1bit",
    "count_lora_params",
    "ddp_step",
    "dequantize",
    "forward",
    "get_arch",
    "grad",
    "init_adapter",
    "load_adapters",
    "load_checkpoint",
    "lora_forward",
    "make_group",
    "merge",
    "packed_bytes",
    "plan",
    "plan_pipeline",
    "quantize",
    "run_pipeline",
    "save_adapters",
    "save_checkpoint",
    "zero_one_adam_step",
]
