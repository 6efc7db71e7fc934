from .data import TaskRecord, assemble_prompt, load_jsonl, mix_tasks, pattern_task, write_jsonl
from .metrics import EvalResult, accuracy, map_to_class, per_class_scores, weighted_f1
from .runner import RunConfig, finetune, generate_batch, run_eval, run_finetune

__all__ = [
    "EvalResult",
    "RunConfig",
    "TaskRecord",
    "accuracy",
    "assemble_prompt",
    "finetune",
    "generate_batch",
    "load_jsonl",
    "map_to_class",
    "mix_tasks",
    "pattern_task",
    "per_class_scores",
    "run_eval",
    "run_finetune",
    "weighted_f1",
    "write_jsonl",
]
