"""JSONL task records, prompt assembly and a synthetic labeling task.

Each dataset line is a JSON object with ``input`` and ``output`` strings,
optional ``task_id`` and ``context``; other keys are ignored.

Prompt template (byte-exact)::

    [context + "\\n"]  input + ":"

With a one-shot example, the example's full prompt and answer come first,
followed by a newline: ``<shot prompt><shot output>\\n<query prompt>``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from ..errors import ParseError, SchemaError
from ..numerics import Rng

QUERY_SUFFIX = ":"
SHOT_DELIMITER = "\n"


@dataclass(frozen=True)
class TaskRecord:
    input: str
    output: str
    task_id: str = ""
    context: str | None = None

    def __post_init__(self):
        if not self.input:
            raise SchemaError("record input must be non-empty")
        if not self.output:
            raise SchemaError("record output must be non-empty")


def load_jsonl(
    path: str | Path,
    task_id: str | None = None,
    label_map: Mapping[str, str] | None = None,
) -> list[TaskRecord]:
    """Read one record per line. ``label_map`` rewrites gold outputs (e.g. 7 labels down to 3)."""
    path = Path(path)
    default_task = task_id or path.stem
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed JSON ({exc.msg})", line=lineno) from None
            if not isinstance(obj, dict):
                raise SchemaError(f"{path}:{lineno}: expected a JSON object", line=lineno)
            for key in ("input", "output"):
                if not isinstance(obj.get(key), str) or not obj[key]:
                    raise SchemaError(f"{path}:{lineno}: missing or empty field {key!r}", line=lineno)
            output = obj["output"]
            if label_map:
                output = label_map.get(output, output)
            context = obj.get("context")
            records.append(
                TaskRecord(
                    input=obj["input"],
                    output=output,
                    task_id=str(obj.get("task_id") or default_task),
                    context=context if isinstance(context, str) and context else None,
                )
            )
    return records


def write_jsonl(records: Iterable[TaskRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            row = {k: v for k, v in asdict(rec).items() if v is not None}
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def query_prompt(rec: TaskRecord) -> str:
    prefix = rec.context + "\n" if rec.context else ""
    return prefix + rec.input + QUERY_SUFFIX


def assemble_prompt(rec: TaskRecord, one_shot: TaskRecord | None = None) -> str:
    if one_shot is None:
        return query_prompt(rec)
    return query_prompt(one_shot) + one_shot.output + SHOT_DELIMITER + query_prompt(rec)


def mix_tasks(datasets: Sequence[Sequence[TaskRecord]], seed: int) -> list[TaskRecord]:
    """Concatenate datasets and shuffle with the run seed (multi-task finetuning)."""
    pooled = [rec for ds in datasets for rec in ds]
    order = Rng(seed).derive(11).permutation(len(pooled))
    return [pooled[i] for i in order]


# ---------------------------------------------------------------------------
# synthetic task: one marker character hidden among letters decides the label

PATTERN_LABELS = {"+": "pos", "-": "neg", "=": "neu"}


def pattern_task(n: int, seed: int, length: int = 6, alphabet: str = "abcdefgh") -> list[TaskRecord]:
    rng = Rng(seed).derive(99)
    markers = list(PATTERN_LABELS)
    out = []
    for _ in range(n):
        letters = [alphabet[int(i)] for i in rng.integers(0, len(alphabet), size=length)]
        marker = markers[int(rng.integers(0, len(markers)))]
        letters.insert(int(rng.integers(0, length + 1)), marker)
        out.append(TaskRecord("".join(letters), PATTERN_LABELS[marker], task_id="pattern"))
    return out
