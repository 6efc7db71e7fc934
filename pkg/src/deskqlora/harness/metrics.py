"""Containment accuracy and support-weighted F1 over free-text generations."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from ..errors import InputError, LabelError

NONE_CLASS = "<none>"
_WS = re.compile(r"\s+")


def normalize(text: str) -> str:
    return _WS.sub(" ", text.casefold()).strip()


def is_correct(pred: str, gold: str) -> bool:
    return normalize(gold) in normalize(pred)


def accuracy(preds: Sequence[str], golds: Sequence[str]) -> float:
    """Fraction of predictions that contain their gold answer (after normalization)."""
    if len(preds) != len(golds):
        raise InputError(f"{len(preds)} predictions for {len(golds)} gold answers")
    if not golds:
        return 0.0
    return sum(is_correct(p, g) for p, g in zip(preds, golds)) / len(golds)


def map_to_class(pred: str, classes: Sequence[str]) -> str:
    """First class (in the given order) contained in the prediction, else ``NONE_CLASS``."""
    p = normalize(pred)
    for c in classes:
        if normalize(c) in p:
            return c
    return NONE_CLASS


@dataclass
class ClassScore:
    precision: float
    recall: float
    f1: float
    support: int


def per_class_scores(preds: Sequence[str], golds: Sequence[str], classes: Sequence[str]) -> dict[str, ClassScore]:
    if len(preds) != len(golds):
        raise InputError(f"{len(preds)} predictions for {len(golds)} gold answers")
    known = set(classes)
    for g in golds:
        if g not in known:
            raise LabelError(f"gold label {g!r} is not one of {list(classes)}")
    mapped = [map_to_class(p, classes) for p in preds]
    support = Counter(golds)
    predicted = Counter(mapped)
    hits = Counter(g for g, m in zip(golds, mapped) if g == m)
    out = {}
    for c in classes:
        tp = hits[c]
        prec = tp / predicted[c] if predicted[c] else 0.0
        rec = tp / support[c] if support[c] else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        out[c] = ClassScore(prec, rec, f1, support[c])
    return out


def _weighted(scores: dict[str, ClassScore], n: int) -> float:
    return sum(s.f1 * (s.support / n) for s in scores.values()) if n else 0.0


def weighted_f1(preds: Sequence[str], golds: Sequence[str], classes: Sequence[str]) -> float:
    return _weighted(per_class_scores(preds, golds, classes), len(golds))


@dataclass
class EvalResult:
    accuracy: float
    weighted_f1: float | None
    per_class: dict[str, ClassScore]
    n: int
    mean_latency_s: float = 0.0
    predictions: list[str] = field(default_factory=list, repr=False)
    errors: list[tuple[int, str]] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "n": self.n,
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "mean_latency_s": self.mean_latency_s,
            "per_class": {
                c: {"precision": s.precision, "recall": s.recall, "f1": s.f1, "support": s.support}
                for c, s in self.per_class.items()
            },
            "errors": [{"index": i, "error": e} for i, e in self.errors],
        }


def evaluate_texts(preds: Sequence[str], golds: Sequence[str], classes: Sequence[str] | None = None) -> EvalResult:
    """Score generations; F1 is reported only when a class list applies."""
    acc = accuracy(preds, golds)
    if classes is None:
        return EvalResult(acc, None, {}, len(golds), predictions=list(preds))
    scores = per_class_scores(preds, golds, classes)
    return EvalResult(acc, _weighted(scores, len(golds)), scores, len(golds), predictions=list(preds))
