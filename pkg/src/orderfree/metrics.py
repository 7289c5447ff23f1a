"""Per-class (macro) and overall (micro) precision/recall/F1 over label sets.

All ratios define 0/0 as 0, so degenerate runs (for example every prediction
empty) still evaluate. Per-class means run over all c labels, including
labels absent from the split. Values are fractions in [0, 1]; percent
formatting is explicit at the reporting boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ContractError

__all__ = [
    "ConfusionCounts",
    "accumulate",
    "merge",
    "per_class_prf",
    "overall_prf",
    "f1",
    "evaluate_sets",
    "format_report_line",
]


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def zeros(cls, c: int) -> "ConfusionCounts":
        return cls(np.zeros(c, dtype=np.int64), np.zeros(c, dtype=np.int64), np.zeros(c, dtype=np.int64))

    @property
    def c(self) -> int:
        return self.tp.shape[0]


def accumulate(preds: Sequence[Iterable[int]], truths: Sequence[Iterable[int]], c: int) -> ConfusionCounts:
    """Per-label TP/FP/FN counts over paired predicted and true label sets."""
    if len(preds) != len(truths):
        raise ContractError(f"accumulate: {len(preds)} predictions vs {len(truths)} truths")
    counts = ConfusionCounts.zeros(c)
    for pred, truth in zip(preds, truths):
        pset, tset = set(pred), set(truth)
        for label in pset | tset:
            if not (0 <= label < c):
                raise ContractError(f"accumulate: label {label} out of range [0, {c})")
        for label in pset & tset:
            counts.tp[label] += 1
        for label in pset - tset:
            counts.fp[label] += 1
        for label in tset - pset:
            counts.fn[label] += 1
    return counts


def merge(a: ConfusionCounts, b: ConfusionCounts) -> ConfusionCounts:
    """Counts add across dataset shards."""
    if a.c != b.c:
        raise ContractError(f"merge: label counts differ ({a.c} vs {b.c})")
    return ConfusionCounts(a.tp + b.tp, a.fp + b.fp, a.fn + b.fn)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape[0])
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def per_class_prf(counts: ConfusionCounts) -> tuple[float, float, float]:
    """Macro scores: precision and recall averaged per label, then F1 of the means."""
    precision = float(_ratio(counts.tp, counts.tp + counts.fp).mean())
    recall = float(_ratio(counts.tp, counts.tp + counts.fn).mean())
    return precision, recall, f1(precision, recall)


def overall_prf(counts: ConfusionCounts) -> tuple[float, float, float]:
    """Micro scores: counts pooled over all labels before the ratios."""
    tp, fp, fn = int(counts.tp.sum()), int(counts.fp.sum()), int(counts.fn.sum())
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    return precision, recall, f1(precision, recall)


def f1(p: float, r: float) -> float:
    """Harmonic mean; works on fractions or percents alike. f1(x, 0) = 0."""
    if p < 0.0 or r < 0.0:
        raise ContractError(f"f1: negative input ({p}, {r})")
    if p + r == 0.0:
        return 0.0
    return 2.0 * p * r / (p + r)


def evaluate_sets(
    preds: Sequence[Iterable[int]], truths: Sequence[Iterable[int]], c: int
) -> tuple[float, float, float, float, float, float]:
    """(C-P, C-R, C-F1, O-P, O-R, O-F1) as fractions."""
    counts = accumulate(preds, truths, c)
    return per_class_prf(counts) + overall_prf(counts)


def format_report_line(method: str, scores: Sequence[float]) -> str:
    """Tab-separated report row in percent with one decimal:
    method, C-P, C-R, C-F1, O-P, O-R, O-F1."""
    if len(scores) != 6:
        raise ContractError(f"format_report_line: need 6 scores, got {len(scores)}")
    return "\t".join([method] + [f"{100.0 * s:.1f}" for s in scores])
