"""Constrained label-sequence decoding.

Labels are drawn from a candidate pool that shrinks by one per step so no
label repeats. Inference is a beam search over label sequences scored by the
product of per-node sigmoid confidences; a path ends when its best remaining
extension falls under the confidence floor or it reaches the length cap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import model as _model
from .autodiff import ContractError, Tensor

__all__ = [
    "CandidatePool",
    "PredictionPath",
    "BeamConfig",
    "pool_select",
    "pool_update",
    "path_probability",
    "beam_search",
    "greedy_decode",
    "greedy_trace",
    "TraceStep",
]


class CandidatePool:
    """Set of label indices still eligible for prediction."""

    __slots__ = ("remaining",)

    def __init__(self, labels: Iterable[int]):
        self.remaining = frozenset(int(l) for l in labels)

    @classmethod
    def full(cls, c: int) -> "CandidatePool":
        return cls(range(c))

    def __len__(self) -> int:
        return len(self.remaining)

    def __contains__(self, label: int) -> bool:
        return label in self.remaining

    def __iter__(self):
        return iter(sorted(self.remaining))

    def __eq__(self, other):
        return isinstance(other, CandidatePool) and self.remaining == other.remaining

    def __repr__(self):
        return f"CandidatePool({sorted(self.remaining)})"


def pool_select(p, pool: CandidatePool) -> int:
    """Index of the largest logit among pool members; ties go to the lowest index."""
    if len(pool) == 0:
        raise ContractError("pool_select: empty candidate pool")
    values = p.data if isinstance(p, Tensor) else np.asarray(p)
    best_label = -1
    best_value = -np.inf
    for label in pool:  # iterates in ascending label order
        if label >= values.shape[0]:
            raise ContractError(f"pool_select: label {label} out of range for {values.shape}")
        if values[label] > best_value:
            best_value = values[label]
            best_label = label
    return best_label


def pool_update(pool: CandidatePool, label: int) -> CandidatePool:
    """Remove the chosen label; it never reappears."""
    if label not in pool:
        raise ContractError(f"pool_update: label {label} not in pool {sorted(pool.remaining)}")
    return CandidatePool(pool.remaining - {label})


def path_probability(node_probs: Sequence[float]) -> float:
    """Product of per-node probabilities, accumulated as a sum of logs."""
    total = 0.0
    for q in node_probs:
        if not (0.0 < q <= 1.0):
            raise ContractError(f"path_probability: node probability {q} outside (0, 1]")
        total += math.log(q)
    return math.exp(total)


@dataclass(frozen=True)
class _Carry:
    """Decoder state dragged along a prediction path (plain arrays, no tape)."""

    h: np.ndarray
    cell: np.ndarray
    v_pred: np.ndarray
    y_hard: np.ndarray
    pool: CandidatePool


@dataclass(frozen=True)
class PredictionPath:
    """An ordered sequence of distinct labels with its cumulative probability."""

    labels: tuple[int, ...]
    node_probs: tuple[float, ...]
    log_p: float
    terminated: bool
    carry: _Carry

    @property
    def p_path(self) -> float:
        return math.exp(self.log_p)


@dataclass(frozen=True)
class BeamConfig:
    beam_width: int = 3
    threshold: float = 0.5
    max_len: int = 1
    threshold_mode: str = "node"  # confidence floor on the node or the whole path

    def __post_init__(self):
        if self.beam_width < 1:
            raise ContractError(f"beam_width must be >= 1, got {self.beam_width}")
        if not (0.0 <= self.threshold <= 1.0):
            raise ContractError(f"threshold must be in [0, 1], got {self.threshold}")
        if self.max_len < 1:
            raise ContractError(f"max_len must be >= 1, got {self.max_len}")
        if self.threshold_mode not in ("node", "path"):
            raise ContractError(f"threshold_mode must be 'node' or 'path', got {self.threshold_mode!r}")


def _rank_key(path: PredictionPath):
    # higher probability first; ties -> lexicographically smaller label
    # sequence, which also prefers the shorter of two prefix-related paths
    return (-path.log_p, path.labels)


def _root(params: _model.ModelParams, fm: _model.FeatureMaps) -> _Carry:
    v_prob = _model.feature_map_forward(fm, params.theta_R).data
    H = params.dims.H
    c = params.dims.c
    return _Carry(
        h=np.zeros(H),
        cell=np.zeros(H),
        v_pred=v_prob,
        y_hard=np.zeros(c),
        pool=CandidatePool.full(c),
    )


def _admissible(log_p: float, node_prob: float, cfg: BeamConfig) -> bool:
    if cfg.threshold_mode == "node":
        return node_prob >= cfg.threshold
    with np.errstate(divide="ignore"):
        ext = math.exp(log_p + float(np.log(node_prob))) if node_prob > 0.0 else 0.0
    return ext >= cfg.threshold


def beam_search(
    params: _model.ModelParams,
    fm: _model.FeatureMaps,
    cfg: BeamConfig,
    attention_on: bool = True,
) -> tuple[set[int], PredictionPath, list[PredictionPath]]:
    """Best-K search over label sequences.

    Keeps at most `beam_width` live paths; each step expands every live path
    over its remaining pool, scoring extensions by the sigmoid confidence of
    the candidate label, and keeps the globally best successors. A path is
    frozen at its current label set when its best admissible extension falls
    under the threshold, or at `max_len`. Returns the label set of the best
    terminated path, that path, and all terminated paths.
    """
    c = params.dims.c
    if cfg.max_len > c:
        raise ContractError(f"max_len {cfg.max_len} exceeds label count {c}")
    with ad.stop_recording():
        V = Tensor(fm.values)
        root = PredictionPath((), (), 0.0, False, _root(params, fm))
        live = [root]
        completed: list[PredictionPath] = []
        while live:
            successors: list[PredictionPath] = []
            for path in live:
                carry = path.carry
                if len(path.labels) >= cfg.max_len or len(carry.pool) == 0:
                    completed.append(replace(path, terminated=True))
                    continue
                h, cell, logits, _alpha, _z = _model.decoder_step(
                    params,
                    V,
                    Tensor(carry.v_pred),
                    Tensor(carry.y_hard),
                    Tensor(carry.h),
                    Tensor(carry.cell),
                    attention_on=attention_on,
                )
                probs = ad.sigmoid(logits).data
                extended = False
                for label in carry.pool:
                    node = float(probs[label])
                    if not _admissible(path.log_p, node, cfg):
                        continue
                    extended = True
                    y_next = carry.y_hard.copy()
                    y_next[label] = 1.0
                    with np.errstate(divide="ignore"):
                        log_node = float(np.log(node)) if node > 0.0 else -math.inf
                    successors.append(
                        PredictionPath(
                            labels=path.labels + (label,),
                            node_probs=path.node_probs + (node,),
                            log_p=path.log_p + log_node,
                            terminated=False,
                            carry=_Carry(h.data, cell.data, probs, y_next, pool_update(carry.pool, label)),
                        )
                    )
                if not extended:
                    completed.append(replace(path, terminated=True))
            successors.sort(key=_rank_key)
            live = successors[: cfg.beam_width]
        best = min(completed, key=_rank_key)
        return set(best.labels), best, completed


def greedy_decode(
    params: _model.ModelParams,
    fm: _model.FeatureMaps,
    threshold: float,
    max_len: int,
    threshold_mode: str = "node",
    attention_on: bool = True,
) -> list[int]:
    """Repeated constrained argmax with the same two stopping rules as beam search."""
    return [step.label for step in greedy_trace(params, fm, threshold, max_len, threshold_mode, attention_on)]


@dataclass(frozen=True)
class TraceStep:
    """One greedy step: the chosen label, its confidence, the attention weights."""

    label: int
    confidence: float
    alpha: np.ndarray


def greedy_trace(
    params: _model.ModelParams,
    fm: _model.FeatureMaps,
    threshold: float,
    max_len: int,
    threshold_mode: str = "node",
    attention_on: bool = True,
) -> list[TraceStep]:
    cfg = BeamConfig(beam_width=1, threshold=threshold, max_len=max_len, threshold_mode=threshold_mode)
    c = params.dims.c
    if cfg.max_len > c:
        raise ContractError(f"max_len {cfg.max_len} exceeds label count {c}")
    with ad.stop_recording():
        V = Tensor(fm.values)
        carry = _root(params, fm)
        log_p = 0.0
        steps: list[TraceStep] = []
        while len(steps) < cfg.max_len and len(carry.pool) > 0:
            h, cell, logits, alpha, _z = _model.decoder_step(
                params,
                V,
                Tensor(carry.v_pred),
                Tensor(carry.y_hard),
                Tensor(carry.h),
                Tensor(carry.cell),
                attention_on=attention_on,
            )
            probs = ad.sigmoid(logits).data
            label = pool_select(logits, carry.pool)
            node = float(probs[label])
            if not _admissible(log_p, node, cfg):
                break
            with np.errstate(divide="ignore"):
                log_p += float(np.log(node)) if node > 0.0 else -math.inf
            steps.append(TraceStep(label=label, confidence=node, alpha=alpha.data.copy()))
            y_next = carry.y_hard.copy()
            y_next[label] = 1.0
            carry = _Carry(h.data, cell.data, probs, y_next, pool_update(carry.pool, label))
        return steps
