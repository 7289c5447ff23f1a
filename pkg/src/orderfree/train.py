"""Two-phase training: the feature head alone first, then joint training of
attention, LSTM, and prediction parameters on the model's own label
selections. Per-instance Adam updates; the feature head stays frozen in
phase two and receives an exactly-zero gradient there.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ShapeError, Tape, Tensor, backward, bce_loss
from .data import DatasetManifest, Instance, label_frequency_order
from .decode import BeamConfig, beam_search, greedy_decode
from .metrics import evaluate_sets
from .model import FeatureHead, ModelDims, ModelParams, feature_logits, init_params, unroll

__all__ = [
    "TrainConfig",
    "AdamState",
    "adam_update",
    "dropout_mask",
    "train_feature_layer",
    "joint_train_step",
    "train_two_phase",
    "TrainResult",
    "tune_threshold",
    "instance_order",
]

# re-exported: masks are consumed inside the unroll, so they live with the
# tensor ops, but they are a training-time concern
from .autodiff import dropout_mask  # noqa: E402  (re-export)

ORDER_MODES = ("confidence", "frequency_first", "rare_first")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.0003
    keep_prob: float = 0.8
    epochs_phase1: int = 5
    epochs_phase2: int = 12
    seed: int = 0
    batch: int = 1
    order_mode: str = "confidence"

    def __post_init__(self):
        # lr == 0 is allowed so "no update" runs stay expressible
        if self.lr < 0.0:
            raise ContractError(f"TrainConfig: lr must be >= 0, got {self.lr}")
        if not (0.0 < self.keep_prob <= 1.0):
            raise ContractError(f"TrainConfig: keep_prob must be in (0, 1], got {self.keep_prob}")
        if self.epochs_phase1 < 1 or self.epochs_phase2 < 1:
            raise ContractError("TrainConfig: epoch counts must be positive")
        if self.batch < 1:
            raise ContractError(f"TrainConfig: batch must be >= 1, got {self.batch}")
        if self.order_mode not in ORDER_MODES:
            raise ContractError(f"TrainConfig: order_mode must be one of {ORDER_MODES}")


class AdamState:
    """First/second moment accumulators per parameter, with bias correction."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._slots: dict[int, list] = {}  # id(param) -> [m, v, t]

    def slot(self, param: Tensor) -> list:
        s = self._slots.get(id(param))
        if s is None:
            s = [np.zeros_like(param.data), np.zeros_like(param.data), 0]
            self._slots[id(param)] = s
        return s


def adam_update(param: Tensor, grad: np.ndarray, state: AdamState, lr: float) -> Tensor:
    """Standard bias-corrected Adam step, applied in place."""
    if grad.shape != param.data.shape:
        raise ShapeError(f"adam_update: grad {grad.shape} vs param {param.data.shape}")
    s = state.slot(param)
    s[2] += 1
    t = s[2]
    s[0] = state.beta1 * s[0] + (1.0 - state.beta1) * grad
    s[1] = state.beta2 * s[1] + (1.0 - state.beta2) * grad * grad
    m_hat = s[0] / (1.0 - state.beta1**t)
    v_hat = s[1] / (1.0 - state.beta2**t)
    param.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param


def instance_order(instance: Instance, global_order: Sequence[int]) -> list[int]:
    """The instance's positive labels sorted by a global label ranking."""
    rank = {label: pos for pos, label in enumerate(global_order)}
    return sorted(instance.positives, key=lambda l: rank[l])


def _dropout_stream(seed: int, epoch: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(3, epoch, index))


def train_feature_layer(
    dataset: DatasetManifest,
    theta_R: FeatureHead,
    cfg: TrainConfig,
    opt: Optional[AdamState] = None,
) -> list[float]:
    """Phase one: Adam on the feature head's summed BCE; the region features
    themselves are fixed inputs. Returns the mean loss per epoch."""
    if dataset.N == 0:
        raise ContractError("train_feature_layer: empty dataset")
    opt = opt or AdamState()
    rng = np.random.default_rng(cfg.seed)
    tensors = [theta_R.W, theta_R.b]
    epoch_losses = []
    for _epoch in range(cfg.epochs_phase1):
        order = rng.permutation(dataset.N)
        total = 0.0
        acc = None
        pending = 0
        for idx in order:
            inst = dataset.instances[int(idx)]
            with Tape() as tape:
                loss = bce_loss(feature_logits(inst.features, theta_R), inst.y)
            grads = backward(tape, loss, tensors)
            total += loss.item()
            acc = grads if acc is None else [a + g for a, g in zip(acc, grads)]
            pending += 1
            if pending == cfg.batch:
                for p, g in zip(tensors, acc):
                    adam_update(p, g / pending, opt, cfg.lr)
                acc, pending = None, 0
        if pending:
            for p, g in zip(tensors, acc):
                adam_update(p, g / pending, opt, cfg.lr)
        epoch_losses.append(total / dataset.N)
    return epoch_losses


def _joint_loss_and_grads(
    instance: Instance,
    params: ModelParams,
    cfg: TrainConfig,
    attention_on: bool,
    forced_order: Optional[Sequence[int]],
    dropout_seed,
) -> tuple[float, list[np.ndarray], list[Tensor]]:
    T = len(instance.positives)
    trainables = params.group_tensors("theta_a", "theta_L", "theta_p")
    with Tape() as tape:
        states = unroll(
            instance.features,
            params,
            T,
            attention_on=attention_on,
            forced_order=forced_order,
            keep_prob=cfg.keep_prob,
            dropout_seed=dropout_seed,
            freeze_feature_head=True,
        )
        total = bce_loss(states[0].p, instance.y)
        for state in states[1:]:
            total = ad.add(total, bce_loss(state.p, instance.y))
    return total.item(), backward(tape, total, trainables), trainables


def joint_train_step(
    instance: Instance,
    params: ModelParams,
    opt: AdamState,
    cfg: TrainConfig,
    attention_on: bool = True,
    forced_order: Optional[Sequence[int]] = None,
    dropout_seed=None,
) -> Optional[float]:
    """Phase-two update on one instance; returns the summed step loss, or
    None for an instance with no positive labels (skipped)."""
    if len(instance.positives) == 0:
        return None
    loss, grads, trainables = _joint_loss_and_grads(
        instance, params, cfg, attention_on, forced_order, dropout_seed
    )
    for p, g in zip(trainables, grads):
        adam_update(p, g, opt, cfg.lr)
    return loss


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    mean_loss: float
    val_cf1: float
    val_of1: float

    def log_line(self) -> str:
        return f"{self.epoch}\t{self.phase}\t{self.mean_loss:.6f}\t{self.val_cf1:.4f}\t{self.val_of1:.4f}"


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochRecord] = field(default_factory=list)
    skipped: int = 0


def max_label_count(ds: DatasetManifest) -> int:
    """Largest number of labels on any instance; the decoding length cap."""
    return max((len(inst.positives) for inst in ds.instances), default=1) or 1


def _validation_scores(
    params: ModelParams, val_ds: DatasetManifest, max_len: int, attention_on: bool
) -> tuple[float, float]:
    preds = [
        greedy_decode(params, inst.features, threshold=0.5, max_len=max_len, attention_on=attention_on)
        for inst in val_ds.instances
    ]
    truths = [inst.positives for inst in val_ds.instances]
    scores = evaluate_sets(preds, truths, val_ds.c)
    return scores[2], scores[5]


def train_two_phase(
    train_ds: DatasetManifest,
    val_ds: DatasetManifest,
    cfg: TrainConfig,
    dims: Optional[ModelDims] = None,
    attention_on: bool = True,
    log_fn: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Run both phases from a fresh seeded initialisation.

    Emits one log line per epoch: epoch, phase, mean loss, validation C-F1,
    validation O-F1 (tab-separated, via `log_fn`).
    """
    if train_ds.N == 0:
        raise ContractError("train_two_phase: empty training set")
    if dims is None:
        dims = ModelDims(c=train_ds.c, k=train_ds.k, m=train_ds.m)
    params = init_params(dims, seed=cfg.seed)
    result = TrainResult(params=params)
    val_len = max_label_count(train_ds)

    def emit(record: EpochRecord):
        result.history.append(record)
        if log_fn is not None:
            log_fn(record.log_line())

    opt1 = AdamState()
    losses = train_feature_layer(train_ds, params.theta_R, cfg, opt1)
    for epoch, mean_loss in enumerate(losses, start=1):
        # feature-head epochs finish before any joint training starts, so
        # validation here reflects the untrained decoder
        cf1, of1 = _validation_scores(params, val_ds, val_len, attention_on)
        emit(EpochRecord(epoch, "feature", mean_loss, cf1, of1))

    forced_global = None
    if cfg.order_mode == "frequency_first":
        forced_global = label_frequency_order(train_ds, "desc")
    elif cfg.order_mode == "rare_first":
        forced_global = label_frequency_order(train_ds, "asc")

    opt2 = AdamState()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(4,)))
    for epoch in range(1, cfg.epochs_phase2 + 1):
        order = rng.permutation(train_ds.N)
        total, n_steps = 0.0, 0
        acc: Optional[list[np.ndarray]] = None
        trainables: Optional[list[Tensor]] = None
        pending = 0
        for idx in order:
            inst = train_ds.instances[int(idx)]
            if len(inst.positives) == 0:
                result.skipped += 1
                continue
            forced = instance_order(inst, forced_global) if forced_global is not None else None
            loss, grads, trainables = _joint_loss_and_grads(
                inst, params, cfg, attention_on, forced, _dropout_stream(cfg.seed, epoch, int(idx))
            )
            total += loss
            n_steps += 1
            acc = grads if acc is None else [a + g for a, g in zip(acc, grads)]
            pending += 1
            if pending == cfg.batch:
                for p, g in zip(trainables, acc):
                    adam_update(p, g / pending, opt2, cfg.lr)
                acc, pending = None, 0
        if pending and trainables is not None:
            for p, g in zip(trainables, acc):
                adam_update(p, g / pending, opt2, cfg.lr)
        mean_loss = total / n_steps if n_steps else float("nan")
        cf1, of1 = _validation_scores(params, val_ds, val_len, attention_on)
        emit(EpochRecord(epoch, "joint", mean_loss, cf1, of1))
    return result


def tune_threshold(
    params: ModelParams,
    val_ds: DatasetManifest,
    grid: Sequence[float],
    base_cfg: BeamConfig,
    attention_on: bool = True,
) -> float:
    """Grid value maximising validation O-F1 under beam search; ties take the
    smaller threshold."""
    if len(grid) == 0:
        raise ContractError("tune_threshold: empty grid")
    if val_ds.N == 0:
        raise ContractError("tune_threshold: empty validation set")
    truths = [inst.positives for inst in val_ds.instances]
    best_thr, best_of1 = None, -1.0
    for thr in sorted(grid):
        cfg = replace(base_cfg, threshold=float(thr))
        preds = [
            beam_search(params, inst.features, cfg, attention_on=attention_on)[0]
            for inst in val_ds.instances
        ]
        of1 = evaluate_sets(preds, truths, val_ds.c)[5]
        if of1 > best_of1:
            best_thr, best_of1 = float(thr), of1
    return best_thr
