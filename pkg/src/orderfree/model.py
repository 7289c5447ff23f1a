"""The attention-LSTM labeller: feature head, soft attention over region
features, an LSTM advanced by its own previous confidences, and a two-layer
prediction head. `decoder_step` is the single step routine shared by the
training unroll and the decoders, so training and inference cannot drift
apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ShapeError, Tensor

__all__ = [
    "ModelDims",
    "FeatureMaps",
    "FeatureHead",
    "AttentionParams",
    "LSTMParams",
    "PredictionHead",
    "ModelParams",
    "StepState",
    "init_params",
    "feature_logits",
    "feature_map_forward",
    "attention_scores",
    "attention_weights",
    "context_vector",
    "lstm_step",
    "predict_step",
    "decoder_step",
    "unroll",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointFormatError",
]

CHECKPOINT_MAGIC = b"OFRNN1\n"


class CheckpointFormatError(ValueError):
    """Checkpoint bytes do not follow the declared layout."""


@dataclass(frozen=True)
class ModelDims:
    """Network sizes: c labels, k features per region, H LSTM units,
    a attention units, H_p prediction hidden units, m regions."""

    c: int
    k: int
    H: int = 64
    a: int = 32
    H_p: int = 64
    m: int = 36

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 1:
                raise ContractError(f"ModelDims.{name} must be positive, got {v}")

    @property
    def lstm_input(self) -> int:
        # concat of previous confidences (c), context (k), hard labels (c)
        return 2 * self.c + self.k

    @property
    def pred_input(self) -> int:
        return 2 * self.c + self.k + self.H


class FeatureMaps:
    """The m region feature vectors of one image, as an (m, k) array."""

    __slots__ = ("values",)

    def __init__(self, values):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"FeatureMaps: need (m, k) with m,k >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractError("FeatureMaps: entries must be finite")
        self.values = arr

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]


@dataclass
class FeatureHead:
    """Linear map from the mean-pooled region feature to per-label logits."""

    W: Tensor  # (c, k)
    b: Tensor  # (c,)


@dataclass
class AttentionParams:
    W_v: Tensor  # (a, k) projects a region vector
    W_h: Tensor  # (a, H) projects the previous hidden state
    b_a: Tensor  # (a,)
    w_a: Tensor  # (a,) scalar projection of the tanh activations


@dataclass
class LSTMParams:
    """Gate weights packed as 4H rows in i, f, g, o order."""

    W_x: Tensor  # (4H, 2c+k)
    W_h: Tensor  # (4H, H)
    b: Tensor  # (4H,)


@dataclass
class PredictionHead:
    W1: Tensor  # (H_p, 2c+k+H)
    b1: Tensor  # (H_p,)
    W2: Tensor  # (c, H_p)
    b2: Tensor  # (c,)


@dataclass
class ModelParams:
    """All four trainable groups plus the sizes they were built for."""

    dims: ModelDims
    theta_R: FeatureHead
    theta_a: AttentionParams
    theta_L: LSTMParams
    theta_p: PredictionHead

    _GROUPS = ("theta_R", "theta_a", "theta_L", "theta_p")
    _FIELDS = {
        "theta_R": ("W", "b"),
        "theta_a": ("W_v", "W_h", "b_a", "w_a"),
        "theta_L": ("W_x", "W_h", "b"),
        "theta_p": ("W1", "b1", "W2", "b2"),
    }

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """(qualified name, tensor) pairs in the declared checkpoint order."""
        out = []
        for group in self._GROUPS:
            holder = getattr(self, group)
            for fname in self._FIELDS[group]:
                out.append((f"{group}.{fname}", getattr(holder, fname)))
        return out

    def group_tensors(self, *groups: str) -> list[Tensor]:
        tensors = []
        for group in groups:
            if group not in self._GROUPS:
                raise ContractError(f"unknown parameter group {group!r}")
            holder = getattr(self, group)
            tensors.extend(getattr(holder, fname) for fname in self._FIELDS[group])
        return tensors

    def all_tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def copy(self) -> "ModelParams":
        return ModelParams(
            dims=self.dims,
            theta_R=FeatureHead(self.theta_R.W.copy(), self.theta_R.b.copy()),
            theta_a=AttentionParams(
                self.theta_a.W_v.copy(),
                self.theta_a.W_h.copy(),
                self.theta_a.b_a.copy(),
                self.theta_a.w_a.copy(),
            ),
            theta_L=LSTMParams(
                self.theta_L.W_x.copy(), self.theta_L.W_h.copy(), self.theta_L.b.copy()
            ),
            theta_p=PredictionHead(
                self.theta_p.W1.copy(),
                self.theta_p.b1.copy(),
                self.theta_p.W2.copy(),
                self.theta_p.b2.copy(),
            ),
        )


def _expected_shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
    c, k, H, a, H_p = dims.c, dims.k, dims.H, dims.a, dims.H_p
    return {
        "theta_R.W": (c, k),
        "theta_R.b": (c,),
        "theta_a.W_v": (a, k),
        "theta_a.W_h": (a, H),
        "theta_a.b_a": (a,),
        "theta_a.w_a": (a,),
        "theta_L.W_x": (4 * H, dims.lstm_input),
        "theta_L.W_h": (4 * H, H),
        "theta_L.b": (4 * H,),
        "theta_p.W1": (H_p, dims.pred_input),
        "theta_p.b1": (H_p,),
        "theta_p.W2": (c, H_p),
        "theta_p.b2": (c,),
    }


def init_params(dims: ModelDims, seed: int = 0) -> ModelParams:
    """Random parameters, scaled by 1/sqrt(fan_in); forget-gate bias starts at 1."""
    rng = np.random.default_rng(seed)

    def mat(rows, cols):
        return Tensor(rng.normal(size=(rows, cols)) / np.sqrt(cols))

    def vec(n):
        return Tensor(np.zeros(n))

    c, k, H, a, H_p = dims.c, dims.k, dims.H, dims.a, dims.H_p
    theta_R = FeatureHead(mat(c, k), vec(c))
    theta_a = AttentionParams(
        mat(a, k), mat(a, H), vec(a), Tensor(rng.normal(size=a) / np.sqrt(a))
    )
    b_lstm = np.zeros(4 * H)
    b_lstm[H : 2 * H] = 1.0
    theta_L = LSTMParams(mat(4 * H, dims.lstm_input), mat(4 * H, H), Tensor(b_lstm))
    theta_p = PredictionHead(mat(H_p, dims.pred_input), vec(H_p), mat(c, H_p), vec(c))
    return ModelParams(dims, theta_R, theta_a, theta_L, theta_p)


# ---------------------------------------------------------------------------
# layers


def feature_logits(fm: FeatureMaps, theta_R: FeatureHead) -> Tensor:
    """Per-label logits of the feature head: linear map of the region mean."""
    pooled = ad.mean_rows(Tensor(fm.values))
    return ad.linear(pooled, theta_R.W, theta_R.b)


def feature_map_forward(fm: FeatureMaps, theta_R: FeatureHead) -> Tensor:
    """Preliminary per-label probabilities in [0, 1]."""
    return ad.sigmoid(feature_logits(fm, theta_R))


def attention_scores(V: Tensor, h_prev: Tensor, theta_a: AttentionParams) -> Tensor:
    """One unnormalised relevance score per region, conditioned on h_prev."""
    if V.data.ndim != 2:
        raise ShapeError(f"attention_scores: V must be (m, k), got {V.data.shape}")
    hidden_part = ad.linear(h_prev, theta_a.W_h, theta_a.b_a)  # (a,)
    region_part = ad.matmul(V, ad.transpose(theta_a.W_v))  # (m, a)
    activ = ad.tanh(ad.add_row(region_part, hidden_part))
    return ad.matmul(activ, theta_a.w_a)  # (m,)


def attention_weights(eps: Tensor) -> Tensor:
    """Normalise region scores into importance weights summing to 1."""
    return ad.softmax(eps)


def context_vector(V: Tensor, alpha: Tensor) -> Tensor:
    """Convex combination of region vectors under the attention weights."""
    if V.data.shape[0] != alpha.data.shape[0]:
        raise ShapeError(
            f"context_vector: {V.data.shape[0]} regions vs {alpha.data.shape[0]} weights"
        )
    return ad.matmul(ad.transpose(V), alpha)  # (k,)


def lstm_step(
    v_pred: Tensor,
    z: Tensor,
    y_hard_prev: Tensor,
    h_prev: Tensor,
    cell_prev: Tensor,
    theta_L: LSTMParams,
    drop_mask: Optional[np.ndarray] = None,
) -> tuple[Tensor, Tensor]:
    """Standard LSTM cell on the concatenated step input.

    `drop_mask`, when given, is an inverted-dropout mask applied to the
    input concatenation (train time only).
    """
    x = ad.concat([v_pred, z, y_hard_prev])
    if drop_mask is not None:
        x = ad.cmul(x, drop_mask)
    H = h_prev.data.shape[0]
    gates = ad.add(ad.matmul(theta_L.W_x, x), ad.linear(h_prev, theta_L.W_h, theta_L.b))
    i = ad.sigmoid(ad.slice1d(gates, 0, H))
    f = ad.sigmoid(ad.slice1d(gates, H, 2 * H))
    g = ad.tanh(ad.slice1d(gates, 2 * H, 3 * H))
    o = ad.sigmoid(ad.slice1d(gates, 3 * H, 4 * H))
    cell = ad.add(ad.mul(f, cell_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(cell))
    return h, cell


def predict_step(
    v_pred: Tensor,
    z: Tensor,
    y_hard_prev: Tensor,
    h: Tensor,
    theta_p: PredictionHead,
    drop_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Per-label logits from the two-layer head; sigmoid is left to the caller."""
    q = ad.concat([v_pred, z, y_hard_prev, h])
    hidden = ad.relu(ad.linear(q, theta_p.W1, theta_p.b1))
    if drop_mask is not None:
        hidden = ad.cmul(hidden, drop_mask)
    return ad.linear(hidden, theta_p.W2, theta_p.b2)


def decoder_step(
    params: ModelParams,
    V: Tensor,
    v_pred: Tensor,
    y_hard_prev: Tensor,
    h_prev: Tensor,
    cell_prev: Tensor,
    attention_on: bool = True,
    drop_input: Optional[np.ndarray] = None,
    drop_hidden: Optional[np.ndarray] = None,
) -> tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
    """One shared decode step: attend, advance the LSTM, emit logits.

    Both the training unroll and the greedy/beam decoders route through this
    function. With attention off, the weights are fixed uniform and the
    attention parameters stay off the tape. Returns (h, cell, logits, alpha, z).
    """
    m = V.data.shape[0]
    if attention_on:
        alpha = attention_weights(attention_scores(V, h_prev, params.theta_a))
    else:
        alpha = Tensor(np.full(m, 1.0 / m))
    z = context_vector(V, alpha)
    h, cell = lstm_step(v_pred, z, y_hard_prev, h_prev, cell_prev, params.theta_L, drop_input)
    logits = predict_step(v_pred, z, y_hard_prev, h, params.theta_p, drop_hidden)
    return h, cell, logits, alpha, z


@dataclass
class StepState:
    """Everything produced at one unroll step."""

    t: int
    h: Tensor
    cell: Tensor
    p: Tensor  # (c,) logits
    alpha: Tensor  # (m,)
    z: Tensor  # (k,)
    y_hard: np.ndarray  # (c,) binary, popcount == t
    pool: "object"  # CandidatePool after this step, size c - t
    v_pred: Tensor  # confidences fed into this step
    label: int  # label chosen at this step


def unroll(
    fm: FeatureMaps,
    params: ModelParams,
    T: int,
    attention_on: bool = True,
    forced_order: Optional[Sequence[int]] = None,
    keep_prob: float = 1.0,
    dropout_seed: Optional[int] = None,
    freeze_feature_head: bool = False,
) -> list[StepState]:
    """Run the feature head once, then T attend/LSTM/predict/select steps.

    Labels are picked from the shrinking candidate pool (or taken from
    `forced_order` for fixed-order training). The chosen label and the hard
    label vector are gradient-blocked; the confidence chaining through
    sigmoid(p) is not. With `freeze_feature_head` the preliminary
    probabilities are computed off-tape so the feature head receives an
    exactly-zero gradient.
    """
    from .decode import CandidatePool, pool_select, pool_update

    c = params.dims.c
    if not (1 <= T <= c):
        raise ContractError(f"unroll: T must be in [1, {c}], got {T}")
    if fm.k != params.dims.k:
        raise ShapeError(f"unroll: features have k={fm.k}, model expects {params.dims.k}")
    if forced_order is not None:
        forced_order = list(forced_order)
        if len(forced_order) != T:
            raise ContractError(f"unroll: forced_order length {len(forced_order)} != T={T}")
        if len(set(forced_order)) != len(forced_order):
            raise ContractError("unroll: forced_order contains duplicates")
        if any(not (0 <= l < c) for l in forced_order):
            raise ContractError("unroll: forced_order label out of range")

    V = Tensor(fm.values)
    if freeze_feature_head:
        with ad.stop_recording():
            v_prob = feature_map_forward(fm, params.theta_R)
    else:
        v_prob = feature_map_forward(fm, params.theta_R)

    rng = np.random.default_rng(dropout_seed) if keep_prob < 1.0 else None
    H, H_p = params.dims.H, params.dims.H_p
    h = Tensor(np.zeros(H))
    cell = Tensor(np.zeros(H))
    y_hard = np.zeros(c)
    pool = CandidatePool.full(c)
    states: list[StepState] = []
    p_prev: Optional[Tensor] = None

    for t in range(1, T + 1):
        v_pred = v_prob if t == 1 else ad.sigmoid(p_prev)
        drop_input = drop_hidden = None
        if rng is not None:
            drop_input = ad.dropout_mask(params.dims.lstm_input, keep_prob, rng)
            drop_hidden = ad.dropout_mask(H_p, keep_prob, rng)
        h, cell, p, alpha, z = decoder_step(
            params,
            V,
            v_pred,
            Tensor(y_hard),
            h,
            cell,
            attention_on=attention_on,
            drop_input=drop_input,
            drop_hidden=drop_hidden,
        )
        if forced_order is not None:
            label = forced_order[t - 1]
            if label not in pool:
                raise ContractError(f"unroll: forced label {label} already used")
        else:
            label = pool_select(p, pool)
        pool = pool_update(pool, label)
        y_hard = y_hard.copy()
        y_hard[label] = 1.0
        states.append(
            StepState(
                t=t, h=h, cell=cell, p=p, alpha=alpha, z=z,
                y_hard=y_hard, pool=pool, v_pred=v_pred, label=label,
            )
        )
        p_prev = p
    return states


# ---------------------------------------------------------------------------
# checkpoint I/O


def save_checkpoint(params: ModelParams, path) -> None:
    """Bit-exact parameter dump; see `load_checkpoint` for the layout."""
    d = params.dims
    chunks = [CHECKPOINT_MAGIC, f"{d.c} {d.k} {d.H} {d.a} {d.H_p} {d.m}\n".encode()]
    for name, tensor in params.named_tensors():
        arr = np.ascontiguousarray(tensor.data, dtype="<f8")
        dims = " ".join(str(s) for s in arr.shape)
        chunks.append(f"{name}\n{arr.ndim}\n{dims}\n".encode())
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def _read_line(buf: bytes, pos: int, what: str) -> tuple[str, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise CheckpointFormatError(f"truncated {what} at byte {pos}")
    return buf[pos:end].decode("ascii", errors="replace"), end + 1


def load_checkpoint(path) -> ModelParams:
    """Parse the checkpoint layout: magic line, size header "c k H a H_p m",
    then per tensor a name line, a rank line, a dims line, and the raw
    little-endian float64 payload, in the fixed group order."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise CheckpointFormatError("bad magic at byte 0")
    pos = len(CHECKPOINT_MAGIC)
    header, pos = _read_line(buf, pos, "size header")
    try:
        c, k, H, a, H_p, m = (int(x) for x in header.split())
    except ValueError as exc:
        raise CheckpointFormatError(f"bad size header at byte {len(CHECKPOINT_MAGIC)}: {header!r}") from exc
    dims = ModelDims(c=c, k=k, H=H, a=a, H_p=H_p, m=m)
    expected = _expected_shapes(dims)
    arrays: dict[str, Tensor] = {}
    for want_name, want_shape in expected.items():
        name_at = pos
        name, pos = _read_line(buf, pos, "tensor name")
        if name != want_name:
            raise CheckpointFormatError(
                f"expected tensor {want_name!r} at byte {name_at}, found {name!r}"
            )
        rank_line, pos = _read_line(buf, pos, "rank")
        dims_line, pos = _read_line(buf, pos, "dims")
        try:
            rank = int(rank_line)
            shape = tuple(int(x) for x in dims_line.split())
        except ValueError as exc:
            raise CheckpointFormatError(f"bad shape lines for {name!r} at byte {name_at}") from exc
        if rank != len(shape) or shape != want_shape:
            raise CheckpointFormatError(
                f"tensor {name!r} at byte {name_at}: declared shape {shape}, expected {want_shape}"
            )
        nbytes = 8 * int(np.prod(shape))
        if pos + nbytes > len(buf):
            raise CheckpointFormatError(f"truncated payload for {name!r} at byte {pos}")
        arr = np.frombuffer(buf[pos : pos + nbytes], dtype="<f8").reshape(shape).copy()
        pos += nbytes
        arrays[name] = Tensor(arr)
    if pos != len(buf):
        raise CheckpointFormatError(f"trailing bytes at byte {pos}")
    return ModelParams(
        dims=dims,
        theta_R=FeatureHead(arrays["theta_R.W"], arrays["theta_R.b"]),
        theta_a=AttentionParams(
            arrays["theta_a.W_v"], arrays["theta_a.W_h"], arrays["theta_a.b_a"], arrays["theta_a.w_a"]
        ),
        theta_L=LSTMParams(arrays["theta_L.W_x"], arrays["theta_L.W_h"], arrays["theta_L.b"]),
        theta_p=PredictionHead(
            arrays["theta_p.W1"], arrays["theta_p.b1"], arrays["theta_p.W2"], arrays["theta_p.b2"]
        ),
    )
