"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` records every op executed while it is active; replaying the
record in reverse propagates adjoints. Tapes are rebuilt per forward pass
(the unroll length varies per instance) and are confined to one thread;
parallel workers each open their own tape.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "stop_recording",
    "ShapeError",
    "ContractError",
    "add",
    "sub",
    "mul",
    "cmul",
    "scale",
    "neg",
    "matmul",
    "transpose",
    "concat",
    "slice1d",
    "sum_all",
    "mean_rows",
    "add_row",
    "relu",
    "tanh",
    "sigmoid",
    "softmax",
    "linear",
    "bce_loss",
    "backward",
    "grad_check",
    "dropout_mask",
]


class ShapeError(ValueError):
    """Operand dimensions do not agree."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class Tensor:
    """A dense float64 array node. Values are row-major and must stay finite."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


# Thread-local stack of active tapes. The top entry receives new records;
# a None entry (pushed by stop_recording) suppresses recording.
_STACK = threading.local()


def _tape_stack():
    stack = getattr(_STACK, "stack", None)
    if stack is None:
        stack = []
        _STACK.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops, sufficient to replay adjoints in reverse.

    Execution order is already topological, so the reverse sweep visits each
    recorded op exactly once. Parameters never touched by the recorded ops
    get an exactly-zero gradient.
    """

    __slots__ = ("_records",)

    def __init__(self):
        # each record: (out, inputs, vjp) with vjp(grad_out) -> per-input grads
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False


class stop_recording:
    """Context manager that suppresses recording on the enclosing tape."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


def _record(out: Tensor, inputs: tuple, vjp: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None:
        tape._records.append((out, inputs, vjp))
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    return _record(out, (a, b), lambda g: (g * bd, g * ad))


def cmul(a: Tensor, const) -> Tensor:
    """Elementwise multiply by a constant array (no gradient to the constant)."""
    c = np.asarray(const, dtype=np.float64)
    if c.shape != a.data.shape:
        raise ShapeError(f"cmul: shapes {a.data.shape} and {c.shape} differ")
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * s,))


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: (out,n)@(n,) -> (out,) or (p,n)@(n,q) -> (p,q)."""
    if a.data.ndim != 2:
        raise ShapeError(f"matmul: left operand must be 2-D, got {a.data.shape}")
    if b.data.ndim == 1:
        if a.data.shape[1] != b.data.shape[0]:
            raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
        out = Tensor(a.data @ b.data)
        ad, bd = a.data, b.data

        def vjp_vec(g):
            return (np.outer(g, bd), ad.T @ g)

        return _record(out, (a, b), vjp_vec)
    if b.data.ndim == 2:
        if a.data.shape[1] != b.data.shape[0]:
            raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
        out = Tensor(a.data @ b.data)
        ad, bd = a.data, b.data

        def vjp_mat(g):
            return (g @ bd.T, ad.T @ g)

        return _record(out, (a, b), vjp_mat)
    raise ShapeError(f"matmul: right operand must be 1-D or 2-D, got {b.data.shape}")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: need 2-D, got {a.data.shape}")
    out = Tensor(a.data.T)
    return _record(out, (a,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat: no parts")
    for p in parts:
        if p.data.ndim != 1:
            raise ShapeError(f"concat: need 1-D parts, got {p.data.shape}")
    sizes = [p.data.shape[0] for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts]))
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _record(out, parts, vjp)


def slice1d(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 1:
        raise ShapeError(f"slice1d: need 1-D, got {a.data.shape}")
    if not (0 <= start <= stop <= a.data.shape[0]):
        raise ShapeError(f"slice1d: [{start}:{stop}] out of range for {a.data.shape}")
    out = Tensor(a.data[start:stop])
    n = a.data.shape[0]

    def vjp(g):
        full = np.zeros(n)
        full[start:stop] = g
        return (full,)

    return _record(out, (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    shp = a.data.shape
    return _record(out, (a,), lambda g: (np.broadcast_to(g, shp).copy(),))


def mean_rows(a: Tensor) -> Tensor:
    """Mean over axis 0 of a 2-D array: (m,k) -> (k,)."""
    if a.data.ndim != 2:
        raise ShapeError(f"mean_rows: need 2-D, got {a.data.shape}")
    m = a.data.shape[0]
    out = Tensor(a.data.mean(axis=0))
    shp = a.data.shape
    return _record(out, (a,), lambda g: (np.broadcast_to(g / m, shp).copy(),))


def add_row(mat: Tensor, row: Tensor) -> Tensor:
    """Add a row vector to every row of a 2-D array."""
    if mat.data.ndim != 2 or row.data.ndim != 1 or mat.data.shape[1] != row.data.shape[0]:
        raise ShapeError(f"add_row: shapes {mat.data.shape} and {row.data.shape}")
    out = Tensor(mat.data + row.data)
    return _record(out, (mat, row), lambda g: (g, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0
    return _record(out, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # piecewise form never exponentiates a positive argument
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(np.asarray(a.data))
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def softmax(a: Tensor) -> Tensor:
    """Stable softmax of a 1-D vector; output entries in (0,1], summing to 1."""
    if a.data.ndim != 1 or a.data.shape[0] == 0:
        raise ShapeError(f"softmax: need non-empty 1-D input, got {a.data.shape}")
    shifted = a.data - a.data.max()
    e = np.exp(shifted)
    y = e / e.sum()
    out = Tensor(y)
    return _record(out, (a,), lambda g: (y * (g - np.dot(g, y)),))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map w @ x + b for a 1-D input."""
    if x.data.ndim != 1 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(
            f"linear: x {x.data.shape}, w {w.data.shape}, b {b.data.shape}"
        )
    if w.data.shape[1] != x.data.shape[0] or w.data.shape[0] != b.data.shape[0]:
        raise ShapeError(
            f"linear: x {x.data.shape}, w {w.data.shape}, b {b.data.shape}"
        )
    out = Tensor(w.data @ x.data + b.data)
    wd, xd = w.data, x.data

    def vjp(g):
        return (wd.T @ g, np.outer(g, xd), g)

    return _record(out, (x, w, b), vjp)


def bce_loss(logits: Tensor, targets) -> Tensor:
    """Summed binary cross-entropy between sigmoid(logits) and 0/1 targets.

    Evaluated in the log-sum-exp form softplus(p) - y*p, which never takes
    log of a saturated sigmoid.
    """
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    p = logits.data
    if p.shape != y.shape:
        raise ShapeError(f"bce_loss: shapes {p.shape} and {y.shape} differ")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ContractError("bce_loss: targets must be 0 or 1")
    softplus = np.maximum(p, 0.0) + np.log1p(np.exp(-np.abs(p)))
    out = Tensor(np.sum(softplus - y * p))
    sig = _sigmoid(p)

    def vjp(g):
        return (g * (sig - y),)

    return _record(out, (logits,), vjp)


# ---------------------------------------------------------------------------
# reverse sweep and verification


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Adjoints of a scalar loss with respect to each tensor in `wrt`.

    Tensors in `wrt` that the recorded ops never touched get exact zeros.
    A tensor consumed by several ops accumulates all its contributions.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    for out, inputs, vjp in reversed(tape._records):
        g = grads.get(id(out))
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None:
                continue
            acc = grads.get(id(inp))
            grads[id(inp)] = gi if acc is None else acc + gi
    return [
        np.asarray(grads.get(id(p), np.zeros_like(p.data)), dtype=np.float64).reshape(p.data.shape)
        for p in wrt
    ]


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between taped gradients of f() and central differences.

    `f` must be deterministic across calls (fix any dropout seed). The error
    for one coordinate is |analytic - fd| / max(1, |analytic|, |fd|).
    """
    with Tape() as tape:
        loss = f()
    analytic = backward(tape, loss, list(params))
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lo_hi = f().item()
            flat[i] = orig - eps
            lo_lo = f().item()
            flat[i] = orig
            fd = (lo_hi - lo_lo) / (2.0 * eps)
            err = abs(gflat[i] - fd) / max(1.0, abs(gflat[i]), abs(fd))
            if err > worst:
                worst = err
    return worst


def dropout_mask(dim: int, keep_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: 1/keep_prob with probability keep_prob, else 0."""
    if not (0.0 < keep_prob <= 1.0):
        raise ContractError(f"dropout_mask: keep_prob must be in (0,1], got {keep_prob}")
    if keep_prob == 1.0:
        return np.ones(dim)
    return (rng.random(dim) < keep_prob) / keep_prob
