"""Synthetic planted-region multi-label data.

Each instance is a g x g grid of k-dimensional cells. Label sets are drawn
from an Ising-style joint (independent marginals plus pairwise co-occurrence
boosts, sampled by Gibbs sweeps); each positive label stamps its prototype
vector into a few grid cells, disjoint across labels, and records where. The
planted cells are the ground truth for attention-localization checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import ContractError
from .model import FeatureMaps

__all__ = [
    "GeneratorConfig",
    "Instance",
    "DatasetManifest",
    "DatasetFormatError",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "label_frequency_order",
    "joint_log_weights",
]

DATASET_MAGIC = b"OFMLD1\n"
GIBBS_SWEEPS = 10


class DatasetFormatError(ValueError):
    """Dataset bytes do not follow the declared layout."""


@dataclass(frozen=True)
class GeneratorConfig:
    c: int
    g: int
    k: int
    n_train: int
    n_test: int
    label_freqs: tuple[float, ...]
    cooc: np.ndarray  # (c, c) symmetric log-odds boosts, zero diagonal
    size_map: tuple[int, ...]  # planted cells per label
    noise_sigma: float = 0.1
    seed: int = 0

    @property
    def m(self) -> int:
        return self.g * self.g

    def __post_init__(self):
        if self.c < 1 or self.g < 1 or self.k < 1:
            raise ContractError("GeneratorConfig: dimensions must be positive")
        if self.c > self.k:
            raise ContractError(
                f"GeneratorConfig: need c <= k to orthogonalize prototypes, got c={self.c}, k={self.k}"
            )
        if len(self.label_freqs) != self.c or len(self.size_map) != self.c:
            raise ContractError("GeneratorConfig: label_freqs and size_map must have length c")
        if any(not (0.0 <= f <= 1.0) for f in self.label_freqs):
            raise ContractError("GeneratorConfig: label_freqs must lie in [0, 1]")
        if any(s < 1 for s in self.size_map):
            raise ContractError("GeneratorConfig: size_map entries must be >= 1")
        # every label set has positive probability under the Gibbs joint, so
        # the worst-case placement must fit the grid
        if sum(self.size_map) > self.m:
            raise ContractError(
                f"GeneratorConfig: total planted cells {sum(self.size_map)} exceed m={self.m}"
            )
        cooc = np.asarray(self.cooc, dtype=np.float64)
        if cooc.shape != (self.c, self.c):
            raise ContractError(f"GeneratorConfig: cooc must be ({self.c}, {self.c})")
        if not np.allclose(cooc, cooc.T) or np.any(np.diag(cooc) != 0.0):
            raise ContractError("GeneratorConfig: cooc must be symmetric with zero diagonal")
        if self.noise_sigma < 0.0:
            raise ContractError("GeneratorConfig: noise_sigma must be >= 0")
        object.__setattr__(self, "cooc", cooc)
        object.__setattr__(self, "label_freqs", tuple(float(f) for f in self.label_freqs))
        object.__setattr__(self, "size_map", tuple(int(s) for s in self.size_map))

    @classmethod
    def default_benchmark(cls, seed: int = 0, n_train: int = 2000, n_test: int = 500) -> "GeneratorConfig":
        """Twelve labels on a 6x6 grid: three rare single-cell labels, six mid
        single-cell labels, three frequent 8-cell labels, and one strong
        rare-frequent co-occurrence pair (labels 0 and 9)."""
        c = 12
        freqs = (0.05,) * 3 + (0.25,) * 6 + (0.5,) * 3
        sizes = (1,) * 3 + (1,) * 6 + (8,) * 3
        cooc = np.zeros((c, c))
        cooc[0, 9] = cooc[9, 0] = 2.0
        return cls(
            c=c, g=6, k=16, n_train=n_train, n_test=n_test,
            label_freqs=freqs, cooc=cooc, size_map=sizes,
            noise_sigma=0.1, seed=seed,
        )


@dataclass
class Instance:
    id: str
    features: FeatureMaps
    y: np.ndarray  # (c,) binary
    planted: dict[int, tuple[int, ...]]  # positive label -> grid cells

    @property
    def positives(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.y)]


@dataclass
class DatasetManifest:
    c: int
    m: int
    k: int
    instances: list[Instance] = field(default_factory=list)

    @property
    def N(self) -> int:
        return len(self.instances)

    @property
    def d(self) -> int:
        return self.m * self.k

    def validate(self) -> None:
        for inst in self.instances:
            if inst.features.m != self.m or inst.features.k != self.k:
                raise ContractError(f"instance {inst.id}: feature grid does not match manifest")
            if inst.y.shape != (self.c,):
                raise ContractError(f"instance {inst.id}: label vector does not match manifest")


def joint_log_weights(label_freqs: Sequence[float], cooc: np.ndarray, y: np.ndarray) -> float:
    """Unnormalised log-probability of a label vector under the sampling joint."""
    theta = _logits(np.asarray(label_freqs))
    return float(y @ theta + 0.5 * (y @ cooc @ y))


def _logits(freqs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(freqs) - np.log1p(-freqs)


def _gibbs_label_set(cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    theta = _logits(np.asarray(cfg.label_freqs))
    for _attempt in range(10_000):
        y = (rng.random(cfg.c) < np.asarray(cfg.label_freqs)).astype(np.float64)
        for _sweep in range(GIBBS_SWEEPS):
            for i in range(cfg.c):
                # diag(cooc) is zero, so the self-term drops out
                logit = theta[i] + float(cfg.cooc[i] @ y)
                if logit >= 0.0:
                    prob = 1.0 / (1.0 + np.exp(-logit))
                else:
                    e = np.exp(logit)
                    prob = e / (1.0 + e)
                y[i] = 1.0 if rng.random() < prob else 0.0
        if y.any():
            return y
    raise ContractError("generate_dataset: could not sample a non-empty label set")


def _prototypes(cfg: GeneratorConfig) -> np.ndarray:
    """One fixed unit-norm prototype per label, mutually orthogonal."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0,)))
    raw = rng.normal(size=(cfg.k, cfg.c))
    q, r = np.linalg.qr(raw)
    signs = np.sign(np.diag(r))
    signs[signs == 0.0] = 1.0
    return (q * signs).T  # (c, k)


_SPLIT_KEYS = {"train": 1, "test": 2}


def generate_dataset(cfg: GeneratorConfig, split: str = "train") -> DatasetManifest:
    """Sample one split. Instances get independent RNG streams derived from
    (seed, split, index), so generation order or parallelism cannot change
    the result; empty label sets are rejected and resampled."""
    if split not in _SPLIT_KEYS:
        raise ContractError(f"generate_dataset: split must be 'train' or 'test', got {split!r}")
    n = cfg.n_train if split == "train" else cfg.n_test
    protos = _prototypes(cfg)
    m = cfg.m
    instances = []
    for i in range(n):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=cfg.seed, spawn_key=(_SPLIT_KEYS[split], i))
        )
        y = _gibbs_label_set(cfg, rng)
        x = np.zeros((m, cfg.k))
        free = list(range(m))
        planted: dict[int, tuple[int, ...]] = {}
        for label in np.flatnonzero(y):
            label = int(label)
            picked = rng.choice(len(free), size=cfg.size_map[label], replace=False)
            cells = sorted(free[j] for j in picked)
            for cell in cells:
                x[cell] += protos[label]
            free = [cell for cell in free if cell not in set(cells)]
            planted[label] = tuple(cells)
        if cfg.noise_sigma > 0.0:
            x += rng.normal(0.0, cfg.noise_sigma, size=(m, cfg.k))
        instances.append(
            Instance(id=f"{split}-{i:05d}", features=FeatureMaps(x), y=y, planted=planted)
        )
    ds = DatasetManifest(c=cfg.c, m=m, k=cfg.k, instances=instances)
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# file format


def save_dataset(ds: DatasetManifest, path) -> None:
    """Layout: magic line, header "N c m k", then per instance an id/label
    line, a planted-cells line, and the raw little-endian float64 grid."""
    ds.validate()
    chunks = [DATASET_MAGIC, f"{ds.N} {ds.c} {ds.m} {ds.k}\n".encode()]
    for inst in ds.instances:
        if not inst.id or any(ch.isspace() for ch in inst.id):
            raise ContractError(f"instance id {inst.id!r} must be non-empty without whitespace")
        labels = inst.positives
        head = " ".join([inst.id, str(len(labels))] + [str(l) for l in labels])
        planted_parts = [
            f"{l}:{','.join(str(cell) for cell in inst.planted[l])}" for l in labels
        ]
        planted_line = " ".join(["planted"] + planted_parts)
        chunks.append((head + "\n" + planted_line + "\n").encode())
        chunks.append(np.ascontiguousarray(inst.features.values, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def _line(buf: bytes, pos: int, what: str) -> tuple[str, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise DatasetFormatError(f"truncated {what} at byte {pos}")
    return buf[pos:end].decode("ascii", errors="replace"), end + 1


def load_dataset(path) -> DatasetManifest:
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(DATASET_MAGIC):
        raise DatasetFormatError("bad magic at byte 0")
    pos = len(DATASET_MAGIC)
    header_at = pos
    header, pos = _line(buf, pos, "header")
    try:
        n, c, m, k = (int(x) for x in header.split())
    except ValueError as exc:
        raise DatasetFormatError(f"bad header at byte {header_at}: {header!r}") from exc
    if n < 0 or c < 1 or m < 1 or k < 1:
        raise DatasetFormatError(f"bad header values at byte {header_at}: {header!r}")
    instances = []
    for _ in range(n):
        head_at = pos
        head, pos = _line(buf, pos, "instance header")
        fields = head.split()
        if len(fields) < 2:
            raise DatasetFormatError(f"bad instance header at byte {head_at}: {head!r}")
        inst_id = fields[0]
        try:
            t_pos = int(fields[1])
            labels = [int(x) for x in fields[2:]]
        except ValueError as exc:
            raise DatasetFormatError(f"bad instance header at byte {head_at}: {head!r}") from exc
        if len(labels) != t_pos:
            raise DatasetFormatError(
                f"instance {inst_id!r} at byte {head_at}: declared {t_pos} labels, found {len(labels)}"
            )
        if any(not (0 <= l < c) for l in labels) or len(set(labels)) != len(labels):
            raise DatasetFormatError(f"instance {inst_id!r} at byte {head_at}: bad label list")
        planted_at = pos
        planted_line, pos = _line(buf, pos, "planted line")
        parts = planted_line.split()
        if not parts or parts[0] != "planted":
            raise DatasetFormatError(f"missing planted line at byte {planted_at}")
        planted: dict[int, tuple[int, ...]] = {}
        for part in parts[1:]:
            try:
                label_str, cells_str = part.split(":")
                label = int(label_str)
                cells = tuple(int(x) for x in cells_str.split(","))
            except ValueError as exc:
                raise DatasetFormatError(f"bad planted entry {part!r} at byte {planted_at}") from exc
            if label not in labels:
                raise DatasetFormatError(
                    f"planted entry for non-positive label {label} at byte {planted_at}"
                )
            if not cells or any(not (0 <= cell < m) for cell in cells):
                raise DatasetFormatError(f"planted cells out of range at byte {planted_at}")
            planted[label] = cells
        if set(planted) != set(labels):
            raise DatasetFormatError(f"planted labels disagree with positives at byte {planted_at}")
        nbytes = 8 * m * k
        if pos + nbytes > len(buf):
            raise DatasetFormatError(f"truncated feature payload at byte {pos}")
        x = np.frombuffer(buf[pos : pos + nbytes], dtype="<f8").reshape(m, k).copy()
        pos += nbytes
        y = np.zeros(c)
        y[labels] = 1.0
        instances.append(Instance(id=inst_id, features=FeatureMaps(x), y=y, planted=planted))
    if pos != len(buf):
        raise DatasetFormatError(f"trailing bytes at byte {pos}")
    ds = DatasetManifest(c=c, m=m, k=k, instances=instances)
    ds.validate()
    return ds


def label_frequency_order(ds: DatasetManifest, direction: str = "desc") -> list[int]:
    """Labels ordered by positive count; ties keep the lower index first."""
    if ds.N == 0:
        raise ContractError("label_frequency_order: empty dataset")
    counts = np.zeros(ds.c, dtype=np.int64)
    for inst in ds.instances:
        counts += inst.y.astype(np.int64)
    if direction == "desc":
        return sorted(range(ds.c), key=lambda i: (-counts[i], i))
    if direction == "asc":
        return sorted(range(ds.c), key=lambda i: (counts[i], i))
    raise ContractError(f"label_frequency_order: direction must be 'desc' or 'asc', got {direction!r}")
