"""Datasets, knowledge statuses, subset sampling, folds and standardisation."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

STD_FLOOR = 1e-8


class StratificationError(ValueError):
    pass


class NotFittedError(RuntimeError):
    pass


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    feature_names: list[str] | None = None
    feature_means: np.ndarray | None = None
    name: str = "data"

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValueError(f"X must be N x M and y length N; got {self.X.shape}, {self.y.shape}")
        if np.isnan(self.X).any():
            raise ValueError("dataset contains NaN")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def num_features(self) -> int:
        return self.X.shape[1]

    def subset(self, rows: np.ndarray) -> "Dataset":
        return Dataset(self.X[rows], self.y[rows], self.num_classes, self.feature_names,
                       self.feature_means, self.name)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.X.shape, dtype=np.int64).tobytes())
        h.update(self.X.tobytes())
        h.update(self.y.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class KnowledgeStatus:
    """Binary mask of observed features."""

    mask: np.ndarray = field(compare=False)

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool).copy()
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @classmethod
    def empty(cls, M: int) -> "KnowledgeStatus":
        return cls(np.zeros(M, dtype=bool))

    @classmethod
    def full(cls, M: int) -> "KnowledgeStatus":
        return cls(np.ones(M, dtype=bool))

    @classmethod
    def from_indices(cls, M: int, indices: Sequence[int]) -> "KnowledgeStatus":
        m = np.zeros(M, dtype=bool)
        m[list(indices)] = True
        return cls(m)

    @property
    def M(self) -> int:
        return self.mask.size

    @property
    def cardinality(self) -> int:
        return int(self.mask.sum())

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def add(self, index: int) -> "KnowledgeStatus":
        m = self.mask.copy()
        m[index] = True
        return KnowledgeStatus(m)

    def key(self) -> str:
        return mask_key(self.mask)

    def __eq__(self, other) -> bool:
        return isinstance(other, KnowledgeStatus) and np.array_equal(self.mask, other.mask)

    def __hash__(self) -> int:
        return hash(self.key())


def mask_key(mask: np.ndarray) -> str:
    """Stable hash key of a 0/1 mask (length-prefixed packed bits)."""
    m = np.asarray(mask).astype(bool)
    return f"{m.size}:{np.packbits(m).tobytes().hex()}"


def impute_mean(x: np.ndarray, status: KnowledgeStatus | np.ndarray, means: np.ndarray | None) -> np.ndarray:
    """Replace unobserved coordinates by the training means. Works row-wise on batches."""
    if means is None:
        raise NotFittedError("feature means are not fitted")
    mask = status.mask if isinstance(status, KnowledgeStatus) else np.asarray(status, dtype=bool)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != mask.shape[-1] or np.shape(means)[-1] != x.shape[-1]:
        raise ValueError(f"length mismatch: x {x.shape}, mask {mask.shape}, means {np.shape(means)}")
    return np.where(mask, x, means)


def sample_subset(M: int, rng: np.random.Generator) -> KnowledgeStatus:
    """Cardinality-first sampling: k ~ U{1..M}, then a uniform k-subset."""
    if M < 1:
        raise ValueError("M must be >= 1")
    k = int(rng.integers(1, M + 1))
    perm = np.arange(M)
    for j in range(k):  # partial Fisher-Yates
        r = int(rng.integers(j, M))
        perm[j], perm[r] = perm[r], perm[j]
    mask = np.zeros(M, dtype=bool)
    mask[perm[:k]] = True
    return KnowledgeStatus(mask)


def sample_subset_excluding(M: int, rng: np.random.Generator, excluded: set[str] | None) -> KnowledgeStatus:
    """Rejection sampler that never returns a mask whose key is in ``excluded``."""
    for _ in range(100_000):
        s = sample_subset(M, rng)
        if not excluded or s.key() not in excluded:
            return s
    raise RuntimeError("exclusion set leaves no admissible mask")


@dataclass
class FoldSplit:
    k: int
    assignments: np.ndarray
    stratified: bool = True

    def train_eval(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        eval_rows = np.flatnonzero(self.assignments == fold)
        train_rows = np.flatnonzero(self.assignments != fold)
        return train_rows, eval_rows


def stratified_kfold(y: np.ndarray, k: int, rng: np.random.Generator) -> FoldSplit:
    """Shuffle each class and deal its members round-robin over the folds.

    The dealing offset carries over between classes so fold sizes stay
    balanced as well as per-class counts.
    """
    y = np.asarray(y)
    classes, counts = np.unique(y, return_counts=True)
    if (counts < k).any():
        bad = classes[counts < k].tolist()
        raise StratificationError(f"classes {bad} have fewer than k={k} members")
    assignments = np.empty(y.size, dtype=np.int64)
    offset = 0
    for c in classes:
        members = np.flatnonzero(y == c)
        rng.shuffle(members)
        assignments[members] = (offset + np.arange(members.size)) % k
        offset = (offset + members.size) % k
    return FoldSplit(k=k, assignments=assignments, stratified=True)


def standardize_fit_transform(train_X: np.ndarray, eval_X: np.ndarray | None = None):
    """Population-std standardisation fitted on the training rows only."""
    if train_X.shape[0] == 0:
        raise ValueError("training split is empty")
    means = train_X.mean(axis=0)
    stds = np.maximum(train_X.std(axis=0), STD_FLOOR)
    train_t = (train_X - means) / stds
    eval_t = None if eval_X is None else (eval_X - means) / stds
    return train_t, eval_t, means, stds


def standardize_split(train: Dataset, evaluation: Dataset):
    """Standardise a train/eval pair; imputation means become zeros."""
    tx, ex, means, stds = standardize_fit_transform(train.X, evaluation.X)
    zeros = np.zeros(train.num_features)
    tr = Dataset(tx, train.y, train.num_classes, train.feature_names, zeros, train.name)
    ev = Dataset(ex, evaluation.y, evaluation.num_classes, evaluation.feature_names, zeros, evaluation.name)
    return tr, ev, means, stds


@dataclass
class Batch:
    X: np.ndarray
    y: np.ndarray
    statuses: list[KnowledgeStatus]
    group_sizes: list[int]

    @property
    def groups(self) -> list[slice]:
        bounds = np.concatenate([[0], np.cumsum(self.group_sizes)])
        return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]

    def row_masks(self) -> np.ndarray:
        return np.repeat(np.stack([s.mask for s in self.statuses]), self.group_sizes, axis=0)


def batch_iter(
    dataset: Dataset,
    batch_size: int,
    mask_budget: int,
    rng: np.random.Generator,
    excluded: set[str] | None = None,
) -> Iterator[Batch]:
    """Shuffled mini-batches carrying at most ``mask_budget`` statuses each.

    Rows sharing a status are contiguous, split as evenly as possible.
    """
    if mask_budget < 1:
        raise ValueError("mask budget K must be >= 1")
    order = rng.permutation(dataset.n)
    for start in range(0, dataset.n, batch_size):
        rows = order[start:start + batch_size]
        k = min(mask_budget, rows.size)
        statuses = [sample_subset_excluding(dataset.num_features, rng, excluded) for _ in range(k)]
        sizes = [len(part) for part in np.array_split(np.arange(rows.size), k)]
        yield Batch(dataset.X[rows], dataset.y[rows], statuses, sizes)


# ------------------------------------------------------------------ CSV I/O


def read_csv(path: str | Path, name: str | None = None) -> Dataset:
    """Read the header + ``label`` column CSV format."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if "label" not in header:
            raise ValueError(f"{path}: no 'label' column in header")
        li = header.index("label")
        rows = [r for r in reader if r]
    names = [h for i, h in enumerate(header) if i != li]
    table = np.array(rows, dtype=object)
    y = table[:, li].astype(np.int64) if rows else np.zeros(0, dtype=np.int64)
    X = np.delete(table, li, axis=1).astype(np.float64) if rows else np.zeros((0, len(names)))
    if (y < 0).any():
        raise ValueError(f"{path}: labels must be non-negative integers")
    C = int(y.max()) + 1 if y.size else 0
    return Dataset(X, y, C, names, name=name or path.stem)


def write_csv(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    names = dataset.feature_names or [f"x{i + 1}" for i in range(dataset.num_features)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(names) + ["label"])
        for xrow, label in zip(dataset.X, dataset.y):
            w.writerow([repr(float(v)) for v in xrow] + [int(label)])


def read_masks(path: str | Path, M: int | None = None) -> list[KnowledgeStatus]:
    """One mask per line, comma-separated 0/1 values."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        bits = [int(v) for v in line.split(",")]
        if any(b not in (0, 1) for b in bits):
            raise ValueError(f"{path}: mask values must be 0/1")
        if M is not None and len(bits) != M:
            raise ValueError(f"{path}: mask has {len(bits)} entries, expected {M}")
        out.append(KnowledgeStatus(np.array(bits, dtype=bool)))
    return out


def write_masks(statuses: Sequence[KnowledgeStatus], path: str | Path) -> None:
    lines = [",".join(str(int(b)) for b in s.mask) for s in statuses]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
