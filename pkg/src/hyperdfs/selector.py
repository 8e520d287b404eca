"""Feature-scoring policy, Gumbel-softmax straight-through sampling and
acquisition rollouts."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import KnowledgeStatus
from .nn import MLP, Module


class NoCandidateError(ValueError):
    """Every feature is already observed."""


class SelectorNet(Module):
    """Scores every feature from ``[x_tilde || mask]``; zero-initialised head."""

    def __init__(self, M: int, rng: np.random.Generator, hidden: int = 64, depth: int = 2):
        super().__init__()
        self.M = M
        self.mlp = self.child("mlp", MLP([2 * M] + [hidden] * depth + [M], "relu", rng, final_std=0.0))

    def __call__(self, x_tilde: Tensor, mask: Tensor) -> Tensor:
        return self.mlp(ad.concat([x_tilde, mask], axis=-1))


def score(x_tilde, status, net: SelectorNet) -> np.ndarray | Tensor:
    x = x_tilde if isinstance(x_tilde, Tensor) else Tensor(np.asarray(x_tilde, dtype=np.float64))
    if isinstance(status, KnowledgeStatus):
        status = status.mask
    m = status if isinstance(status, Tensor) else Tensor(np.asarray(status, dtype=np.float64))
    if x.shape[-1] != net.M or m.shape[-1] != net.M:
        raise ad.DimensionError(f"selector expects width {net.M}, got {x.shape} / {m.shape}")
    return net(x, m)


def _observed(status) -> np.ndarray:
    if isinstance(status, KnowledgeStatus):
        return status.mask
    if isinstance(status, Tensor):
        return status.data > 0.5
    return np.asarray(status).astype(bool)


def mask_scores(scores, status):
    """Observed features get -inf. Accepts NumPy arrays or Tensors, single rows or batches."""
    observed = _observed(status)
    if observed.all(axis=-1).any():
        raise NoCandidateError("no unobserved feature left to select")
    offset = np.where(observed, -np.inf, 0.0)
    if isinstance(scores, Tensor):
        return scores + Tensor(np.broadcast_to(offset, scores.shape).copy())
    return np.asarray(scores, dtype=np.float64) + offset


def select_greedy(scores, status) -> np.ndarray | int:
    """Highest-scoring unobserved feature; ties go to the lowest index."""
    s = mask_scores(scores.data if isinstance(scores, Tensor) else scores, status)
    idx = np.argmax(s, axis=-1)  # argmax returns the first maximum
    return int(idx) if np.ndim(idx) == 0 else idx


@dataclass
class GumbelSample:
    soft: Tensor
    hard: Tensor
    index: np.ndarray
    perturbed: np.ndarray


def gumbel_st_sample(scores, status, temperature: float, rng: np.random.Generator) -> GumbelSample:
    """Gumbel-softmax sample with a straight-through one-hot.

    ``hard`` carries the exact one-hot forward value while gradients flow
    through ``soft``.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    scores = scores if isinstance(scores, Tensor) else Tensor(np.asarray(scores, dtype=np.float64))
    masked = mask_scores(scores, status)
    noise = rng.gumbel(size=scores.shape)
    perturbed = (masked + Tensor(noise)) * (1.0 / temperature)
    soft = ad.softmax(perturbed, axis=-1)
    index = np.argmax(perturbed.data, axis=-1)
    onehot = np.zeros(scores.shape)
    np.put_along_axis(onehot, np.expand_dims(index, -1), 1.0, axis=-1)
    hard = ad.straight_through(soft, onehot)
    return GumbelSample(soft, hard, index, perturbed.data)


@dataclass
class Trajectory:
    """Acquisition record for a batch of samples (row b is one episode)."""

    indices: np.ndarray                      # B x tau selected features, in order
    masks: list[np.ndarray] = field(default_factory=list)  # tau + 1 snapshots, each B x M bool
    x_tilde: Tensor | None = None            # final imputed input
    mask: Tensor | None = None               # final (possibly differentiable) mask

    @property
    def tau(self) -> int:
        return self.indices.shape[1]

    def final_mask(self) -> np.ndarray:
        return self.masks[-1]


def _prepare(x, status, means):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B, M = x.shape
    if status is None:
        mask0 = np.zeros((B, M), dtype=bool)
    else:
        mask0 = np.broadcast_to(_observed(status), (B, M)).copy()
    means = np.zeros(M) if means is None else np.asarray(means, dtype=np.float64)
    return x, mask0, means


def rollout(
    x,
    net: SelectorNet,
    budget: int,
    status=None,
    mode: str = "eval",
    means: np.ndarray | None = None,
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
) -> Trajectory:
    """Acquire ``budget`` features per row.

    ``train`` mode samples with Gumbel-softmax straight-through and keeps the
    imputed input and mask differentiable:
    ``x_tilde <- x_tilde * (1 - h) + x * h`` and ``mask <- mask * (1 - h) + h``.
    ``eval`` mode is greedy and tape-free.
    """
    x, mask0, means = _prepare(x, status, means)
    B, M = x.shape
    if budget < 0 or budget > int((~mask0).sum(axis=1).min()):
        raise ValueError(f"budget {budget} exceeds the number of unobserved features")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    snapshots = [mask0.copy()]
    chosen = np.zeros((B, budget), dtype=np.int64)
    if mode == "eval":
        mask = mask0.copy()
        x_t = np.where(mask, x, means)
        for t in range(budget):
            s = score(x_t, mask, net).data
            idx = select_greedy(s, mask)
            chosen[:, t] = idx
            mask[np.arange(B), idx] = True
            x_t = np.where(mask, x, means)
            snapshots.append(mask.copy())
        return Trajectory(chosen, snapshots, Tensor(x_t), Tensor(mask.astype(np.float64)))

    if rng is None:
        raise ValueError("train-mode rollout needs an rng")
    x_full = Tensor(x)
    x_t = Tensor(np.where(mask0, x, means))
    m_t = Tensor(mask0.astype(np.float64))
    hard_mask = mask0.copy()
    for t in range(budget):
        s = score(x_t, m_t, net)
        sample = gumbel_st_sample(s, hard_mask, temperature, rng)
        h = sample.hard
        x_t = x_t * (1.0 - h) + x_full * h
        m_t = m_t * (1.0 - h) + h
        chosen[:, t] = sample.index
        hard_mask[np.arange(B), sample.index] = True
        snapshots.append(hard_mask.copy())
    return Trajectory(chosen, snapshots, x_t, m_t)


def random_rollout(x, budget: int, rng: np.random.Generator, status=None,
                   means: np.ndarray | None = None) -> Trajectory:
    """Uniform choice among unobserved features at each step."""
    x, mask0, means = _prepare(x, status, means)
    B, M = x.shape
    if budget < 0 or budget > int((~mask0).sum(axis=1).min()):
        raise ValueError(f"budget {budget} exceeds the number of unobserved features")
    mask = mask0.copy()
    snapshots = [mask.copy()]
    chosen = np.zeros((B, budget), dtype=np.int64)
    for t in range(budget):
        keys = rng.random((B, M))
        keys[mask] = -1.0
        idx = keys.argmax(axis=1)
        chosen[:, t] = idx
        mask[np.arange(B), idx] = True
        snapshots.append(mask.copy())
    return Trajectory(chosen, snapshots, Tensor(np.where(mask, x, means)), Tensor(mask.astype(np.float64)))


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """One row per acquisition: sample_id, step, feature_index (0-based column)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "step", "feature_index"])
        for i, row in enumerate(traj.indices):
            w.writerows((i, t, int(f)) for t, f in enumerate(row))
