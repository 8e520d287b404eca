"""Synergistic Pairs and Proxy Substitution generators, plus the closed-form
Bayes oracle for Proxy Substitution.

Random numbers come from ``numpy.random.default_rng(seed)`` (PCG64 bit
generator, ziggurat normals). Features are indexed 0-based in code; column
``x{i+1}`` of the CSV holds feature ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtr

from .data import Dataset, KnowledgeStatus

DEFAULT_N = 10_000


@dataclass(frozen=True)
class ProxySubConfig:
    proxy_stds: tuple[float, ...] = (0.1, 0.5, 1.0, 2.5, 5.0)
    num_noise: int = 5

    def __post_init__(self):
        s = np.asarray(self.proxy_stds)
        if (s <= 0).any() or (np.diff(s) <= 0).any():
            raise ValueError("proxy stds must be strictly positive and increasing")

    @property
    def num_proxies(self) -> int:
        return len(self.proxy_stds)

    @property
    def M(self) -> int:
        return self.num_proxies + self.num_noise


@dataclass(frozen=True)
class SynPairsConfig:
    num_pairs: int = 6
    signal_pairs: tuple[tuple[int, int], ...] = ((0, 1), (2, 3), (4, 5))

    @property
    def M(self) -> int:
        return 2 * self.num_pairs


def synpairs_probability(X: np.ndarray, cfg: SynPairsConfig = SynPairsConfig()) -> np.ndarray:
    logit = sum(X[..., i] * X[..., j] for i, j in cfg.signal_pairs)
    return expit(logit)


def gen_synergistic_pairs(n: int = DEFAULT_N, seed: int = 0, cfg: SynPairsConfig = SynPairsConfig()) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, cfg.M))
    y = (rng.random(n) < synpairs_probability(X, cfg)).astype(np.int64)
    names = [f"x{i + 1}" for i in range(cfg.M)]
    return Dataset(X, y, 2, names, name="synpairs")


def gen_proxy_substitution(
    n: int = DEFAULT_N, seed: int = 0, cfg: ProxySubConfig = ProxySubConfig(), return_latent: bool = False
):
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n)
    stds = np.asarray(cfg.proxy_stds)
    proxies = z[:, None] + rng.standard_normal((n, cfg.num_proxies)) * stds
    noise = rng.standard_normal((n, cfg.num_noise))
    X = np.hstack([proxies, noise])
    y = (z > 0).astype(np.int64)
    ds = Dataset(X, y, 2, [f"x{i + 1}" for i in range(cfg.M)], name="proxysub")
    return (ds, z) if return_latent else ds


def _proxy_mask(status, cfg: ProxySubConfig) -> np.ndarray:
    mask = status.mask if isinstance(status, KnowledgeStatus) else np.asarray(status, dtype=bool)
    if mask.shape[-1] != cfg.M:
        raise ValueError(f"status over {mask.shape[-1]} features, expected {cfg.M}")
    return mask[..., : cfg.num_proxies]


def proxysub_posterior(x: np.ndarray, status, cfg: ProxySubConfig = ProxySubConfig()):
    """Precision-weighted estimate of the latent and the posterior precision.

    Returns ``(z_hat, precision)`` with ``precision = 1 + sum over observed
    proxies of 1/sigma_i^2``. Works on single rows or batches.
    """
    obs = _proxy_mask(status, cfg).astype(np.float64)
    inv_var = 1.0 / np.square(np.asarray(cfg.proxy_stds))
    x = np.asarray(x, dtype=np.float64)[..., : cfg.num_proxies]
    precision = 1.0 + (obs * inv_var).sum(axis=-1)
    z_hat = (obs * x * inv_var).sum(axis=-1) / precision
    return z_hat, precision


def proxysub_bayes_predict(x: np.ndarray, status, cfg: ProxySubConfig = ProxySubConfig()):
    """p(y=1 | x_S) on raw (unstandardised) coordinates; noise features are ignored."""
    z_hat, precision = proxysub_posterior(x, status, cfg)
    return ndtr(z_hat * np.sqrt(precision))


def proxysub_bayes_accuracy(status, n: int = 100_000, seed: int = 0, cfg: ProxySubConfig = ProxySubConfig()) -> float:
    """Monte-Carlo accuracy of thresholding the oracle at 0.5."""
    ds, z = gen_proxy_substitution(n, seed, cfg, return_latent=True)
    z_hat, _ = proxysub_posterior(ds.X, status, cfg)
    pred = (z_hat > 0).astype(np.int64)
    return float((pred == ds.y).mean())

