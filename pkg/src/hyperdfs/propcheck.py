"""Monte-Carlo checks of how the generated-weight norm depends on subset size
for linearised encoder stacks at initialisation.

Every trial draws fresh embeddings and random linear maps
token map (d x d) -> output map (d x d') -> hypernetwork (d' x P); the same
draw is reused for every cardinality (common random numbers), with nested
subsets taken as prefixes of a random feature permutation.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

VARIANTS = ("presence", "presence-l2", "absence")
MIN_TRIALS = 100


class LowPowerWarning(UserWarning):
    pass


@dataclass
class PropTable:
    variant: str
    M: int
    cardinalities: np.ndarray
    sq_norms: np.ndarray  # trials x len(cardinalities)

    @property
    def trials(self) -> int:
        return self.sq_norms.shape[0]

    @property
    def means(self) -> np.ndarray:
        return self.sq_norms.mean(axis=0)

    @property
    def stderr(self) -> np.ndarray:
        return self.sq_norms.std(axis=0, ddof=1) / np.sqrt(self.trials)

    def rows(self) -> list[dict]:
        return [{"variant": self.variant, "M": self.M, "cardinality": int(c), "mean_sq_norm": float(m),
                 "stderr": float(s), "trials": self.trials}
                for c, m, s in zip(self.cardinalities, self.means, self.stderr)]

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["variant", "M", "cardinality", "mean_sq_norm", "stderr", "trials"],
                               lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows())


def prop1_experiment(
    variant: str,
    M: int,
    cardinalities=None,
    trials: int = 2000,
    rng: np.random.Generator | None = None,
    d: int = 32,
    d_out: int = 64,
    P: int = 256,
    embedding_std: float = 1.0,
    absent_var_ratio: float = 1.0,
) -> PropTable:
    """E||theta_S||^2 per cardinality.

    ``presence`` pools only present-feature tokens, ``presence-l2`` also
    normalises the encoding, ``absence`` pools all M tokens with absent
    features contributing their absence embedding (variance scaled by
    ``absent_var_ratio``).
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    if trials < MIN_TRIALS:
        warnings.warn(f"{trials} trials give low statistical power (< {MIN_TRIALS})", LowPowerWarning)
    rng = rng if rng is not None else np.random.default_rng(0)
    cards = np.arange(1, M + 1) if cardinalities is None else np.asarray(cardinalities, dtype=np.int64)
    if cards.min() < 0 or cards.max() > M:
        raise ValueError(f"cardinalities must lie in [0, {M}]")
    out = np.empty((trials, cards.size))
    absent_std = embedding_std * np.sqrt(absent_var_ratio)
    for t in range(trials):
        present = rng.normal(0.0, embedding_std, size=(M, d))
        absent = rng.normal(0.0, absent_std, size=(M, d))
        W_tok = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
        W_out = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d_out))
        W_hyp = rng.normal(0.0, 1.0 / np.sqrt(d_out), size=(d_out, P))
        order = rng.permutation(M)
        masks = np.arange(M)[None, :] < cards[:, None]  # nested prefixes of `order`
        sel = np.zeros((cards.size, M))
        sel[:, order] = masks
        if variant == "absence":
            pooled = sel @ present + (1.0 - sel) @ absent
        else:
            pooled = sel @ present
        z = pooled @ W_tok @ W_out
        if variant == "presence-l2":
            norms = np.linalg.norm(z, axis=1, keepdims=True)
            z = np.divide(z, norms, out=np.zeros_like(z), where=norms > 0)
        theta = z @ W_hyp
        out[t] = (theta ** 2).sum(axis=1)
    return PropTable(variant, M, cards, out)


def through_origin_r2(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Least-squares slope of y = k x and the (centred) coefficient of determination."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    k = float(x @ y / (x @ x))
    ss_res = float(((y - k * x) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return k, 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")


def flatness_ratio(means: np.ndarray) -> float:
    return float(np.max(means) / np.min(means))


def slope_ttest(table: PropTable, alternative: str = "two-sided") -> tuple[float, float, float]:
    """One-sample t-test on per-trial least-squares slopes of ||theta||^2 vs |S|.

    Returns (mean slope, t statistic, p-value).
    """
    c = table.cardinalities.astype(np.float64)
    cc = c - c.mean()
    slopes = (table.sq_norms - table.sq_norms.mean(axis=1, keepdims=True)) @ cc / (cc @ cc)
    res = stats.ttest_1samp(slopes, 0.0, alternative=alternative)
    return float(slopes.mean()), float(res.statistic), float(res.pvalue)
