"""Macro-F1, acquisition curves, zero-shot evaluation and fold summaries."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import mask_key
from .selector import SelectorNet, random_rollout, rollout


class ProtocolViolationError(RuntimeError):
    """Evaluation data leaked into training."""


def f1_macro(preds, labels, num_classes: int) -> float:
    """Unweighted mean of per-class F1; a class with no support and no
    predictions scores 0."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.size == 0 or labels.size == 0:
        raise ValueError("f1_macro needs at least one prediction")
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    if preds.min() < 0 or labels.min() < 0 or max(preds.max(), labels.max()) >= num_classes:
        raise ValueError(f"class index outside [0, {num_classes})")
    tp = np.bincount(labels[preds == labels], minlength=num_classes).astype(np.float64)
    n_pred = np.bincount(preds, minlength=num_classes)
    n_true = np.bincount(labels, minlength=num_classes)
    denom = n_pred + n_true
    f1 = np.divide(2.0 * tp, denom, out=np.zeros(num_classes), where=denom > 0)
    return float(f1.mean())


def auac(per_budget: dict | list) -> float:
    values = list(per_budget.values()) if isinstance(per_budget, dict) else list(per_budget)
    if not values:
        raise ValueError("no budgets")
    return float(np.mean(values))


def default_budgets(M: int, lo: int = 2, hi: int = 10) -> list[int]:
    hi = min(hi, M)
    return list(range(min(lo, hi), hi + 1))


def predict_at_budgets(
    model,
    selector: SelectorNet | None,
    X: np.ndarray,
    budgets,
    means: np.ndarray | None = None,
    policy: str = "learned",
    rng: np.random.Generator | None = None,
    return_masks: bool = False,
):
    """Class predictions for every budget from one rollout of length max(budgets).

    Each budget reads the status snapshot of that prefix length.
    """
    budgets = sorted(set(int(b) for b in budgets))
    M = X.shape[1]
    if budgets[0] < 0 or budgets[-1] > M:
        raise ValueError(f"budgets must lie in [0, {M}], got {budgets}")
    if policy == "learned":
        if selector is None:
            raise ValueError("learned policy needs a selector")
        traj = rollout(X, selector, budgets[-1], mode="eval", means=means)
    elif policy == "random":
        if rng is None:
            raise ValueError("random policy needs an rng")
        traj = random_rollout(X, budgets[-1], rng, means=means)
    else:
        raise ValueError(f"unknown policy {policy!r}")
    means = np.zeros(M) if means is None else means
    preds, masks = {}, {}
    for b in budgets:
        mask = traj.masks[b]
        logits = model.predict_logits(np.where(mask, X, means), mask)
        preds[b] = logits.argmax(axis=1)
        masks[b] = mask
    return (preds, masks) if return_masks else preds


def predict_with_masks(model, X: np.ndarray, masks: dict, means: np.ndarray | None = None) -> dict:
    """Predictions on precomputed per-budget masks (controlled comparisons)."""
    means = np.zeros(X.shape[1]) if means is None else means
    return {b: model.predict_logits(np.where(m, X, means), m).argmax(axis=1) for b, m in masks.items()}


def curve_from_predictions(preds: dict, y: np.ndarray, num_classes: int) -> dict[int, float]:
    return {b: f1_macro(p, y, num_classes) for b, p in sorted(preds.items())}


def auac_f1(model, selector, X, y, num_classes: int, budgets=None, policy: str = "learned",
            means=None, rng=None) -> tuple[dict[int, float], float]:
    budgets = default_budgets(X.shape[1]) if budgets is None else list(budgets)
    if max(budgets) > X.shape[1]:
        raise ValueError(f"budget {max(budgets)} exceeds {X.shape[1]} features")
    curve = curve_from_predictions(
        predict_at_budgets(model, selector, X, budgets, means, policy, rng), y, num_classes)
    return curve, auac(curve)


def check_disjoint(heldout: np.ndarray, seen: set[str] | None) -> None:
    if not seen:
        return
    leaked = {mask_key(m) for m in np.asarray(heldout, dtype=bool)} & seen
    if leaked:
        raise ProtocolViolationError(f"{len(leaked)} held-out mask(s) were seen during training")


def zero_shot_eval(model, X: np.ndarray, y: np.ndarray, num_classes: int, heldout: np.ndarray,
                   means: np.ndarray | None = None, seen: set[str] | None = None) -> dict[int, float]:
    """Mean F1 over held-out masks, grouped by cardinality."""
    heldout = np.atleast_2d(np.asarray(heldout, dtype=bool))
    check_disjoint(heldout, seen)
    means = np.zeros(X.shape[1]) if means is None else means
    by_card = defaultdict(list)
    for m in heldout:
        logits = model.predict_logits(np.where(m, X, means), m)
        by_card[int(m.sum())].append(f1_macro(logits.argmax(axis=1), y, num_classes))
    return {c: float(np.mean(v)) for c, v in sorted(by_card.items())}


def sample_heldout_masks(M: int, rng: np.random.Generator, per_cardinality: int = 3,
                         max_cardinality: int = 10) -> np.ndarray:
    """Distinct random masks of cardinality 2..min(max_cardinality, M-1)."""
    out, seen = [], set()
    for c in range(2, min(max_cardinality, M - 1) + 1):
        got, attempts = 0, 0
        while got < per_cardinality and attempts < 1000:
            attempts += 1
            m = np.zeros(M, dtype=bool)
            m[rng.choice(M, size=c, replace=False)] = True
            k = mask_key(m)
            if k not in seen:
                seen.add(k)
                out.append(m)
                got += 1
    return np.array(out, dtype=bool).reshape(-1, M)


@dataclass
class EvalReport:
    policy: str
    zero_shot: bool
    budgets: list[int]
    per_fold: list[dict[int, float]] = field(default_factory=list)

    @property
    def fold_auac(self) -> list[float]:
        return [auac(curve) for curve in self.per_fold]

    @property
    def per_budget(self) -> dict[int, float]:
        return {b: float(np.mean([c[b] for c in self.per_fold])) for b in self.budgets}

    @property
    def auac(self) -> float:
        return auac(self.per_budget)

    @property
    def std(self) -> float:
        vals = self.fold_auac
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_fold"] = [{str(b): v for b, v in curve.items()} for curve in self.per_fold]
        d.update(per_budget={str(b): v for b, v in self.per_budget.items()},
                 auac=self.auac, std=self.std, fold_auac=self.fold_auac)
        return d
