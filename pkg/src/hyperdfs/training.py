"""Predictor pre-training, joint selector fine-tuning, schedules and Adam."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Dataset, batch_iter, mask_key, sample_subset_excluding
from .hypernet import collapse_loss, layer_mean_squares, scale_loss
from .metrics import f1_macro, predict_at_budgets
from .model import MaskConcatBaseline, ModelConfig
from .selector import SelectorNet, rollout


class TrainingDivergedError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-2
    weight_decay: float = 1e-4
    grad_clip_norm: float = 5.0
    max_epochs: int = 200
    patience: int = 30
    val_fraction: float = 0.10
    warmup_epochs: int = 5
    cosine_min_factor: float = 0.01
    noise_std: float = 0.20
    lambda_scale: float = 0.1
    scale_warmup_epochs: int = 50
    scale_decay_epochs: int = 10
    lambda_collapse: float = 0.01
    mask_budget: int = 4
    warmup_mask_budget: int = 1
    B_max: int = 10
    batch_size: int = 256
    joint_max_epochs: int = 200
    joint_patience: int = 30
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        positive = ("lr", "grad_clip_norm", "max_epochs", "patience", "batch_size", "mask_budget",
                    "warmup_mask_budget", "B_max", "temperature", "joint_max_epochs", "joint_patience")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    phase: str
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf
    stop_reason: str = ""
    seed: int = 0
    wall_clock: float = 0.0
    num_parameters: int = 0
    steps: list[tuple] = field(default_factory=list)  # (total, ce, scale, collapse, lambda_scale)
    seen_masks: set[str] = field(default_factory=set)
    final: dict = field(default_factory=dict)

    def losses(self) -> list[float]:
        return [e["train_loss"] for e in self.epochs]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("steps")
        d["seen_masks"] = len(self.seen_masks)
        return d


# ------------------------------------------------------------ schedules


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig, warmup_steps: int) -> float:
    """Linear ramp lr*f -> lr over the warm-up steps, then cosine decay to lr*f."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    lo = cfg.lr * cfg.cosine_min_factor
    if warmup_steps > 0 and step < warmup_steps:
        return lo + (cfg.lr - lo) * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return lo + 0.5 * (cfg.lr - lo) * (1.0 + math.cos(math.pi * progress))


def scale_lambda(epoch: int, cfg: TrainConfig) -> float:
    """Constant during the scale warm-up, then a linear ramp down to zero."""
    if epoch < cfg.scale_warmup_epochs:
        return cfg.lambda_scale
    end = cfg.scale_warmup_epochs + cfg.scale_decay_epochs
    if epoch >= end or cfg.scale_decay_epochs <= 0:
        return 0.0
    return cfg.lambda_scale * (end - epoch) / cfg.scale_decay_epochs


# --------------------------------------------------------------- optimiser


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads))
    if norm > max_norm:
        factor = max_norm / norm
        grads = [g * factor for g in grads]
    return grads, norm


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: dict, lr: float,
              weight_decay: float, clip: float, betas=(0.9, 0.999), eps: float = 1e-8,
              names: list[str] | None = None) -> float:
    """One AdamW-style update in place; returns the pre-clip gradient norm.

    Decay is decoupled: it shrinks the parameters directly and never enters
    the moment buffers.
    """
    total = sum(float(np.dot(g.ravel(), g.ravel())) for g in grads)
    if not math.isfinite(total):
        for i, g in enumerate(grads):
            if not np.isfinite(g).all():
                label = names[i] if names else (params[i].name or f"#{i}")
                raise TrainingDivergedError(f"non-finite gradient in parameter {label}")
        raise TrainingDivergedError("gradient norm overflowed")
    norm = math.sqrt(total)
    scale = clip / norm if norm > clip else 1.0
    if not state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p.data) for p in params]
        state["v"] = [np.zeros_like(p.data) for p in params]
    state["t"] += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state["t"]
    root_c2 = math.sqrt(1.0 - b2 ** state["t"])
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        tmp = g * ((1.0 - b1) * scale)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= (1.0 - b2) * scale * scale
        v *= b2
        v += tmp
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        np.sqrt(v, out=tmp)
        tmp *= 1.0 / root_c2
        tmp += eps
        np.divide(m, tmp, out=tmp)
        tmp *= lr / c1
        p.data -= tmp
    return norm


class Adam:
    def __init__(self, named_params: list[tuple[str, Tensor]], cfg: TrainConfig):
        self.names = [n for n, _ in named_params]
        self.params = [t for _, t in named_params]
        self.cfg = cfg
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> float:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        return adam_step(self.params, grads, self.state, lr, self.cfg.weight_decay,
                         self.cfg.grad_clip_norm, names=self.names)


# ----------------------------------------------------------------- helpers


def validation_split(dataset: Dataset, fraction: float, rng: np.random.Generator):
    order = rng.permutation(dataset.n)
    n_val = max(1, int(round(fraction * dataset.n)))
    return dataset.subset(np.sort(order[n_val:])), dataset.subset(np.sort(order[:n_val]))


def _means(dataset: Dataset) -> np.ndarray:
    return np.zeros(dataset.num_features) if dataset.feature_means is None else dataset.feature_means


def _impute(X: np.ndarray, mask: np.ndarray, means: np.ndarray) -> np.ndarray:
    return np.where(mask, X, means)


def _validation_masks(val: Dataset, cfg: TrainConfig, excluded) -> np.ndarray:
    vrng = np.random.default_rng([cfg.seed, 0x5A11D])  # separate stream from training masks
    return np.stack([sample_subset_excluding(val.num_features, vrng, excluded).mask for _ in range(val.n)])


def validation_ce(model, val: Dataset, masks: np.ndarray) -> float:
    logits = model.predict_logits(_impute(val.X, masks, _means(val)), masks)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(val.n), val.y].mean())


def _diverged(exc: Exception, phase: str, epoch: int, batch: int) -> TrainingDivergedError:
    return TrainingDivergedError(f"{phase}: non-finite loss at epoch {epoch}, batch {batch}: {exc}")


# ------------------------------------------------------------ pretraining


def pretrain_predictor(
    train: Dataset,
    model,
    cfg: TrainConfig,
    rng: np.random.Generator,
    val: Dataset | None = None,
    excluded: set[str] | None = None,
) -> TrainReport:
    """Uniform-subset training with regularisers, mask budget and LR warm-up;
    early stopping on noise-free validation cross-entropy."""
    t0 = time.perf_counter()
    if val is None:
        train, val = validation_split(train, cfg.val_fraction, rng)
    means = _means(train)
    report = TrainReport(phase="pretrain", seed=cfg.seed, num_parameters=model.num_parameters())
    opt = Adam(list(model.named_parameters()), cfg)
    steps_per_epoch = math.ceil(train.n / cfg.batch_size)
    total_steps = cfg.max_epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    val_masks = _validation_masks(val, cfg, excluded)
    best_state = model.state_dict()
    step = 0
    for epoch in range(cfg.max_epochs):
        K = cfg.warmup_mask_budget if epoch < cfg.warmup_epochs else cfg.mask_budget
        lam_s = scale_lambda(epoch, cfg)
        sums = np.zeros(4)
        n_batches = 0
        for b, batch in enumerate(batch_iter(train, cfg.batch_size, K, rng, excluded)):
            masks = np.stack([s.mask for s in batch.statuses])
            xs = [_impute(batch.X[g], masks[i], means) for i, g in enumerate(batch.groups)]
            try:
                with Tape() as tape:
                    logits, aux = model.forward_groups(xs, Tensor(masks.astype(np.float64)),
                                                       noise_std=cfg.noise_std, rng=rng)
                    ce = ad.cross_entropy(logits, batch.y)
                    total = ce
                    sc_v = col_v = 0.0
                    if aux.params is not None:
                        sc = scale_loss(aux.params, 1.0)
                        col = collapse_loss(aux.encoding.z_tilde, aux.params.flat)
                        total = ce + lam_s * sc + cfg.lambda_collapse * col
                        sc_v, col_v = float(sc.data), float(col.data)
                opt.zero_grad()
                tape.backward(total)
                lr = lr_schedule(min(step, total_steps), total_steps, cfg, warmup_steps)
                opt.step(lr)
            except (ad.NumericDomainError, TrainingDivergedError) as exc:
                raise _diverged(exc, "pretrain", epoch, b) from exc
            step += 1
            report.steps.append((float(total.data), float(ce.data), sc_v, col_v, lam_s))
            report.seen_masks.update(s.key() for s in batch.statuses)
            sums += (float(total.data), float(ce.data), sc_v, col_v)
            n_batches += 1
        val_ce = validation_ce(model, val, val_masks)
        avg = sums / max(n_batches, 1)
        report.epochs.append({"epoch": epoch, "train_loss": avg[0], "train_ce": avg[1],
                              "scale": avg[2], "collapse": avg[3], "val_loss": val_ce,
                              "lr": lr, "mask_budget": K})
        if val_ce < report.best_val:
            report.best_val, report.best_epoch = val_ce, epoch
            best_state = model.state_dict()
        elif epoch - report.best_epoch >= cfg.patience:
            report.stop_reason = f"early stop: no improvement for {cfg.patience} epochs"
            break
    else:
        report.stop_reason = "max epochs"
    model.load_state_dict(best_state)
    report.final = {"val_ce": validation_ce(model, val, val_masks)}
    if hasattr(model, "hyper"):
        _, params = model.generate(val_masks[:64].astype(np.float64))
        ms = layer_mean_squares(params).mean(axis=0)
        report.final["layer_mean_square"] = ms.tolist()
        report.final["xavier_targets"] = [model.spec.xavier_target(l) for l in range(model.spec.num_layers)]
    report.wall_clock = time.perf_counter() - t0
    return report


def build_mask_concat_baseline(train: Dataset, cfg: TrainConfig, rng: np.random.Generator,
                               model_cfg: ModelConfig | None = None, val: Dataset | None = None,
                               excluded: set[str] | None = None):
    """Shared perceptron on [x_tilde || mask] trained on uniform subsets."""
    model_cfg = model_cfg or ModelConfig(train.num_features, train.num_classes)
    model = MaskConcatBaseline(model_cfg, rng)
    report = pretrain_predictor(train, model, cfg, rng, val=val, excluded=excluded)
    return model, report


# -------------------------------------------------------------- joint phase


def _proxy_budgets(cfg: TrainConfig, M: int) -> list[int]:
    top = min(cfg.B_max, M)
    return sorted({min(max(b, 1), top) for b in (2, cfg.B_max // 2, cfg.B_max)})


def validation_f1_proxy(model, selector: SelectorNet, val: Dataset, cfg: TrainConfig) -> float:
    budgets = _proxy_budgets(cfg, val.num_features)
    preds = predict_at_budgets(model, selector, val.X, budgets, means=_means(val))
    return float(np.mean([f1_macro(preds[b], val.y, val.num_classes) for b in budgets]))


def train_selector_joint(
    train: Dataset,
    model,
    selector: SelectorNet,
    cfg: TrainConfig,
    rng: np.random.Generator,
    val: Dataset | None = None,
    excluded: set[str] | None = None,
    epoch_offset: int = 0,
) -> TrainReport:
    """Gumbel straight-through rollouts of a shared length per mini-batch,
    cross-entropy at the final status, backpropagated through the whole
    trajectory into selector and predictor."""
    t0 = time.perf_counter()
    if val is None:
        train, val = validation_split(train, cfg.val_fraction, rng)
    means = _means(train)
    M = train.num_features
    report = TrainReport(phase="joint", seed=cfg.seed,
                         num_parameters=model.num_parameters() + selector.num_parameters())
    named = [("predictor." + n, t) for n, t in model.named_parameters()]
    named += [("selector." + n, t) for n, t in selector.named_parameters()]
    opt = Adam(named, cfg)
    steps_per_epoch = math.ceil(train.n / cfg.batch_size)
    total_steps = cfg.joint_max_epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    best_pred, best_sel = model.state_dict(), selector.state_dict()
    step = 0
    top = min(cfg.B_max, M)
    for epoch in range(cfg.joint_max_epochs):
        lam_s = scale_lambda(epoch_offset + epoch, cfg)
        order = rng.permutation(train.n)
        sums = np.zeros(4)
        n_batches = 0
        for b, start in enumerate(range(0, train.n, cfg.batch_size)):
            rows = order[start:start + cfg.batch_size]
            X, y = train.X[rows], train.y[rows]
            tau = int(rng.integers(1, top + 1))
            try:
                with Tape() as tape:
                    traj = rollout(X, selector, tau, mode="train", means=means,
                                   temperature=cfg.temperature, rng=rng)
                    final = traj.final_mask()
                    keys = [mask_key(m) for m in final]
                    keep = np.array([not (excluded and k in excluded) for k in keys])
                    x_t, m_t, y_b = traj.x_tilde, traj.mask, y
                    if not keep.all():
                        # held-out masks must not reach the predictor, not even its regularisers
                        if not keep.any():
                            continue
                        idx = np.flatnonzero(keep)
                        x_t, m_t, y_b = ad.take_rows(x_t, idx), ad.take_rows(m_t, idx), y[idx]
                    logits, aux = model.forward_rows(x_t, m_t, noise_std=cfg.noise_std, rng=rng)
                    ce = ad.cross_entropy(logits, y_b)
                    total = ce
                    sc_v = col_v = 0.0
                    if aux.params is not None:
                        col = collapse_loss(aux.encoding.z_tilde, aux.params.flat)
                        total = total + cfg.lambda_collapse * col
                        col_v = float(col.data)
                        if lam_s > 0:
                            sc = scale_loss(aux.params, 1.0)
                            total = total + lam_s * sc
                            sc_v = float(sc.data)
                opt.zero_grad()
                tape.backward(total)
                if step == 0:
                    report.final["first_selector_grad_norm"] = math.sqrt(sum(
                        float((p.grad ** 2).sum()) for p in selector.parameters() if p.grad is not None))
                lr = lr_schedule(min(step, total_steps), total_steps, cfg, warmup_steps)
                opt.step(lr)
            except (ad.NumericDomainError, TrainingDivergedError) as exc:
                raise _diverged(exc, "joint", epoch, b) from exc
            step += 1
            report.steps.append((float(total.data), float(ce.data), sc_v, col_v, lam_s))
            report.seen_masks.update(k for k, kp in zip(keys, keep) if kp)
            sums += (float(total.data), float(ce.data), sc_v, col_v)
            n_batches += 1
        proxy = validation_f1_proxy(model, selector, val, cfg)
        val_loss = 1.0 - proxy
        avg = sums / max(n_batches, 1)
        report.epochs.append({"epoch": epoch, "train_loss": avg[0], "train_ce": avg[1],
                              "scale": avg[2], "collapse": avg[3], "val_loss": val_loss,
                              "val_f1_proxy": proxy, "lr": lr})
        if val_loss < report.best_val:
            report.best_val, report.best_epoch = val_loss, epoch
            best_pred, best_sel = model.state_dict(), selector.state_dict()
        elif epoch - report.best_epoch >= cfg.joint_patience:
            report.stop_reason = f"early stop: no improvement for {cfg.joint_patience} epochs"
            break
    else:
        report.stop_reason = "max epochs"
    model.load_state_dict(best_pred)
    selector.load_state_dict(best_sel)
    report.final["val_f1_proxy"] = validation_f1_proxy(model, selector, val, cfg)
    report.wall_clock = time.perf_counter() - t0
    return report
