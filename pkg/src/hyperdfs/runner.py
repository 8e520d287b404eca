"""Experiment runner: data -> folds x seeds -> pretrain -> joint -> evaluation.

A run directory holds

* ``manifest.json``  config echo, seeds, version, timings and a status field
* ``jobs/``          one result file per finished (fold, seed) job, used to resume
* ``checkpoints/``   predictor/selector and baseline checkpoints per job
* ``curves.csv``     dataset, fold, seed, policy, budget, f1_macro
* ``report.json``    aggregates computed only from the rows of curves.csv

``report.json`` carries no timings so identical configs give identical bytes.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from .checkpoint import make_checkpoint, save_checkpoint
from .data import Dataset, mask_key, read_csv, standardize_split, stratified_kfold
from .metrics import (curve_from_predictions, default_budgets, predict_at_budgets, predict_with_masks,
                      sample_heldout_masks, zero_shot_eval)
from .model import HyperDFSPredictor, ModelConfig
from .selector import SelectorNet
from .synthetic import gen_proxy_substitution, gen_synergistic_pairs
from .training import TrainConfig, build_mask_concat_baseline, pretrain_predictor, train_selector_joint

log = logging.getLogger(__name__)

GENERATORS = {"proxysub": gen_proxy_substitution, "synpairs": gen_synergistic_pairs}
CURVE_FIELDS = ["dataset", "fold", "seed", "policy", "budget", "f1_macro"]
# (better, reference) pairs compared by one-sided sign tests
COMPARISONS = {
    "learned_vs_random": ("learned", "random"),
    "hyperdfs_vs_baseline": ("learned", "baseline"),
    "zeroshot_vs_baseline": ("zeroshot", "zeroshot-baseline"),
    "zeroshot_pretrain_vs_baseline": ("zeroshot-pretrain", "zeroshot-baseline"),
}


class RunExistsError(RuntimeError):
    pass


@dataclass
class RunConfig:
    dataset: str = "proxysub"
    data: str | None = None  # CSV path; overrides the generator when set
    n: int = 10_000
    data_seed: int = 0
    folds: int = 5
    fold_seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    budgets: list[int] | None = None  # default 2..min(10, M)
    train: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    selector_hidden: int = 64
    baseline: bool = True
    zeroshot_per_cardinality: int = 3
    zeroshot_max_cardinality: int = 10
    zeroshot_seed: int = 12345
    job_limit: int | None = None  # run only the first N jobs (smoke runs)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        cfg = cls(**d)
        TrainConfig.from_dict(cfg.train)  # validate early
        bad = set(cfg.model) - {f.name for f in fields(ModelConfig)} | ({"M", "num_classes"} & set(cfg.model))
        if bad:
            raise ValueError(f"invalid model config keys: {sorted(bad)}")
        if cfg.data is None and cfg.dataset not in GENERATORS:
            raise ValueError(f"dataset must be one of {sorted(GENERATORS)} or give a data path")
        return cfg

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def load_dataset(self) -> Dataset:
        if self.data is not None:
            return read_csv(self.data)
        return GENERATORS[self.dataset](self.n, seed=self.data_seed)

    def jobs(self) -> list[tuple[int, int]]:
        jobs = [(f, s) for f in range(self.folds) for s in self.seeds]
        return jobs if self.job_limit is None else jobs[: self.job_limit]


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)


def heldout_masks_for(cfg: RunConfig, M: int) -> np.ndarray:
    """Zero-shot masks, fixed per run so every job and method shares them."""
    return sample_heldout_masks(M, np.random.default_rng(cfg.zeroshot_seed),
                                cfg.zeroshot_per_cardinality, cfg.zeroshot_max_cardinality)


def run_job(cfg: RunConfig, dataset: Dataset, fold: int, seed: int, out_dir: Path) -> dict:
    """Train and evaluate one (fold, seed) job; returns curve rows and summaries."""
    t0 = time.perf_counter()
    tcfg = TrainConfig.from_dict({**cfg.train, "seed": seed})
    split = stratified_kfold(dataset.y, cfg.folds, np.random.default_rng(cfg.fold_seed))
    tr_idx, ev_idx = split.train_eval(fold)
    train, evaluation, mean, std = standardize_split(dataset.subset(tr_idx), dataset.subset(ev_idx))
    M, C = dataset.num_features, dataset.num_classes
    budgets = cfg.budgets or default_budgets(M)
    heldout = heldout_masks_for(cfg, M)
    excluded = {mask_key(m) for m in heldout}
    mcfg = ModelConfig(M, C, **cfg.model)
    name = cfg.dataset if cfg.data is None else Path(cfg.data).stem
    timings = {}

    rng = np.random.default_rng([seed, fold, 0])
    model = HyperDFSPredictor(mcfg, rng)
    pre = pretrain_predictor(train, model, tcfg, rng, excluded=excluded)
    # diagnostic: the mask-conditioned predictor before policy-driven fine-tuning
    zs_pre = zero_shot_eval(model, evaluation.X, evaluation.y, C, heldout, seen=pre.seen_masks)
    selector = SelectorNet(M, rng, hidden=cfg.selector_hidden)
    joint = train_selector_joint(train, model, selector, tcfg, rng, excluded=excluded,
                                 epoch_offset=len(pre.epochs))
    timings["hyperdfs_train"] = time.perf_counter() - t0
    seen = pre.seen_masks | joint.seen_masks

    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    save_checkpoint(make_checkpoint(model, selector, mcfg, tcfg.to_dict(), dataset.content_hash(), seen,
                                    (mean, std), {"fold": fold, "seed": seed}),
                    ckpt_dir / f"fold{fold}_seed{seed}_hyperdfs.ckpt")

    rows = []

    def add(policy: str, curve: dict):
        rows.extend({"dataset": name, "fold": fold, "seed": seed, "policy": policy, "budget": int(b),
                     "f1_macro": float(v)} for b, v in sorted(curve.items()))

    X, y = evaluation.X, evaluation.y
    preds, masks = predict_at_budgets(model, selector, X, budgets, policy="learned", return_masks=True)
    add("learned", curve_from_predictions(preds, y, C))
    add("random", curve_from_predictions(
        predict_at_budgets(model, None, X, budgets, policy="random",
                           rng=np.random.default_rng([seed, fold, 3])), y, C))
    add("zeroshot", zero_shot_eval(model, X, y, C, heldout, seen=seen))
    add("zeroshot-pretrain", zs_pre)

    summary = {"pretrain": _train_summary(pre), "joint": _train_summary(joint)}
    if cfg.baseline:
        t1 = time.perf_counter()
        brng = np.random.default_rng([seed, fold, 2])
        base, brep = build_mask_concat_baseline(train, tcfg, brng, model_cfg=mcfg, excluded=excluded)
        timings["baseline_train"] = time.perf_counter() - t1
        save_checkpoint(make_checkpoint(base, None, mcfg, tcfg.to_dict(), dataset.content_hash(),
                                        brep.seen_masks, (mean, std), {"fold": fold, "seed": seed}),
                        ckpt_dir / f"fold{fold}_seed{seed}_baseline.ckpt")
        # identical masks to the learned Hyper-DFS trajectories, for a controlled comparison
        add("baseline", curve_from_predictions(predict_with_masks(base, X, masks), y, C))
        add("zeroshot-baseline", zero_shot_eval(base, X, y, C, heldout, seen=brep.seen_masks))
        summary["baseline"] = _train_summary(brep)
    timings["total"] = time.perf_counter() - t0
    return {"fold": fold, "seed": seed, "rows": rows, "summary": summary, "timings": timings}


def _train_summary(rep) -> dict:
    return {"epochs": len(rep.epochs), "best_epoch": rep.best_epoch, "best_val": rep.best_val,
            "stop_reason": rep.stop_reason, "num_parameters": rep.num_parameters, "final": rep.final}


def sign_test(better: list[float], reference: list[float]) -> dict:
    """One-sided sign test that ``better`` beats ``reference``; ties dropped."""
    diffs = np.asarray(better) - np.asarray(reference)
    wins, losses = int((diffs > 0).sum()), int((diffs < 0).sum())
    ties = int(diffs.size - wins - losses)
    p = float(stats.binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue) if wins + losses else 1.0
    return {"wins": wins, "losses": losses, "ties": ties, "p_value": p}


def aggregate(rows: list[dict]) -> dict:
    """Report built exclusively from curve rows."""
    by_policy: dict[str, dict] = {}
    for r in rows:
        by_policy.setdefault(r["policy"], {}).setdefault((r["fold"], r["seed"]), {})[r["budget"]] = r["f1_macro"]
    report = {"policies": {}, "sign_tests": {}}
    for policy, jobs in sorted(by_policy.items()):
        keys = sorted(jobs)
        budgets = sorted({b for curve in jobs.values() for b in curve})
        job_auac = {k: float(np.mean([jobs[k][b] for b in budgets])) for k in keys}
        folds = sorted({f for f, _ in keys})
        seeds = sorted({s for _, s in keys})
        fold_auac = [float(np.mean([job_auac[k] for k in keys if k[0] == f])) for f in folds]
        seed_auac = [float(np.mean([job_auac[k] for k in keys if k[1] == s])) for s in seeds]
        per_budget = {str(b): float(np.mean([jobs[k][b] for k in keys])) for b in budgets}
        report["policies"][policy] = {
            "per_budget": per_budget,
            "auac": float(np.mean(list(per_budget.values()))),
            "fold_auac": fold_auac,
            "fold_std": float(np.std(fold_auac, ddof=1)) if len(fold_auac) > 1 else 0.0,
            "seed_auac": seed_auac,
            "seed_std": float(np.std(seed_auac, ddof=1)) if len(seed_auac) > 1 else 0.0,
            "job_auac": {f"fold{f}_seed{s}": job_auac[(f, s)] for f, s in keys},
            "zero_shot": policy.startswith("zeroshot"),
        }
    for name, (a, b) in COMPARISONS.items():
        if a in report["policies"] and b in report["policies"]:
            ja, jb = report["policies"][a]["job_auac"], report["policies"][b]["job_auac"]
            common = sorted(set(ja) & set(jb))
            report["sign_tests"][name] = sign_test([ja[k] for k in common], [jb[k] for k in common])
    return report


def write_curves(rows: list[dict], path: Path) -> None:
    rows = sorted(rows, key=lambda r: (r["dataset"], r["fold"], r["seed"], r["policy"], r["budget"]))
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "f1_macro": repr(r["f1_macro"])})


def read_curves(path: Path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [{"dataset": r["dataset"], "fold": int(r["fold"]), "seed": int(r["seed"]), "policy": r["policy"],
                 "budget": int(r["budget"]), "f1_macro": float(r["f1_macro"])} for r in csv.DictReader(fh)]


def _thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("HYPERDFS_THREADS", "1")))
    except ValueError:
        return 1


def _job_entry(args):
    cfg_dict, fold, seed, out_dir = args
    cfg = RunConfig.from_dict(cfg_dict)
    return run_job(cfg, cfg.load_dataset(), fold, seed, Path(out_dir))


def run_experiment(config_path: str | Path, out_dir: str | Path, force: bool = False) -> Path:
    cfg = RunConfig.from_json(config_path)
    out = Path(out_dir)
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        previous = json.loads(manifest_path.read_text(encoding="utf-8"))
        if force:
            shutil.rmtree(out)
        elif previous.get("config") != cfg.to_dict():
            raise RunExistsError(f"{out} holds a run with a different config; use --force to overwrite")
        elif previous.get("status") == "complete":
            raise RunExistsError(f"{out} already holds a complete run; use --force to overwrite")
        else:
            log.info("resuming partial run in %s", out)
    elif force and out.exists():
        shutil.rmtree(out)
    (out / "jobs").mkdir(parents=True, exist_ok=True)

    dataset = cfg.load_dataset()
    jobs = cfg.jobs()
    manifest = {
        "status": "running",
        "config": cfg.to_dict(),
        "version": __version__,
        "dataset_hash": dataset.content_hash(),
        "seeds": cfg.seeds,
        "jobs": [f"fold{f}_seed{s}" for f, s in jobs],
        "timings": {},
    }
    manifest_path.write_text(_dumps(manifest), encoding="utf-8")

    todo = [(f, s) for f, s in jobs if not (out / "jobs" / f"fold{f}_seed{s}.json").exists()]
    t0 = time.perf_counter()

    def store(result):
        path = out / "jobs" / f"fold{result['fold']}_seed{result['seed']}.json"
        tmp = path.with_suffix(".tmp")
        tmp.write_text(_dumps(result), encoding="utf-8")
        tmp.replace(path)

    cap = min(_thread_cap(), max(len(todo), 1))
    if cap > 1:
        with ProcessPoolExecutor(max_workers=cap) as pool:
            for result in pool.map(_job_entry, [(cfg.to_dict(), f, s, str(out)) for f, s in todo]):
                store(result)
    else:
        for f, s in todo:
            log.info("job fold=%d seed=%d", f, s)
            store(run_job(cfg, dataset, f, s, out))

    results = [json.loads((out / "jobs" / f"fold{f}_seed{s}.json").read_text(encoding="utf-8")) for f, s in jobs]
    rows = [r for res in results for r in res["rows"]]
    write_curves(rows, out / "curves.csv")
    report = aggregate(read_curves(out / "curves.csv"))
    report["dataset"] = dataset.name if cfg.data else cfg.dataset
    report["dataset_hash"] = dataset.content_hash()
    (out / "report.json").write_text(_dumps(report), encoding="utf-8")
    manifest["timings"] = {"wall_clock": time.perf_counter() - t0,
                           "jobs": {f"fold{r['fold']}_seed{r['seed']}": r["timings"] for r in results}}
    manifest["status"] = "complete"
    manifest_path.write_text(_dumps(manifest), encoding="utf-8")
    return out
