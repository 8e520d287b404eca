"""Command-line entry point: ``hyperdfs <command> ...``.

Exit codes: 0 success, 1 usage error, 2 protocol or integrity error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointFormatError, CheckpointIntegrityError, DatasetMismatchError, load_checkpoint
from .data import Dataset, mask_key, read_csv, read_masks, standardize_fit_transform, write_csv
from .metrics import ProtocolViolationError, auac, auac_f1, default_budgets, zero_shot_eval
from .runner import GENERATORS, RunExistsError, run_experiment
from .training import TrainingDivergedError

EXIT_OK, EXIT_USAGE, EXIT_PROTOCOL = 0, 1, 2
PROTOCOL_ERRORS = (ProtocolViolationError, CheckpointFormatError, CheckpointIntegrityError,
                   DatasetMismatchError, RunExistsError, TrainingDivergedError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def parse_budgets(text: str) -> list[int]:
    """``2:10`` (inclusive range) or ``2,4,6``."""
    try:
        if ":" in text:
            lo, hi = (int(v) for v in text.split(":"))
            out = list(range(lo, hi + 1))
        else:
            out = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad budget list {text!r}") from None
    if not out or min(out) < 0:
        raise argparse.ArgumentTypeError(f"bad budget list {text!r}")
    return out


def _write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2), encoding="utf-8")


def cmd_gen(args) -> int:
    ds = GENERATORS[args.dataset](args.n, seed=args.seed)
    write_csv(ds, args.out)
    manifest = {"dataset": args.dataset, "n": ds.n, "seed": args.seed, "M": ds.num_features, "C": ds.num_classes}
    _write_json(manifest, Path(str(args.out) + ".json"))
    print(f"wrote {ds.n} rows x {ds.num_features} features to {args.out}")
    return EXIT_OK


def _load_eval_data(args, ckpt) -> Dataset:
    ds = read_csv(args.data)
    M = ckpt.model_config["M"]
    if ds.num_features != M:
        raise UsageError(f"{args.data} has {ds.num_features} features, checkpoint expects {M}")
    ds.X = ckpt.standardize(ds.X)
    return ds


def cmd_train(args) -> int:
    from .checkpoint import make_checkpoint, save_checkpoint
    from .model import HyperDFSPredictor, ModelConfig
    from .selector import SelectorNet
    from .training import TrainConfig, build_mask_concat_baseline, pretrain_predictor, train_selector_joint

    cfg = TrainConfig.from_json(args.config)
    ds = read_csv(args.data)
    X, _, mean, std = standardize_fit_transform(ds.X)
    train = Dataset(X, ds.y, ds.num_classes, ds.feature_names, np.zeros(ds.num_features), ds.name)
    excluded = set()
    if args.heldout:
        excluded = {s.key() for s in read_masks(args.heldout, ds.num_features)}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mcfg = ModelConfig(ds.num_features, ds.num_classes)
    rng = np.random.default_rng(cfg.seed)
    model = HyperDFSPredictor(mcfg, rng)
    pre = pretrain_predictor(train, model, cfg, rng, excluded=excluded)
    selector = SelectorNet(ds.num_features, rng)
    joint = train_selector_joint(train, model, selector, cfg, rng, excluded=excluded, epoch_offset=len(pre.epochs))
    seen = pre.seen_masks | joint.seen_masks
    save_checkpoint(make_checkpoint(model, selector, mcfg, cfg.to_dict(), ds.content_hash(), seen, (mean, std)),
                    out / "model.ckpt")
    reports = {"pretrain": pre.to_dict(), "joint": joint.to_dict()}
    if args.baseline:
        base, brep = build_mask_concat_baseline(train, cfg, np.random.default_rng([cfg.seed, 2]),
                                                model_cfg=mcfg, excluded=excluded)
        save_checkpoint(make_checkpoint(base, None, mcfg, cfg.to_dict(), ds.content_hash(), brep.seen_masks,
                                        (mean, std)), out / "baseline.ckpt")
        reports["baseline"] = brep.to_dict()
    _write_json(reports, out / "train_report.json")
    print(f"saved checkpoint(s) to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, selector = ckpt.build()
    ds = _load_eval_data(args, ckpt)
    if args.policy == "learned" and selector is None:
        raise UsageError("checkpoint has no selector; use --policy random")
    budgets = args.budgets or default_budgets(ds.num_features)
    if max(budgets) > ds.num_features:
        raise UsageError(f"budget {max(budgets)} exceeds the {ds.num_features} features")
    curve, value = auac_f1(model, selector, ds.X, ds.y, model.cfg.num_classes, budgets, policy=args.policy,
                           rng=np.random.default_rng(args.seed))
    if args.trajectories:
        from .selector import random_rollout, rollout, write_trajectory_csv

        if args.policy == "learned":
            traj = rollout(ds.X, selector, max(budgets), mode="eval")
        else:  # same seed, hence the same draws as the evaluation above
            traj = random_rollout(ds.X, max(budgets), np.random.default_rng(args.seed))
        write_trajectory_csv(traj, args.trajectories)
    result = {"policy": args.policy, "per_budget": {str(b): v for b, v in curve.items()}, "auac_f1": value,
              "checkpoint_kind": ckpt.kind}
    _write_json(result, args.out)
    print(f"AUAC-F1 ({args.policy}) = {value:.4f}")
    return EXIT_OK


def cmd_zeroshot(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, _ = ckpt.build()
    ds = _load_eval_data(args, ckpt)
    masks = np.stack([s.mask for s in read_masks(args.masks, ds.num_features)])
    table = zero_shot_eval(model, ds.X, ds.y, model.cfg.num_classes, masks, seen=set(ckpt.seen_masks))
    result = {"per_cardinality": {str(c): v for c, v in table.items()}, "auac_f1": auac(table),
              "masks": [mask_key(m) for m in masks], "checkpoint_kind": ckpt.kind}
    _write_json(result, args.out)
    print(f"zero-shot AUAC-F1 = {result['auac_f1']:.4f} over {len(masks)} held-out masks")
    return EXIT_OK


def cmd_propcheck(args) -> int:
    from .propcheck import flatness_ratio, prop1_experiment, slope_ttest, through_origin_r2

    variant = {"presence": "presence", "presence-l2": "presence-l2", "absence": "absence"}[args.variant]
    table = prop1_experiment(variant, args.m, trials=args.trials, rng=np.random.default_rng(args.seed),
                             absent_var_ratio=args.absent_var_ratio)
    table.write_csv(args.out)
    k, r2 = through_origin_r2(table.cardinalities, table.means)
    slope, t, p = slope_ttest(table)
    print(f"{variant} M={args.m}: slope-through-origin={k:.4g} R2={r2:.4f} "
          f"max/min={flatness_ratio(table.means):.4f} trial-slope={slope:.4g} (t={t:.2f}, p={p:.3g})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    ok, results = run_gradcheck(range(args.seeds), tol=args.tol)
    for r in results:
        print(f"seed {r.seed:3d}: max rel error {r.max_rel_error:.3e}")
    worst = max(r.max_rel_error for r in results)
    print(f"{'PASS' if ok else 'FAIL'}: worst {worst:.3e} (tolerance {args.tol:g})")
    return EXIT_OK if ok else EXIT_PROTOCOL


def cmd_run(args) -> int:
    out = run_experiment(args.config, args.out, force=args.force)
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    for policy, entry in report["policies"].items():
        print(f"{policy:>18s}: AUAC-F1 {entry['auac']:.4f} (fold std {entry['fold_std']:.4f})")
    for name, st in report["sign_tests"].items():
        print(f"{name}: {st['wins']} wins / {st['losses']} losses / {st['ties']} ties, p={st['p_value']:.4g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hyperdfs", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset as CSV")
    g.add_argument("--dataset", choices=sorted(GENERATORS), required=True)
    g.add_argument("--n", type=int, default=10_000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="pretrain + joint-train on a CSV dataset")
    t.add_argument("--config", required=True, help="JSON file with training config fields")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--heldout", help="masks file excluded from the training sampler")
    t.add_argument("--baseline", action="store_true", help="also train the mask-concatenation baseline")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="acquisition-curve evaluation")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--budgets", type=parse_budgets, default=None, help="e.g. 2:10 or 2,4,6")
    e.add_argument("--policy", choices=["learned", "random"], default="learned")
    e.add_argument("--seed", type=int, default=0, help="seed of the random policy")
    e.add_argument("--out", required=True)
    e.add_argument("--trajectories", help="also dump acquisitions as CSV (sample_id, step, feature_index)")
    e.set_defaults(func=cmd_eval)

    z = sub.add_parser("zeroshot", help="evaluate on held-out masks")
    z.add_argument("--checkpoint", required=True)
    z.add_argument("--data", required=True)
    z.add_argument("--masks", required=True)
    z.add_argument("--out", required=True)
    z.set_defaults(func=cmd_zeroshot)

    pc = sub.add_parser("propcheck", help="Monte-Carlo weight-norm vs subset-size check")
    pc.add_argument("--variant", choices=["presence", "presence-l2", "absence"], required=True)
    pc.add_argument("--m", type=int, default=20)
    pc.add_argument("--trials", type=int, default=2000)
    pc.add_argument("--seed", type=int, default=0)
    pc.add_argument("--absent-var-ratio", type=float, default=1.0)
    pc.add_argument("--out", required=True)
    pc.set_defaults(func=cmd_propcheck)

    gc = sub.add_parser("gradcheck", help="finite-difference audit of the full loss")
    gc.add_argument("--seeds", type=int, default=20)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("run", help="full experiment from a run config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    r.set_defaults(func=cmd_run)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"hyperdfs: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except PROTOCOL_ERRORS as exc:
        print(f"hyperdfs: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (UsageError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"hyperdfs: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
