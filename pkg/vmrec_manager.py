#!/usr/bin/env python3
"""
VM-Rec Manager

This script runs the cold-start recommendation pipeline stage by stage.
It provides commands for:
1. Preparing the temporal warm/validation/test split of an interaction log
2. Training the frozen base recommender (BPR or LightGCN)
3. Training the parameter generator that maps a cold user's first items to an embedding
4. Evaluating VM-Rec and the baselines at 1/2/3 shots (all, easy or hard users)
5. Distribution ablations, diagnostics and sensitivity sweeps
6. Running the whole workflow in order

Usage:
    python vmrec_manager.py prepare --data data/ml-100k/u.data
    python vmrec_manager.py train-base --base bpr
    python vmrec_manager.py train-mapper --base bpr
    python vmrec_manager.py evaluate --method vmrec,rm_init --k 1,2,3 --subset easy
    python vmrec_manager.py ablate --kind gaussian
    python vmrec_manager.py diagnose --grad-check
    python vmrec_manager.py workflow
"""

import os
import sys
import time
import logging
import argparse
from dataclasses import replace

import torch

# Put scripts/ on the path so we can import common modules
sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), "scripts"))
from utils.errors import EvaluationError, VMRecError
from utils.numerics import Rng
from utils.datastore import load_interactions, load_split, save_split, temporal_user_split
from utils.run_utils import (ArtifactPaths, config_digest, finalize_config, format_count, format_duration,
                             load_run_config, require_artifact, write_run_manifest)
from generation.basemodels import (BASE_KINDS, cluster_distance_diagnostic, load_base_model, save_base_model,
                                   train_base_model)
from generation.mapper import load_generator, mapping_cost_probe, save_generator
from generation.training import (ABLATION_KINDS, ablate_distribution, save_training_log, sweep_beta,
                                 sweep_proportion, toy_gradient_report, train_mapper)
from evaluation.evaluation import METHODS, build_method, cross_model_eval, evaluate, partition_easy_hard
from evaluation.reporting import format_table, report_stem, write_json, write_jsonl, write_report, write_table

logger = logging.getLogger("vmrec")

GRAD_CHECK_TOLERANCE = 1e-4


def _banner(title):
    print(f"\n=== {title} ===\n")


def _int_list(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _float_list(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _str_list(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _load_split(paths):
    return load_split(require_artifact(paths.split, "prepare", "split manifest"))


def _load_base(paths, kind, split):
    return load_base_model(require_artifact(paths.base_model(kind), "train-base", f"{kind} base model"), split)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_prepare(config, paths):
    """Load the interaction log, build the split and write the manifest plus summary statistics."""
    _banner("Preparing Cold-Start Split")
    log = load_interactions(config.dataset.path, config.dataset.format_options())
    split = temporal_user_split(log, config.split.ratios)
    save_split(split, paths.split)

    easy_preview = {}
    for k in config.eval.shots:
        partition = partition_easy_hard(split, k)
        easy_preview[str(k)] = {
            "eligible": len(partition.easy_users) + len(partition.hard_users),
            "easy": len(partition.easy_users),
            "easy_fraction": partition.easy_fraction,
        }
    summary = {"log": log.stats, "split": split.stats, "easy_preview": easy_preview,
               "config_digest": config_digest(config)}
    write_json(summary, paths.split_summary)
    write_run_manifest(paths, "prepare", config, [paths.split, paths.split_summary])

    total = split.stats["users_before_filter"]
    print(f"Users before filtering: {format_count(total)}")
    print(f"Warm users: {format_count(split.stats['warm_users'], total)}")
    print(f"Validation users: {format_count(split.stats['val_users'], total)}")
    print(f"Test users: {format_count(split.stats['test_users'], total)}")
    print(f"Training items: {format_count(split.stats['train_items'])}")
    for k, preview in easy_preview.items():
        print(f"{k}-shot easy users: {preview['easy']}/{preview['eligible']} ({preview['easy_fraction'] * 100:.2f}%)")
    print(f"\nSplit manifest saved to: {paths.split}")
    return True


def cmd_train_base(config, paths):
    """Train the configured base model on warm users and save its embedding tables."""
    kind = config.base.kind
    _banner(f"Training Base Model ({kind})")
    split = _load_split(paths)
    model = train_base_model(kind, split, config.base.bpr, Rng(config.seed).substream("base", kind))
    out = save_base_model(model, paths.base_model(kind))
    write_run_manifest(paths, f"train-base:{kind}", config, [out])
    if model.history:
        last = model.history[-1]
        print(f"Epochs run: {len(model.history)} (last holdout loss {last.get('holdout_loss', float('nan')):.4f})")
    print(f"Base model saved to: {out}")
    return True


def cmd_train_mapper(config, paths):
    """Grid-search the learning rate, keep the best generator and write its checkpoint and log."""
    kind = config.base.kind
    _banner(f"Training Parameter Generator ({config.train.kind} on {kind})")
    split = _load_split(paths)
    model = _load_base(paths, kind, split)
    result = train_mapper(split, model, config.train, Rng(config.seed).substream("mapper"))
    checkpoint = paths.generator(kind, config.train.kind)
    save_generator(result.params, checkpoint, result.warm_rows, {
        "base": kind,
        "lr": result.lr,
        "best_epoch": result.best_epoch,
        "best_val_ndcg5": result.best_val_ndcg,
        "config_digest": config_digest(config),
    })
    log_path = save_training_log(result.history, paths.training_log(kind, config.train.kind))
    write_run_manifest(paths, f"train-mapper:{config.train.kind}:{kind}", config, [checkpoint, log_path])
    print(f"Best learning rate: {result.lr:g} (epoch {result.best_epoch})")
    print(f"Validation NDCG@5: {result.best_val_ndcg:.4f}")
    print(f"Generator saved to: {checkpoint}")
    print(f"Training log saved to: {log_path}")
    return True


def cmd_evaluate(config, paths, methods=None, cross_base=None):
    """Evaluate each method at each shot on the configured subset and write reports and a table."""
    kind = config.base.kind
    subset = config.eval.subset
    methods = methods or config.eval.methods
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise EvaluationError(f"unknown methods {unknown}, expected some of {METHODS}")
    _banner(f"Evaluating {', '.join(methods)} on {kind} ({subset} users)")
    split = _load_split(paths)
    model = _load_base(paths, kind, split)
    params = warm_rows = None
    if "vmrec" in methods or cross_base:
        checkpoint = require_artifact(paths.generator(kind, config.train.kind), "train-mapper",
                                      "generator checkpoint")
        params, warm_rows, _ = load_generator(checkpoint)
    digest = config_digest(config)
    rng = Rng(config.seed).substream("evaluate")
    out_dir = paths.results / subset

    reports, easy_fractions = [], {}
    for k in config.eval.shots:
        users = None
        if subset != "all":
            partition = partition_easy_hard(split, k)
            easy_fractions[k] = partition.easy_fraction
            users = partition.users(subset)
            if not users:
                logger.warning("No %s test users at k=%d", subset, k)
                continue
        for name in methods:
            if name.startswith("rm_") and subset == "hard":
                logger.info("Skipping %s on hard users (no warm user shares their first items)", name)
                continue
            method = build_method(name, model, split, params, config.eval.mode, warm_rows, config.eval.samples)
            try:
                report = evaluate(method, model, split, k, config.eval.n_neg, rng, users=users,
                                  cutoff=config.eval.cutoff, subset=subset, config_digest=digest)
            except EvaluationError as e:
                if not name.startswith("rm_"):
                    raise
                logger.warning("%s at k=%d: %s", name, k, e)
                continue
            write_report(report, out_dir)
            if name == "vmrec":
                write_jsonl(method.weight_dumps, out_dir / f"{report_stem(report.summary())}.weights.jsonl")
            reports.append(report)
        if cross_base:
            other = _load_base(paths, cross_base, split)
            report = cross_model_eval(params, model, other, split, k, config.eval.n_neg, rng,
                                      config.eval.mode, warm_rows, digest)
            write_report(report, out_dir)
            reports.append(report)

    if not reports:
        raise EvaluationError("no reports were produced")
    table = format_table(reports, "subset" if subset != "all" else "shots", easy_fractions)
    table_path = write_table(table, out_dir / "table.txt", f"Cold-start results ({subset} users)")
    write_run_manifest(paths, f"evaluate:{kind}:{subset}", config, [out_dir])
    print(table)
    print(f"\nReports saved to: {out_dir}")
    print(f"Table saved to: {table_path}")
    return True


def cmd_ablate(config, paths, kinds=None):
    """Train and evaluate each distribution variant; emit the ablation table."""
    base_kind = config.base.kind
    kinds = kinds or config.ablation.kinds
    _banner(f"Distribution Ablation on {base_kind}")
    split = _load_split(paths)
    model = _load_base(paths, base_kind, split)
    rng = Rng(config.seed)
    eval_rng = rng.substream("evaluate")
    digest = config_digest(config)
    reports = []
    for kind in kinds:
        print(f"\nTraining {kind} generator...")
        result = ablate_distribution(kind, split, model, config.train, rng.substream("ablate", kind),
                                     config.ablation.l1_grid)
        save_generator(result.params, paths.generator(base_kind, kind), result.warm_rows,
                       {"base": base_kind, "lr": result.lr, "l1_lambda": result.config.l1_lambda,
                        "config_digest": digest})
        for k in config.eval.shots:
            method = build_method("vmrec", model, split, result.params, config.eval.mode, result.warm_rows)
            report = evaluate(method, model, split, k, config.eval.n_neg, eval_rng, cutoff=config.eval.cutoff,
                              config_digest=digest)
            report.method = kind
            write_report(report, paths.ablation)
            reports.append(report)

    table = format_table(reports, "ablation")
    table_path = write_table(table, paths.ablation / "table.txt", f"Distribution ablation ({base_kind})")
    write_run_manifest(paths, f"ablate:{base_kind}", config, [paths.ablation])
    print(table)
    print(f"\nTable saved to: {table_path}")
    return True


def cmd_diagnose(config, paths):
    """In-cluster distances always; config.diagnose switches on the other diagnostics."""
    ok = True
    options = config.diagnose
    sweeps = options.sweeps
    base_kind = config.base.kind
    rng = Rng(config.seed).substream("diagnose")
    paths.diagnose.mkdir(parents=True, exist_ok=True)
    outputs = []

    if options.grad_check:
        _banner("Gradient Check (toy instance, float64)")
        report = toy_gradient_report(rng.substream("grad_check"))
        worst = max(report.values())
        for name, error in report.items():
            print(f"{name:<32} {error:.2e}")
        status = "PASS" if worst < GRAD_CHECK_TOLERANCE else "FAIL"
        print(f"\nMax relative error: {worst:.2e} ({status})")
        outputs.append(write_json({"max_relative_error": worst, "blocks": report}, paths.diagnose / "grad_check.json"))
        ok = worst < GRAD_CHECK_TOLERANCE

    if options.probe:
        _banner("Mapping Cost Probe")
        d = config.base.bpr.dim
        small = mapping_cost_probe(2, 500, d, config.train.mlp_hidden[-1])
        large = mapping_cost_probe(2, 1000, d, config.train.mlp_hidden[-1])
        print(f"Total FLOPs at N=500: {small.total:,}")
        print(f"Total FLOPs at N=1000: {large.total:,} (ratio {large.total / small.total:.2f})")
        outputs.append(write_json({"n500": small.total, "n1000": large.total}, paths.diagnose / "probe.json"))

    if paths.split.exists() or sweeps:
        split = _load_split(paths)
        model = _load_base(paths, base_kind, split)
        _banner(f"In-Cluster Distance by Shots ({base_kind})")
        rows = cluster_distance_diagnostic(model, split, options.max_shots)
        for row in rows:
            value = "absent" if row["mean_distance"] is None else f"{row['mean_distance']:.4f}"
            print(f"{row['shot']}-shot: {value} ({row['clusters']} clusters, {row['pairs']} pairs)")
        outputs.append(write_json(rows, paths.diagnose / f"cluster_distance_{base_kind}.json"))

        if "beta" in sweeps:
            _banner("Beta Sweep")
            sweep, rho = sweep_beta(split, model, config.train, rng.substream("beta"), options.betas,
                                    config.eval.shots)
            for row in sweep:
                print(f"beta={row['beta']:g}: val NDCG@5 {row['best_val_ndcg5']:.4f}, mean pi {row['mean_pi']}")
            print(f"Spearman rho (mean pi vs beta): {rho}")
            outputs.append(write_json({"rows": sweep, "spearman_rho": rho}, paths.diagnose / "sweep_beta.json"))
        if "proportion" in sweeps:
            _banner("Warm Proportion Sweep")
            sweep = sweep_proportion(split, model, config.train, rng.substream("proportion"),
                                     options.proportions, config.eval.shots)
            for row in sweep:
                print(f"p={row['proportion']:g}: val NDCG@5 {row['best_val_ndcg5']:.4f}")
            outputs.append(write_json({"rows": sweep}, paths.diagnose / "sweep_proportion.json"))

    write_run_manifest(paths, "diagnose", config, outputs)
    return ok


def cmd_workflow(config_path, paths, seed=None, base=None):
    from generation.workflow_manager import run_workflow
    return run_workflow(config_path, str(paths.root), seed, base)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Path to the JSON config (default: vmrec_config.json)")
    common.add_argument("--seed", type=int, help="Random seed (overrides config and VMREC_SEED)")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--threads", type=int, help="Cap on torch worker threads")
    common.add_argument("--base", choices=BASE_KINDS, help="Base model kind")
    common.add_argument("--verbose", action="store_true", help="Debug logging")
    common.add_argument("--quiet", action="store_true", help="Warnings only, no progress bars")

    parser = argparse.ArgumentParser(description="VM-Rec cold-start recommendation pipeline")
    subparsers = parser.add_subparsers(dest="command", help="Command to execute")

    prepare_parser = subparsers.add_parser("prepare", parents=[common], help="Build the cold-start split")
    prepare_parser.add_argument("--data", help="Interaction file (overrides dataset.path)")
    prepare_parser.add_argument("--format", help="Dataset format preset")
    prepare_parser.add_argument("--header", action="store_true", help="The file has a header line")

    subparsers.add_parser("train-base", parents=[common], help="Train the base recommender")

    mapper_parser = subparsers.add_parser("train-mapper", parents=[common], help="Train the parameter generator")
    mapper_parser.add_argument("--beta", type=float, help="KL weight")
    mapper_parser.add_argument("--proportion", type=float, help="Share of warm embeddings used")
    mapper_parser.add_argument("--lr-grid", type=_float_list, help="Comma-separated learning rates")

    evaluate_parser = subparsers.add_parser("evaluate", parents=[common], help="k-shot evaluation")
    evaluate_parser.add_argument("--method", type=_str_list, help=f"Comma-separated methods from {METHODS}")
    evaluate_parser.add_argument("--k", type=_int_list, help="Comma-separated shots, e.g. 1,2,3")
    evaluate_parser.add_argument("--mode", choices=["deterministic", "stochastic"], help="VM-Rec inference mode")
    evaluate_parser.add_argument("--subset", choices=["all", "easy", "hard"], help="Test users to evaluate")
    evaluate_parser.add_argument("--cross-base", choices=BASE_KINDS,
                                 help="Also map through this base model with the generator trained on --base")

    ablate_parser = subparsers.add_parser("ablate", parents=[common], help="Distribution ablation")
    ablate_parser.add_argument("--kind", type=_str_list, help=f"Comma-separated kinds from {ABLATION_KINDS}")
    ablate_parser.add_argument("--l1-grid", type=_float_list, help="Comma-separated L1 weights")
    ablate_parser.add_argument("--k", type=_int_list, help="Comma-separated shots")

    diagnose_parser = subparsers.add_parser("diagnose", parents=[common], help="Diagnostics and sweeps")
    diagnose_parser.add_argument("--grad-check", action="store_true", help="Finite-difference gradient check")
    diagnose_parser.add_argument("--probe", action="store_true", help="Forward-pass cost probe")
    diagnose_parser.add_argument("--sweep", action="append", choices=["beta", "proportion"], default=[],
                                 help="Sensitivity sweep to run (repeatable)")

    subparsers.add_parser("workflow", parents=[common], help="Run prepare, train and evaluate in order")
    return parser


def apply_overrides(config, args):
    """Flags override their config keys."""
    if args.out:
        config = replace(config, output_dir=args.out)
    if args.threads:
        config = replace(config, threads=args.threads)
    if args.base:
        config = replace(config, base=replace(config.base, kind=args.base))
    if getattr(args, "data", None):
        config = replace(config, dataset=replace(config.dataset, path=args.data))
    if getattr(args, "format", None):
        config = replace(config, dataset=replace(config.dataset, format=args.format))
    if getattr(args, "header", False):
        config = replace(config, dataset=replace(config.dataset, header=True))
    train = config.train
    if getattr(args, "beta", None) is not None:
        train = replace(train, beta=args.beta)
    if getattr(args, "proportion", None) is not None:
        train = replace(train, warm_proportion=args.proportion)
    if getattr(args, "lr_grid", None):
        train = replace(train, lr_grid=args.lr_grid)
    config = replace(config, train=train)
    evaluation = config.eval
    if getattr(args, "k", None):
        evaluation = replace(evaluation, shots=args.k)
    if getattr(args, "mode", None):
        evaluation = replace(evaluation, mode=args.mode)
    if getattr(args, "subset", None):
        evaluation = replace(evaluation, subset=args.subset)
    config = replace(config, eval=evaluation)
    if getattr(args, "l1_grid", None):
        config = replace(config, ablation=replace(config.ablation, l1_grid=args.l1_grid))
    diagnose = config.diagnose
    if getattr(args, "grad_check", False):
        diagnose = replace(diagnose, grad_check=True)
    if getattr(args, "probe", False):
        diagnose = replace(diagnose, probe=True)
    if getattr(args, "sweep", None):
        diagnose = replace(diagnose, sweeps=tuple(dict.fromkeys(diagnose.sweeps + tuple(args.sweep))))
    config = replace(config, diagnose=diagnose)
    return config


def configure_logging(verbose=False, quiet=False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return 1

    configure_logging(args.verbose, args.quiet)
    if args.quiet:
        os.environ["VMREC_QUIET"] = "1"
    started = time.time()
    try:
        config = finalize_config(apply_overrides(load_run_config(args.config), args), args.seed)
        torch.set_num_threads(config.threads)
        paths = ArtifactPaths(config.output_dir)

        if args.command == "prepare":
            ok = cmd_prepare(config, paths)
        elif args.command == "train-base":
            ok = cmd_train_base(config, paths)
        elif args.command == "train-mapper":
            ok = cmd_train_mapper(config, paths)
        elif args.command == "evaluate":
            ok = cmd_evaluate(config, paths, args.method, args.cross_base)
        elif args.command == "ablate":
            ok = cmd_ablate(config, paths, args.kind)
        elif args.command == "diagnose":
            ok = cmd_diagnose(config, paths)
        elif args.command == "workflow":
            ok = cmd_workflow(args.config, paths, config.seed, config.base.kind)
        else:
            parser.print_help()
            return 1
    except VMRecError as e:
        print(f"Error: {e}")
        return 1

    print(f"\nDone in {format_duration(time.time() - started)}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
