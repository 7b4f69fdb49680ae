#!/usr/bin/env python3
"""
Workflow Manager for VM-Rec

This script coordinates the entire pipeline for a cold-start experiment:
1. Data Preparation - Building the temporal warm/validation/test split
2. Base Model Training - Training the frozen recommender
3. Generator Training - Fitting the parameter generator on warm users
4. Evaluation - VM-Rec and baselines at every shot on all users
5. Subset Evaluation - Easy and hard users
6. Summary - Collecting the result tables

Each stage runs as its own vmrec_manager.py process, so a failed stage can be
rerun on its own.

Usage:
    python workflow_manager.py --config vmrec_config.json --out runs/ml100k
"""

import sys
import argparse
import subprocess
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[2]
MANAGER = PROJECT_ROOT / "vmrec_manager.py"


def run_stage(command, config_path=None, output_dir=None, seed=None, base=None, extra=()):
    """Run one vmrec_manager.py subcommand; True when it exits 0."""
    if not MANAGER.exists():
        print(f"Error: Script {MANAGER} not found.")
        return False

    cmd = [sys.executable, str(MANAGER), command]
    if config_path:
        cmd.extend(["--config", str(config_path)])
    if output_dir:
        cmd.extend(["--out", str(output_dir)])
    if seed is not None:
        cmd.extend(["--seed", str(seed)])
    if base:
        cmd.extend(["--base", base])
    cmd.extend(extra)

    try:
        result = subprocess.run(cmd, check=True)
        return result.returncode == 0
    except subprocess.CalledProcessError:
        return False


def _step(number, title):
    print("\n" + "=" * 80)
    print(f"STEP {number}: {title}")
    print("=" * 80)


def run_workflow(config_path=None, output_dir=None, seed=None, base=None, skip_prepared=False):
    """Run the whole pipeline in order; stops at the first failing stage."""
    common = dict(config_path=config_path, output_dir=output_dir, seed=seed, base=base)
    out = Path(output_dir) if output_dir else None

    print("\n" + "=" * 80)
    print("WORKFLOW INITIATED: VM-Rec cold-start pipeline")
    print(f"Config: {config_path or 'default'}")
    print(f"Output: {output_dir or 'from config'}")
    print(f"Base model: {base or 'from config'}")
    print(f"Seed: {seed if seed is not None else 'from config'}")
    print("=" * 80)

    _step(1, "DATA PREPARATION")
    if skip_prepared and out and (out / "split.json").exists():
        print("\nSplit manifest already present, skipping.")
    elif not run_stage("prepare", **common):
        print("Error: Failed to prepare the split.")
        return False

    _step(2, "BASE MODEL TRAINING")
    if not run_stage("train-base", **common):
        print("Error: Failed to train the base model.")
        return False

    _step(3, "GENERATOR TRAINING")
    if not run_stage("train-mapper", **common):
        print("Error: Failed to train the parameter generator.")
        return False

    _step(4, "EVALUATION")
    if not run_stage("evaluate", **common, extra=["--subset", "all"]):
        print("Error: Evaluation failed.")
        return False

    _step(5, "SUBSET EVALUATION")
    if not run_stage("evaluate", **common, extra=["--subset", "easy"]):
        print("Error: Easy-subset evaluation failed.")
        return False
    if not run_stage("evaluate", **common, extra=["--subset", "hard", "--method", "vmrec,random,mean"]):
        print("Error: Hard-subset evaluation failed.")
        return False

    _step(6, "SUMMARY")
    if out:
        for subset in ("all", "easy", "hard"):
            table = out / "results" / subset / "table.txt"
            if table.exists():
                print()
                print(table.read_text(encoding="utf-8"))

    print("\n" + "=" * 80)
    print("WORKFLOW COMPLETED SUCCESSFULLY!")
    print("=" * 80)
    if out:
        print(f"\nResults are in: {out / 'results'}")
        print(f"Run manifest: {out / 'run_manifest.json'}")
    return True


def main():
    """Main function."""
    parser = argparse.ArgumentParser(description="Workflow Manager for VM-Rec")
    parser.add_argument("--config", help="Path to the JSON config")
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--seed", type=int, help="Random seed")
    parser.add_argument("--base", choices=["bpr", "lightgcn"], help="Base model kind")
    parser.add_argument("--skip-prepared", action="store_true", help="Reuse an existing split manifest")

    args = parser.parse_args()

    ok = run_workflow(args.config, args.out, args.seed, args.base, args.skip_prepared)
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
