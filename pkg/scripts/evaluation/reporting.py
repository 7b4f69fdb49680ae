#!/usr/bin/env python3
"""
Reporting

This script turns evaluation reports into files and text tables.
It provides utilities for:
1. Writing per-user JSON lines and a summary JSON for every report
2. Formatting a method x base x shot table (NDCG@5 and MRR@5 columns)
3. Formatting a distribution-ablation table
4. Formatting an easy/hard subset table
5. Collecting the summaries of a results directory back into tables

Usage:
    python reporting.py table RESULTS_DIR
    python reporting.py table RESULTS_DIR --style subset
"""

import sys
import json
import argparse
from pathlib import Path

TABLE_STYLES = ("shots", "ablation", "subset")


def write_json(data, path):
    """Canonical JSON (sorted keys, fixed indent) so reruns are byte-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def write_jsonl(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def report_stem(summary):
    method = summary["method"].replace("->", "_to_").replace("[", "_").replace("]", "")
    return f"{method}_{summary['base']}_k{summary['k']}_{summary['subset']}"


def write_report(report, directory):
    """Write <stem>.jsonl (one record per user) and <stem>.summary.json. Returns both paths."""
    directory = Path(directory)
    summary = report.summary()
    stem = report_stem(summary)
    records_path = write_jsonl(report.records, directory / f"{stem}.jsonl")
    summary_path = write_json(summary, directory / f"{stem}.summary.json")
    return records_path, summary_path


def load_summaries(directory):
    """All *.summary.json files of a results directory, in file-name order."""
    return [json.loads(p.read_text(encoding="utf-8")) for p in sorted(Path(directory).glob("*.summary.json"))]


def _metric(summary, name):
    for key, value in summary.items():
        if key.startswith(f"{name}@"):
            return value
    return None


def _cell(value):
    return "   -  " if value is None else f"{value:.4f}"


def _rule(width):
    return "=" * width


def format_shot_table(summaries):
    """Rows (method, base); for each shot an NDCG@5 and an MRR@5 column."""
    rows = [s for s in summaries if s.get("subset", "all") == "all"]
    shots = sorted({s["k"] for s in rows})
    keys = []
    for s in rows:
        key = (s["method"], s["base"])
        if key not in keys:
            keys.append(key)
    lookup = {(s["method"], s["base"], s["k"]): s for s in rows}

    header = f"{'Method':<28}{'Base':<10}" + "".join(f"{f'{k}-shot NDCG':>14}{'MRR':>9}" for k in shots)
    lines = [header, _rule(len(header))]
    for method, base in keys:
        line = f"{method:<28}{base:<10}"
        for k in shots:
            s = lookup.get((method, base, k))
            line += f"{_cell(_metric(s, 'ndcg') if s else None):>14}{_cell(_metric(s, 'mrr') if s else None):>9}"
        lines.append(line)
    return "\n".join(lines)


def format_ablation_table(summaries):
    """One row per distribution kind with its NDCG@5 and MRR@5 at each shot."""
    shots = sorted({s["k"] for s in summaries})
    kinds = []
    for s in summaries:
        if s["method"] not in kinds:
            kinds.append(s["method"])
    lookup = {(s["method"], s["k"]): s for s in summaries}

    header = f"{'Distribution':<24}" + "".join(f"{f'{k}-shot NDCG':>14}{'MRR':>9}" for k in shots)
    lines = [header, _rule(len(header))]
    for kind in kinds:
        line = f"{kind:<24}"
        for k in shots:
            s = lookup.get((kind, k))
            line += f"{_cell(_metric(s, 'ndcg') if s else None):>14}{_cell(_metric(s, 'mrr') if s else None):>9}"
        lines.append(line)
    return "\n".join(lines)


def format_subset_table(summaries, easy_fractions=None):
    """
    Easy and hard NDCG@5 per (method, shot). Rule-based rows only carry easy
    numbers; easy_fractions maps k to the share of easy test users.
    """
    easy_fractions = easy_fractions or {}
    lookup = {(s["method"], s["k"], s["subset"]): s for s in summaries if s.get("subset") in ("easy", "hard")}
    methods, shots = [], sorted({key[1] for key in lookup})
    for method, _, _ in lookup:
        if method not in methods:
            methods.append(method)

    header = f"{'Method':<28}{'k':>3}{'Easy NDCG':>12}{'Hard NDCG':>12}{'Easy share':>12}"
    lines = [header, _rule(len(header))]
    for method in methods:
        for k in shots:
            easy = lookup.get((method, k, "easy"))
            hard = None if method.startswith("rm_") else lookup.get((method, k, "hard"))
            if easy is None and hard is None:
                continue
            share = easy_fractions.get(k)
            share_text = "     -" if share is None else f"{share * 100:.2f}%"
            lines.append(f"{method:<28}{k:>3}{_cell(_metric(easy, 'ndcg') if easy else None):>12}"
                         f"{_cell(_metric(hard, 'ndcg') if hard else None):>12}{share_text:>12}")
    return "\n".join(lines)


def format_table(reports, style="shots", easy_fractions=None):
    """Format EvalReports (or their summary dicts) in one of the three table layouts."""
    summaries = [r if isinstance(r, dict) else r.summary() for r in reports]
    if style == "shots":
        return format_shot_table(summaries)
    if style == "ablation":
        return format_ablation_table(summaries)
    if style == "subset":
        return format_subset_table(summaries, easy_fractions)
    raise ValueError(f"unknown table style '{style}', expected one of {TABLE_STYLES}")


def write_table(text, path, title=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        if title:
            f.write(f"=== {title} ===\n\n")
        f.write(text + "\n")
    return path


def main():
    parser = argparse.ArgumentParser(description="Format VM-Rec evaluation results")
    subparsers = parser.add_subparsers(dest="command", help="Command to execute")

    table_parser = subparsers.add_parser("table", help="Print a table from a results directory")
    table_parser.add_argument("results", help="Directory holding *.summary.json files")
    table_parser.add_argument("--style", choices=TABLE_STYLES, default="shots", help="Table layout")

    args = parser.parse_args()

    if args.command == "table":
        summaries = load_summaries(args.results)
        if not summaries:
            print(f"Error: no summaries found in {args.results}")
            sys.exit(1)
        print(f"\n=== Results ({len(summaries)} reports) ===\n")
        print(format_table(summaries, args.style))
    else:
        parser.print_help()


if __name__ == "__main__":
    main()
