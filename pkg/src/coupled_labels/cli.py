"""Command-line surface: data generation, splitting, training, ablation and
report/plot-data emission.

Exit codes: 0 success, 1 validation error (bad flags, bad config, bad data),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import harness, stratify, synthgen
from .datamodel import CoupledLabelsError, load_config, load_dataset, save_dataset


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; the CLI contract reserves 2 for
    # runtime failures, so remap to 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coupled-labels",
                     description="Sparse label-coupling laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", parents=[], help="generate a synthetic dataset")
    p_gen.add_argument("--spec", required=True, help="generator spec JSON")
    p_gen.add_argument("--out", required=True, help="output dataset CSV")

    p_split = sub.add_parser("split", help="write a K-fold assignment")
    p_split.add_argument("--data", required=True, help="dataset CSV")
    p_split.add_argument("--k", type=int, default=3, help="fold count")
    p_split.add_argument("--seed", type=int, default=0)
    p_split.add_argument("--method", choices=("mis", "bucketed"), default="mis")
    p_split.add_argument("--out", required=True, help="output folds CSV")

    p_train = sub.add_parser("train", help="run the K-fold experiment")
    p_train.add_argument("--data", required=True, help="dataset CSV")
    p_train.add_argument("--config", required=True, help="experiment config JSON")
    p_train.add_argument("--out", required=True, help="run directory")

    p_ablate = sub.add_parser("ablate", help="train with refinement on and off")
    p_ablate.add_argument("--data", required=True, help="dataset CSV")
    p_ablate.add_argument("--config", required=True, help="experiment config JSON")
    p_ablate.add_argument("--out", required=True, help="run directory")

    p_report = sub.add_parser("report", help="print AUC table, write plot CSVs")
    p_report.add_argument("--run", required=True, help="run directory from train/ablate")

    return parser


def _cmd_gen(args) -> int:
    spec = synthgen.load_spec(args.spec)
    dataset = synthgen.generate(spec)
    save_dataset(dataset, args.out)
    synthgen.save_spec(spec, str(args.out) + ".spec.json")
    print(f"wrote {dataset.n_examples} examples "
          f"({dataset.n_features} features, {dataset.n_labels} labels) to {args.out}")
    return 0


def _cmd_split(args) -> int:
    dataset = load_dataset(args.data)
    splitter = stratify.mis_split if args.method == "mis" else stratify.bucketed_kfold
    assign = splitter(dataset.labels, args.k, args.seed)
    stratify.save_folds(assign, args.out)
    with open(str(args.out) + ".meta.json", "w") as fh:
        json.dump({"data": str(args.data), "k": args.k, "seed": args.seed,
                   "method": args.method}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    quality = stratify.split_quality(dataset.labels, assign)
    print(f"wrote {args.out}: fold sizes {quality.fold_sizes.tolist()}, "
          f"max prevalence deviation {quality.max_deviation:.6f}")
    return 0


def _cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    cfg = load_config(args.config)
    report = harness.run_experiment(dataset, cfg)
    harness.write_run_report(report, args.out)
    print(f"run written to {args.out}")
    _print_auc_table(report.to_json_dict())
    return 0


def _cmd_ablate(args) -> int:
    dataset = load_dataset(args.data)
    cfg = load_config(args.config)
    result = harness.run_ablation(dataset, cfg)
    outdir = Path(args.out)
    harness.write_run_report(result.refined, outdir / "with_refinement")
    harness.write_run_report(result.baseline, outdir / "no_refinement")
    comparison = result.comparison()
    with open(outdir / "ablation.json", "w") as fh:
        json.dump(comparison, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"ablation written to {outdir}")
    print(f"{'arm':<18} macro_auc")
    print(f"{'with_refinement':<18} {comparison['macro_auc_refined']:.6f}")
    print(f"{'no_refinement':<18} {comparison['macro_auc_baseline']:.6f}")
    print(f"delta: {comparison['delta']:+.6f}")
    sign = comparison["coupling_sign_summary"]
    print(f"learned couplings (|A| > {sign['near_zero_threshold']}): "
          f"{sign['n_positive']} positive, {sign['n_negative']} negative, "
          f"{sign['n_near_zero']} near zero")
    return 0


def _print_auc_table(report: dict) -> None:
    print(f"{'fold':<10} {'best_epoch':<11} macro_auc")
    for fold in report["folds"]:
        print(f"{fold['fold']:<10} {fold['best_epoch']:<11} "
              f"{fold['best_val_macro_auc']:.6f}")
    ens = report["ensemble"]
    print(f"{'ensemble':<10} {'(' + ens['source'] + ')':<11} {ens['auc']['macro_auc']:.6f}")


def _write_plot_csvs(rundir: Path, report: dict) -> list[Path]:
    labels = report["label_names"]
    diag = report["diagnostics"]
    written = []

    def emit(name: str, header: list[str], rows) -> None:
        path = rundir / name
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        written.append(path)

    corr = diag["pearson_correlation"]
    emit("pearson_correlation.csv", ["label"] + labels,
         [[labels[i]] + ["" if v is None else repr(v) for v in row]
          for i, row in enumerate(corr)])

    agree = diag["fold_agreement"]
    emit("fold_agreement.csv", ["majority_votes", "cells"],
         [[k, v] for k, v in sorted(agree["majority_counts"].items(), key=lambda kv: int(kv[0]))])
    emit("fold_pair_agreement.csv",
         ["fold_a", "fold_b", "agreement_rate"],
         [[a, b, repr(rate)]
          for a, row in enumerate(agree["pair_agreement"])
          for b, rate in enumerate(row) if b > a])

    emit("per_label_fold_std.csv", ["label", "mean_std"],
         [[labels[i], repr(v)] for i, v in enumerate(diag["per_label_fold_std"])])

    hist = diag["probability_histograms"]
    bins = hist["bins"]
    emit("probability_histograms.csv", ["label", "bin_low", "bin_high", "count"],
         [[labels[l], repr(b / bins), repr((b + 1) / bins), hist["counts"][l][b]]
          for l in range(len(labels)) for b in range(bins)])

    if report.get("coupling_mean") is not None:
        emit("coupling_mean.csv", ["source"] + labels,
             [[labels[i]] + [repr(v) for v in row]
              for i, row in enumerate(report["coupling_mean"])])
    return written


def _cmd_report(args) -> int:
    rundir = Path(args.run)
    # an ablation directory holds two sub-runs; report each arm
    if (rundir / "ablation.json").exists():
        with open(rundir / "ablation.json") as fh:
            comparison = json.load(fh)
        print(f"{'arm':<18} macro_auc")
        print(f"{'with_refinement':<18} {comparison['macro_auc_refined']:.6f}")
        print(f"{'no_refinement':<18} {comparison['macro_auc_baseline']:.6f}")
        print(f"delta: {comparison['delta']:+.6f}")
        for arm in ("with_refinement", "no_refinement"):
            sub = rundir / arm
            report = harness.read_report_json(sub)
            print(f"--- {arm}")
            _print_auc_table(report)
            _write_plot_csvs(sub, report)
        return 0
    report = harness.read_report_json(rundir)
    _print_auc_table(report)
    written = _write_plot_csvs(rundir, report)
    print("plot data: " + ", ".join(p.name for p in written))
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "split": _cmd_split,
    "train": _cmd_train,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
}


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except CoupledLabelsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


def main() -> None:
    raise SystemExit(cli_main())


if __name__ == "__main__":
    main()
