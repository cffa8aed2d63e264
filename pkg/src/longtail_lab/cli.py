"""Command-line harness: gen, train, compare, report, and f1delta subcommands."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from . import __version__
from .data import SyntheticSpec, generate_synthetic, save_embeddings
from .experiment import (DEFAULT_CONFIG_YAML, ExperimentConfig, config_from_dict,
                         emit_f1_delta, run_experiment)
from .metrics import compare_methods, load_report


def _apply_set(doc: dict, assignment: str) -> None:
    """Apply one ``--set dotted.path=value`` override onto the config mapping."""
    if "=" not in assignment:
        raise ValueError(f"--set expects dotted.path=value, got {assignment!r}")
    path, raw = assignment.split("=", 1)
    keys = path.split(".")
    node = doc
    for key in keys[:-1]:
        nxt = node.get(key)
        if not isinstance(nxt, dict):
            nxt = {}
            node[key] = nxt
        node = nxt
    node[keys[-1]] = yaml.safe_load(raw)


def _load_doc(args: argparse.Namespace) -> dict:
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
        if doc is None:
            doc = {}
    else:
        doc = yaml.safe_load(DEFAULT_CONFIG_YAML)
    if not isinstance(doc, dict):
        raise ValueError("config document must be a mapping")
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    if getattr(args, "output_dir", None) is not None:
        doc["output_dir"] = args.output_dir
    if getattr(args, "methods", None) is not None:
        doc["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if getattr(args, "one_stage", False):
        doc["one_stage"] = True
    for assignment in getattr(args, "set", None) or []:
        _apply_set(doc, assignment)
    return doc


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    return config_from_dict(_load_doc(args))


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML configuration document")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--output-dir", help="output directory override")
    parser.add_argument("--methods", help="comma-separated methods override")
    parser.add_argument("--one-stage", action="store_true",
                        help="train sqrt_samp/cb_focal in a single stage")
    parser.add_argument("--set", action="append", metavar="PATH=VALUE",
                        help="override any config key, e.g. --set stage2.epochs=24")


def _cmd_gen(args: argparse.Namespace) -> int:
    doc = _load_doc(args)
    section = (doc.get("dataset") or {}).get("synthetic") or {}
    overrides = {
        "num_classes": args.classes,
        "feature_dim": args.dim,
        "head_count": args.head_count,
        "imbalance_factor": args.imbalance,
        "class_separation": args.separation,
        "noise_sigma": args.noise,
        "seed": args.data_seed,
    }
    for key, value in overrides.items():
        if value is not None:
            section[key] = value
    section.setdefault("seed", int(doc.get("seed", 0)))
    spec = SyntheticSpec(
        num_classes=int(section.get("num_classes", 20)),
        feature_dim=int(section.get("feature_dim", 16)),
        head_count=int(section.get("head_count", 1000)),
        imbalance_factor=float(section.get("imbalance_factor", 200.0)),
        class_separation=float(section.get("class_separation", 5.0)),
        noise_sigma=float(section.get("noise_sigma", 1.0)),
        seed=int(section["seed"]),
    )
    dataset = generate_synthetic(spec)
    save_embeddings(dataset, args.out)
    print(f"wrote {dataset.num_instances} instances over {dataset.num_classes} "
          f"classes to {args.out}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    config = replace(_config_from_args(args), methods=(args.method,))
    manifest = run_experiment(config)
    entry = manifest.methods[args.method]
    print(f"{args.method}: checkpoint {entry['checkpoint']}, report {entry['report']} "
          f"({entry['seconds']}s) in {config.output_dir}")
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    run_experiment(config)
    table_path = Path(config.output_dir) / "reports" / "comparison.txt"
    sys.stdout.write(table_path.read_text(encoding="utf-8"))
    return 0


def _report_paths(args: argparse.Namespace) -> list[str]:
    paths = list(args.reports)
    if args.run_dir:
        found = sorted(Path(args.run_dir, "reports").glob("*.json"))
        paths.extend(str(p) for p in found)
    if not paths:
        raise ValueError("no reports given; pass report files or --run-dir")
    return paths


def _cmd_report(args: argparse.Namespace) -> int:
    reports = [load_report(p) for p in _report_paths(args)]
    table = compare_methods(reports)
    sys.stdout.write(table.to_csv() if args.format == "csv" else table.to_text())
    return 0


def _cmd_f1delta(args: argparse.Namespace) -> int:
    baseline = load_report(args.baseline)
    others = [load_report(p) for p in args.method_reports]
    table = emit_f1_delta(baseline, others)
    if args.out:
        Path(args.out).write_text(table.to_csv(), encoding="utf-8")
        print(f"wrote {len(table.class_names)} rows to {args.out}")
    else:
        sys.stdout.write(table.to_csv())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="longtail-lab",
        description="Long-tail classification laboratory: train and compare "
                    "re-sampling, re-weighting, and multi-branch head methods.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="write a synthetic dataset in the embedding format")
    gen.add_argument("--out", required=True, help="output embedding file")
    gen.add_argument("--classes", type=int, help="number of classes")
    gen.add_argument("--dim", type=int, help="feature dimension")
    gen.add_argument("--head-count", type=int, help="instances of the largest class")
    gen.add_argument("--imbalance", type=float, help="largest/smallest count ratio")
    gen.add_argument("--separation", type=float, help="centroid distance scale")
    gen.add_argument("--noise", type=float, help="within-class noise sigma")
    gen.add_argument("--data-seed", type=int, help="dataset seed")
    gen.add_argument("--config", help="YAML config supplying dataset.synthetic defaults")
    gen.set_defaults(func=_cmd_gen)

    train = sub.add_parser("train", help="run a single method end to end")
    train.add_argument("--method", required=True,
                       choices=("baseline", "sqrt_samp", "cb_focal", "bags", "ssb"))
    _add_common_flags(train)
    train.set_defaults(func=_cmd_train)

    compare = sub.add_parser("compare", help="run the full method comparison")
    _add_common_flags(compare)
    compare.set_defaults(func=_cmd_compare)

    report = sub.add_parser("report", help="re-render tables from stored reports")
    report.add_argument("reports", nargs="*", help="report JSON files")
    report.add_argument("--run-dir", help="run directory containing reports/")
    report.add_argument("--format", choices=("text", "csv"), default="text")
    report.set_defaults(func=_cmd_report)

    f1delta = sub.add_parser("f1delta", help="per-class F1 deltas over a baseline report")
    f1delta.add_argument("--baseline", required=True, help="baseline report JSON")
    f1delta.add_argument("method_reports", nargs="+", help="method report JSONs")
    f1delta.add_argument("--out", help="write CSV here instead of stdout")
    f1delta.set_defaults(func=_cmd_f1delta)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface one diagnostic line, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
