"""
Command-line entry point.

    python cli.py expand          --model A.hm3 --model B.hm3 [--base BASE.hm3] --out DIR
    python cli.py merge           --model A.hm3 --model B.hm3 [--base BASE.hm3] [--recipe R.json] --out DIR
    python cli.py search          --model A.hm3 --model B.hm3 --base BASE.hm3 --dataset D.jsonl... --out DIR
    python cli.py self-merge      --model A.hm3 --base BASE.hm3 --dataset D.jsonl... --out DIR
    python cli.py eval            --model M.hm3 --dataset D.jsonl[@SEGMENT]... --out DIR
    python cli.py compare-runtime --model A.hm3 --model B.hm3 --merged M.hm3 --dataset D.jsonl... --out DIR
    python cli.py report          --report DIR/report.json [--baseline-report R.json...] --out DIR

The order of repeated --model flags is the segment order of the merged head.
Logs go to standard error; JSON summaries go to standard output.
"""

import os
import sys
import json
import argparse
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import constants
import config
from checkpoint_store import Checkpoint, load, save
from errors import ArgumentError, HM3Error, VALIDATION_ERRORS
from evaluation import (
    BuiltinEvaluator,
    compare_runtime,
    cross_check_plan,
    emit_report,
    load_dataset,
    load_plan,
    sample_indices,
    summarize,
    write_runtime_table,
)
from hm3_transform import SegmentLayout, layout_of, load_layout, save_layout, transform
from merge_engine import MergeRecipe, load_recipe, merge
from search import SearchConfig, emit_search_artifacts, load_search_config, run_search
from services.external_evaluator import ExternalEvaluator
from utils import configure_logging, log_error, read_json, unique_names

logger = logging.getLogger(__name__)

EVALUATORS = ("builtin", "external")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="Output directory")
    common.add_argument("--threads", type=int, help=f"Worker threads (default: ${config.THREADS_ENV_VAR} or 1)")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"], type=str.upper)

    models = argparse.ArgumentParser(add_help=False)
    models.add_argument("--model", action="append", default=[], help="Checkpoint path; repeat in segment order")
    models.add_argument("--base", help="Base checkpoint the models were fine-tuned from")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--dataset", action="append", default=[], help="JSONL dataset, optionally PATH@SEGMENT")
    data.add_argument("--plan", help="Cross-check plan (JSON list of dataset/segment/expected_label)")
    data.add_argument("--seed", type=int, default=None)
    data.add_argument("--evaluator", choices=EVALUATORS, default="builtin")
    data.add_argument("--evaluator-cmd", help="Command run by the external evaluator")

    parser = argparse.ArgumentParser(prog="hm3", description="Merge heterogeneous text classifiers with HM3")
    subparsers = parser.add_subparsers(dest="command", required=True)

    subparsers.add_parser("expand", parents=[common, models], help="Zero-pad heads into one shared layout")

    merge_parser = subparsers.add_parser("merge", parents=[common, models], help="Expand and merge per recipe")
    merge_parser.add_argument("--recipe", help="MergeRecipe JSON (default: TIES, density 1)")

    for name, help_text in (("search", "DARE-TIES density search"), ("self-merge", "Merge one model with itself")):
        search_parser = subparsers.add_parser(name, parents=[common, models, data], help=help_text)
        search_parser.add_argument("--search-config", help="SearchConfig JSON")

    eval_parser = subparsers.add_parser("eval", parents=[common, data], help="Evaluate one checkpoint")
    eval_parser.add_argument("--model", action="append", default=[], help="Checkpoint to evaluate")
    eval_parser.add_argument("--layout", help="layout.json (default: the checkpoint's own layout)")
    eval_parser.add_argument("--sample-cap", type=int, default=config.EVAL_DEFAULTS["sample_cap"])
    eval_parser.add_argument("--exclude-zero-support", action="store_true",
                             help="Leave classes without support out of macro-F1")
    eval_parser.add_argument("--baseline-report", action="append", default=[],
                             help="report.json of an original model, for accuracy_comparison.csv")

    runtime_parser = subparsers.add_parser("compare-runtime", parents=[common], help="Individual vs merged runtime")
    runtime_parser.add_argument("--model", action="append", default=[], help="Individual checkpoint")
    runtime_parser.add_argument("--merged", help="Merged checkpoint")
    runtime_parser.add_argument("--dataset", action="append", default=[], help="JSONL dataset")
    runtime_parser.add_argument("--sample-cap", type=int, default=None)

    report_parser = subparsers.add_parser("report", parents=[common], help="Rebuild report files")
    report_parser.add_argument("--report", help="report.json to rebuild from")
    report_parser.add_argument("--baseline-report", action="append", default=[])

    return parser


def _require(args: argparse.Namespace, *names: str) -> None:
    for name in names:
        value = getattr(args, name)
        if value is None or value == []:
            raise ArgumentError("missing_argument", command=args.command, argument=f"--{name.replace('_', '-')}")


def validate_args(args: argparse.Namespace) -> None:
    """Subcommand-specific checks, before any file is read."""
    _require(args, "out")
    if args.command == "expand":
        _require(args, "model")
    elif args.command == "merge":
        _require(args, "model")
    elif args.command in ("search", "self-merge"):
        _require(args, "model", "base", "dataset")
        if args.command == "self-merge" and len(args.model) != 1:
            raise ArgumentError("missing_argument", command=args.command, argument="exactly one --model")
    elif args.command == "eval":
        _require(args, "model", "dataset")
        if len(args.model) != 1:
            raise ArgumentError("missing_argument", command=args.command, argument="exactly one --model")
    elif args.command == "compare-runtime":
        _require(args, "model", "merged", "dataset")
    elif args.command == "report":
        _require(args, "report")

    if getattr(args, "evaluator", None) == "external":
        _require(args, "evaluator_cmd")


def model_ids(paths: Sequence[str]) -> List[str]:
    """File stems in order; repeated stems get a numeric suffix."""
    stems = []
    for path in paths:
        stem = Path(path).name
        if stem.endswith(config.CHECKPOINT_SUFFIX):
            stem = stem[:-len(config.CHECKPOINT_SUFFIX)]
        stems.append(stem)
    return unique_names(stems)


def load_models(paths: Sequence[str]) -> List[Tuple[str, Checkpoint]]:
    return list(zip(model_ids(paths), [load(p) for p in paths]))


def split_dataset_arg(value: str) -> Tuple[str, Optional[str]]:
    """PATH@SEGMENT -> (PATH, SEGMENT); plain PATH -> (PATH, None)."""
    path, sep, segment = value.rpartition("@")
    if sep and path and segment and "/" not in segment:
        return path, segment
    return value, None


def load_datasets(values: Sequence[str], layout: Optional[SegmentLayout]):
    """Datasets named after their file stems; repeated stems get a numeric suffix."""
    specs = [split_dataset_arg(value) for value in values]
    names = unique_names([Path(path).stem for path, _ in specs])
    return [
        load_dataset(path, layout=layout, target_segment=segment, name=name)
        for (path, segment), name in zip(specs, names)
    ]


def make_evaluator(args: argparse.Namespace, threads: int, seed: int):
    if args.evaluator == "external":
        return ExternalEvaluator(args.evaluator_cmd)
    return BuiltinEvaluator(
        sample_cap=getattr(args, "sample_cap", None),
        seed=seed,
        exclude_zero_support=getattr(args, "exclude_zero_support", False),
        threads=threads,
    )


def _print_json(data) -> None:
    sys.stdout.write(json.dumps(data, sort_keys=True) + "\n")


def cmd_expand(args: argparse.Namespace, threads: int) -> int:
    models = load_models(args.model)
    base = load(args.base) if args.base else None
    expanded, expanded_base, layout = transform(models, base)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for (model_id, _), cp in zip(models, expanded):
        save(cp, out_dir / f"{model_id}.expanded{config.CHECKPOINT_SUFFIX}")
    if expanded_base is not None:
        save(expanded_base, out_dir / config.EXPANDED_BASE_FILE)
    save_layout(layout, out_dir / config.LAYOUT_FILE)
    logger.info(f"Expanded {len(expanded)} models into {out_dir}")
    _print_json(layout.to_dict())
    return config.EXIT_OK


def cmd_merge(args: argparse.Namespace, threads: int) -> int:
    recipe = load_recipe(args.recipe) if args.recipe else MergeRecipe()
    if args.base is None and recipe.strategy not in constants.BASE_FREE_STRATEGIES:
        raise ArgumentError("base_required", strategy=recipe.strategy)

    models = load_models(args.model)
    base = load(args.base) if args.base else None
    expanded, expanded_base, layout = transform(models, base)
    merged = merge(expanded_base, expanded, recipe, threads)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save(merged, out_dir / config.MERGED_FILE)
    save_layout(layout, out_dir / config.LAYOUT_FILE)
    logger.info(f"Merged {len(models)} models with {recipe.strategy} into {out_dir / config.MERGED_FILE}")
    _print_json(recipe.to_dict())
    return config.EXIT_OK


def cmd_search(args: argparse.Namespace, threads: int) -> int:
    search_config = load_search_config(args.search_config) if args.search_config else SearchConfig()
    overrides = {}
    if args.threads is not None or os.getenv(config.THREADS_ENV_VAR):
        overrides["threads"] = threads
    if args.seed is not None:
        overrides["base_seed"] = args.seed
    if args.command == "self-merge":
        overrides["self_merge"] = True
    search_config = SearchConfig.from_dict(config.merged_defaults(search_config.to_dict(), overrides))

    models = load_models(args.model)
    base = load(args.base)
    plan_entries = load_plan(args.plan) if args.plan else None
    datasets = load_datasets(args.dataset, layout=None)
    evaluator = make_evaluator(args, threads=1, seed=search_config.base_seed)

    result = run_search(models, base, datasets, plan_entries, search_config, evaluator)

    out_dir = Path(args.out)
    emit_search_artifacts(result.records, out_dir, result.best_recipe, result.summary())
    save_layout(result.layout, out_dir / config.LAYOUT_FILE)
    if result.best is not None:
        save(result.best, out_dir / config.BEST_FILE)
    _print_json(result.summary())
    return config.EXIT_OK


def cmd_eval(args: argparse.Namespace, threads: int) -> int:
    model_path = args.model[0]
    cp = load(model_path)
    layout = load_layout(args.layout) if args.layout else layout_of(cp, model_ids([model_path])[0])
    datasets = load_datasets(args.dataset, layout)
    plan = cross_check_plan(layout, datasets, load_plan(args.plan) if args.plan else None)
    baselines = [read_json(p) for p in args.baseline_report]

    seed = args.seed if args.seed is not None else config.EVAL_DEFAULTS["seed"]
    evaluator = make_evaluator(args, threads, seed)
    # Both evaluators see the same seeded, capped subsets
    subsets = {d.name: sample_indices(len(d.examples), args.sample_cap, seed, d.name) for d in datasets}
    report = evaluator.evaluate(cp, layout, datasets, plan=plan, subsets=subsets)
    report.setdefault("summary", summarize(report))

    emit_report(report, args.out, baselines or None)
    _print_json(report["summary"])
    return config.EXIT_OK


def cmd_compare_runtime(args: argparse.Namespace, threads: int) -> int:
    datasets = load_datasets(args.dataset, layout=None)
    comparison = compare_runtime(args.model, args.merged, datasets, sample_cap=args.sample_cap)
    write_runtime_table(comparison, args.out)
    _print_json(comparison["table"])
    return config.EXIT_OK


def cmd_report(args: argparse.Namespace, threads: int) -> int:
    report = read_json(args.report)
    metadata = report.pop("metadata", {})
    if "timings" in metadata:
        report["timings"] = metadata["timings"]
    baselines = [read_json(p) for p in args.baseline_report]
    report.setdefault("summary", summarize(report))
    emit_report(report, args.out, baselines or None)
    _print_json(report["summary"])
    return config.EXIT_OK


COMMANDS = {
    "expand": cmd_expand,
    "merge": cmd_merge,
    "search": cmd_search,
    "self-merge": cmd_search,
    "eval": cmd_eval,
    "compare-runtime": cmd_compare_runtime,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return config.EXIT_OK if e.code == 0 else config.EXIT_ARGUMENT_ERROR

    configure_logging(config.get_log_level(args.log_level), config.LOG_FILE)
    threads = config.get_thread_count(args.threads)

    try:
        validate_args(args)
        return COMMANDS[args.command](args, threads)
    except ArgumentError as e:
        logger.error(str(e))
        return config.EXIT_ARGUMENT_ERROR
    except VALIDATION_ERRORS as e:
        logger.error(str(e))
        return config.EXIT_VALIDATION_ERROR
    except HM3Error as e:
        logger.error(str(e))
        return config.EXIT_RUNTIME_FAILURE
    except Exception as e:
        log_error(e, f"'{args.command}' failed")
        return config.EXIT_RUNTIME_FAILURE


if __name__ == "__main__":
    sys.exit(main())
