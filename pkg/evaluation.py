"""
Evaluation harness: JSONL datasets, cross-check plans, confusion matrices,
accuracy / per-class F1 / macro-F1, load vs inference timing, runtime
comparison of individual models against one merged model, and report files.
"""

import json
import time
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import psutil
from sklearn.metrics import confusion_matrix, f1_score

import runtime
from checkpoint_store import Checkpoint, load
from config import EVAL_DEFAULTS
from errors import DatasetError, EvaluationError
from hm3_transform import Segment, SegmentLayout, layout_of
from utils import fnv1a_64, read_json, safe_filename, validate_json_structure, write_json

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
HOME = None  # expected_label of a home-segment pair: use each example's own label


@dataclass
class LabeledDataset:
    name: str
    examples: List[Tuple[str, str]]
    target_segment: Optional[str] = None
    # General corpora may hold several expected labels
    mixed: bool = False
    path: Optional[str] = None

    @property
    def labels(self) -> List[str]:
        return sorted({label for _, label in self.examples})


@dataclass(frozen=True)
class EvalPair:
    dataset: str
    segment: str
    expected_label: Optional[str] = HOME

    @property
    def is_home(self) -> bool:
        return self.expected_label is HOME


def resolve_label(segment: Segment, label: str) -> Optional[str]:
    """Match a raw dataset label against a segment, allowing the model-id prefix added by sanitization."""
    if label in segment.labels:
        return label
    prefixed = f"{segment.model_id}:{label}"
    if prefixed in segment.labels:
        return prefixed
    return None


def check_dataset_names(datasets: Sequence[LabeledDataset]) -> None:
    """Datasets key subsets, eval pairs and scores by name, so names must be unique."""
    seen = set()
    for dataset in datasets:
        if dataset.name in seen:
            raise DatasetError("duplicate_dataset", dataset=dataset.name)
        seen.add(dataset.name)


def _resolved(dataset: LabeledDataset, segment: Segment, mapping: Dict[str, str]) -> LabeledDataset:
    return LabeledDataset(
        name=dataset.name,
        examples=[(text, mapping[label]) for text, label in dataset.examples],
        target_segment=segment.model_id,
        mixed=dataset.mixed,
        path=dataset.path,
    )


def resolve_dataset(dataset: LabeledDataset, layout: SegmentLayout) -> LabeledDataset:
    """
    Pin the target segment and map labels onto it. Without an explicit target the
    one segment holding every label is used; more than one candidate is an error.
    """
    raw_labels = dataset.labels
    if dataset.target_segment is not None:
        segment = layout.segment(dataset.target_segment)
        mapping = {label: resolve_label(segment, label) for label in raw_labels}
        missing = [label for label, resolved in mapping.items() if resolved is None]
        if missing:
            raise DatasetError("unknown_label", label=missing[0], segment=segment.model_id)
        return _resolved(dataset, segment, mapping)

    candidates = []
    for segment in layout.segments:
        mapping = {label: resolve_label(segment, label) for label in raw_labels}
        if all(resolved is not None for resolved in mapping.values()):
            candidates.append((segment, mapping))
    if not candidates:
        raise DatasetError("no_target_segment", dataset=dataset.name)
    if len(candidates) > 1:
        raise DatasetError("ambiguous_target_segment", dataset=dataset.name,
                           segments=[segment.model_id for segment, _ in candidates])
    return _resolved(dataset, *candidates[0])


def load_dataset(path: PathLike, layout: Optional[SegmentLayout] = None, target_segment: Optional[str] = None,
                 name: Optional[str] = None) -> LabeledDataset:
    """
    Read {"text", "expected_label"} records, one per line; blank lines are skipped.
    The dataset is named after the file stem unless `name` is given.
    """
    path = Path(path)
    examples = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError("malformed_line", path=path, line=line_number, detail=str(e))
            if not validate_json_structure(record, ["text", "expected_label"]):
                raise DatasetError("malformed_line", path=path, line=line_number,
                                   detail="expected keys 'text' and 'expected_label'")
            if not isinstance(record["text"], str) or not isinstance(record["expected_label"], str):
                raise DatasetError("malformed_line", path=path, line=line_number, detail="values must be strings")
            examples.append((record["text"], record["expected_label"]))

    if not examples:
        raise DatasetError("empty_dataset", path=path)

    dataset = LabeledDataset(
        name=name or path.stem,
        examples=examples,
        target_segment=target_segment,
        mixed=len({label for _, label in examples}) > 1,
        path=str(path),
    )
    if dataset.mixed:
        logger.info(f"Dataset '{dataset.name}' holds {len(dataset.labels)} expected labels (mixed)")
    if layout is not None:
        dataset = resolve_dataset(dataset, layout)
    return dataset


def load_plan(path: PathLike) -> List[Dict[str, str]]:
    """Cross-check plan: JSON list of {"dataset", "segment", "expected_label"}."""
    entries = read_json(path)
    if not isinstance(entries, list):
        raise DatasetError("malformed_line", path=path, line=1, detail="plan must be a JSON list")
    for index, entry in enumerate(entries):
        if not validate_json_structure(entry, ["dataset", "segment", "expected_label"]):
            raise DatasetError("malformed_line", path=path, line=index + 1,
                               detail="entries need 'dataset', 'segment' and 'expected_label'")
    return entries


def cross_check_plan(layout: SegmentLayout, datasets: Sequence[LabeledDataset],
                     plan_entries: Optional[Sequence[Dict[str, str]]] = None) -> List[EvalPair]:
    """
    Every dataset on its home segment, plus each planned (dataset, segment,
    expected label) pair. Pairs left out of the plan are simply not evaluated.
    """
    check_dataset_names(datasets)
    by_name = {d.name: d for d in datasets}
    pairs = {(d.name, d.target_segment): EvalPair(d.name, d.target_segment) for d in datasets}

    for entry in plan_entries or []:
        if entry["dataset"] not in by_name:
            raise DatasetError("unknown_dataset", dataset=entry["dataset"])
        if entry["segment"] not in layout.model_ids:
            raise DatasetError("unknown_segment", segment=entry["segment"])
        segment = layout.segment(entry["segment"])
        label = resolve_label(segment, entry["expected_label"])
        if label is None:
            raise DatasetError("unknown_label", label=entry["expected_label"], segment=segment.model_id)
        pairs[(entry["dataset"], segment.model_id)] = EvalPair(entry["dataset"], segment.model_id, label)
    return list(pairs.values())


def sample_indices(size: int, cap: Optional[int], seed: int, name: str) -> List[int]:
    """Seeded shuffle without replacement, first min(cap, size) indices, in ascending order."""
    rng = np.random.default_rng([int(seed), fnv1a_64(name.encode("utf-8"))])
    order = rng.permutation(size)
    if cap is not None:
        order = order[:min(cap, size)]
    return sorted(int(i) for i in order)


def score_pair(labels: Sequence[str], y_true: Sequence[str], y_pred: Sequence[str],
               exclude_zero_support: bool = False) -> Dict[str, Any]:
    """Confusion matrix (rows expected, cols predicted), accuracy, per-class F1 and macro-F1."""
    labels = list(labels)
    matrix = confusion_matrix(y_true, y_pred, labels=labels) if y_true else np.zeros((len(labels),) * 2, dtype=int)
    per_class = f1_score(y_true, y_pred, labels=labels, average=None, zero_division=0) if y_true else np.zeros(len(labels))
    support = matrix.sum(axis=1)
    zero_support = [label for label, count in zip(labels, support) if count == 0]

    if exclude_zero_support:
        supported = [f1 for f1, count in zip(per_class, support) if count > 0]
        macro = float(np.mean(supported)) if supported else 0.0
    else:
        macro = float(np.mean(per_class))

    total = int(matrix.sum())
    return {
        "labels": labels,
        "confusion_matrix": matrix.astype(int).tolist(),
        "accuracy": float(np.trace(matrix)) / total if total else 0.0,
        "per_class_f1": {label: float(f1) for label, f1 in zip(labels, per_class)},
        "zero_support": zero_support,
        "excluded_zero_support": exclude_zero_support,
        "macro_f1": macro,
        "samples": total,
    }


def _predict_dataset(cp: Checkpoint, layout: SegmentLayout, dataset: LabeledDataset,
                     indices: Sequence[int], pairs: Sequence[EvalPair]) -> Dict[EvalPair, Tuple[list, list]]:
    collected = {pair: ([], []) for pair in pairs}
    for index in indices:
        text, label = dataset.examples[index]
        try:
            predictions = runtime.predict(cp, layout, text)
        except Exception as e:
            raise EvaluationError("evaluation_failed", dataset=dataset.name, index=index, detail=str(e))
        for pair in pairs:
            y_true, y_pred = collected[pair]
            y_true.append(label if pair.is_home else pair.expected_label)
            y_pred.append(predictions[pair.segment][0])
    return collected


def evaluate(model: Union[Checkpoint, PathLike], layout: Optional[SegmentLayout],
             datasets: Sequence[LabeledDataset], sample_cap: Optional[int] = EVAL_DEFAULTS["sample_cap"],
             seed: int = EVAL_DEFAULTS["seed"], plan: Optional[Sequence[EvalPair]] = None,
             subsets: Optional[Dict[str, Sequence[int]]] = None,
             exclude_zero_support: bool = EVAL_DEFAULTS["exclude_zero_support"],
             threads: int = 1) -> Dict[str, Any]:
    """
    Evaluate one model on every planned (dataset, segment) pair. `subsets` pins
    the example indices per dataset; otherwise min(sample_cap, size) examples
    are drawn by seeded shuffle.
    """
    load_start = time.perf_counter()
    cp = model if isinstance(model, Checkpoint) else load(model)
    load_ms = (time.perf_counter() - load_start) * 1000.0
    layout = layout or layout_of(cp)
    check_dataset_names(datasets)
    datasets = [resolve_dataset(d, layout) for d in datasets]

    pairs = list(plan) if plan else cross_check_plan(layout, datasets)
    for pair in pairs:
        layout.segment(pair.segment)

    inference_start = time.perf_counter()

    def run(dataset: LabeledDataset):
        indices = subsets[dataset.name] if subsets else sample_indices(len(dataset.examples), sample_cap, seed, dataset.name)
        dataset_pairs = [p for p in pairs if p.dataset == dataset.name]
        return _predict_dataset(cp, layout, dataset, indices, dataset_pairs)

    if threads > 1 and len(datasets) > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            collected_per_dataset = list(executor.map(run, datasets))
    else:
        collected_per_dataset = [run(d) for d in datasets]
    inference_ms = (time.perf_counter() - inference_start) * 1000.0

    collected = {}
    for part in collected_per_dataset:
        collected.update(part)

    results = []
    for pair in pairs:
        if pair not in collected:
            continue
        y_true, y_pred = collected[pair]
        result = {"dataset": pair.dataset, "segment": pair.segment, "expected_label": pair.expected_label}
        result.update(score_pair(layout.segment(pair.segment).labels, y_true, y_pred, exclude_zero_support))
        results.append(result)
        logger.debug(
            f"{pair.dataset} on {pair.segment}: accuracy {result['accuracy']:.3f}, "
            f"macro-F1 {result['macro_f1']:.3f} ({result['samples']} samples)"
        )

    report = {
        "results": results,
        "timings": {"load_duration_ms": load_ms, "inference_duration_ms": inference_ms},
        "seed": seed,
        "sample_cap": sample_cap,
    }
    report["summary"] = summarize(report)
    return report


def summarize(report: Dict[str, Any]) -> Dict[str, Any]:
    """Per-segment mean macro-F1 and the unweighted mean over all evaluated pairs."""
    per_segment: Dict[str, List[float]] = {}
    for result in report["results"]:
        per_segment.setdefault(result["segment"], []).append(result["macro_f1"])
    scores = [r["macro_f1"] for r in report["results"]]
    return {
        "per_segment_mean_macro_f1": {seg: float(np.mean(v)) for seg, v in per_segment.items()},
        "mean_macro_f1_across_datasets": float(np.mean(scores)) if scores else 0.0,
    }


def result_key(result: Dict[str, Any]) -> str:
    """Score key: the dataset name on its home segment, 'dataset->segment' for cross-checks."""
    if result.get("expected_label") is None:
        return result["dataset"]
    return f"{result['dataset']}->{result['segment']}"


class BuiltinEvaluator:
    """Evaluator running the reference runtime in-process."""

    name = "builtin"

    def __init__(self, sample_cap: Optional[int] = EVAL_DEFAULTS["sample_cap"], seed: int = EVAL_DEFAULTS["seed"],
                 exclude_zero_support: bool = EVAL_DEFAULTS["exclude_zero_support"], threads: int = 1):
        self.sample_cap = sample_cap
        self.seed = seed
        self.exclude_zero_support = exclude_zero_support
        self.threads = threads

    def evaluate(self, checkpoint, layout, datasets, plan=None, subsets=None) -> Dict[str, Any]:
        return evaluate(checkpoint, layout, datasets, sample_cap=self.sample_cap, seed=self.seed, plan=plan,
                        subsets=subsets, exclude_zero_support=self.exclude_zero_support, threads=self.threads)


def _time_model_run(path: PathLike, texts: Sequence[str]) -> Dict[str, float]:
    load_start = time.perf_counter()
    cp = load(path)
    layout = layout_of(cp, Path(path).stem)
    inference_start = time.perf_counter()
    for text in texts:
        runtime.predict(cp, layout, text)
    end = time.perf_counter()
    return {
        "load_duration_ms": (inference_start - load_start) * 1000.0,
        "inference_duration_ms": (end - inference_start) * 1000.0,
    }


def compare_runtime(individual_models: Sequence[PathLike], merged_model: PathLike,
                    datasets: Sequence[LabeledDataset], sample_cap: Optional[int] = None) -> Dict[str, Any]:
    """
    Summed load + inference time of running every individual model over all
    datasets, against one merged model over the same texts.
    """
    texts = []
    for dataset in datasets:
        indices = sample_indices(len(dataset.examples), sample_cap, 0, dataset.name)
        texts.extend(dataset.examples[i][0] for i in indices)

    process = psutil.Process()
    individual_runs = {}
    for path in individual_models:
        individual_runs[Path(path).stem] = _time_model_run(path, texts)
    individual_rss = process.memory_info().rss
    merged = _time_model_run(merged_model, texts)
    merged_rss = process.memory_info().rss

    rows = []
    for metric in ("load_duration_ms", "inference_duration_ms", "total_duration_ms"):
        if metric == "total_duration_ms":
            individual = sum(r["load_duration_ms"] + r["inference_duration_ms"] for r in individual_runs.values())
            combined = merged["load_duration_ms"] + merged["inference_duration_ms"]
        else:
            individual = sum(r[metric] for r in individual_runs.values())
            combined = merged[metric]
        reduction = (individual - combined) / individual * 100.0 if individual > 0 else 0.0
        rows.append({
            "metric": metric,
            "individual_ms": individual,
            "merged_ms": combined,
            "reduction_percent": reduction,
        })

    logger.info(f"Runtime over {len(texts)} texts: total reduction {rows[-1]['reduction_percent']:.1f}%")
    return {
        "inferences": len(texts),
        "individual": individual_runs,
        "merged": merged,
        "table": rows,
        "rss_bytes": {"after_individual": individual_rss, "after_merged": merged_rss},
    }


def accuracy_comparison(original_reports: Sequence[Dict[str, Any]], merged_report: Dict[str, Any]) -> List[Dict[str, Any]]:
    """
    Per expected label accuracy of the original models next to the merged
    model, matching results by (dataset, segment) and labels by position.
    """
    originals = {}
    for report in original_reports:
        for result in report["results"]:
            originals[(result["dataset"], result["segment"])] = result

    rows = []
    for result in merged_report["results"]:
        original = originals.get((result["dataset"], result["segment"]))
        if original is None or len(original["labels"]) != len(result["labels"]):
            continue
        merged_matrix = np.asarray(result["confusion_matrix"])
        original_matrix = np.asarray(original["confusion_matrix"])
        for i, label in enumerate(result["labels"]):
            merged_support = merged_matrix[i].sum()
            original_support = original_matrix[i].sum()
            if merged_support == 0 and original_support == 0:
                continue
            merged_acc = float(merged_matrix[i, i] / merged_support) if merged_support else None
            original_acc = float(original_matrix[i, i] / original_support) if original_support else None
            rows.append({
                "dataset": result["dataset"],
                "segment": result["segment"],
                "expected_label": label,
                "original_accuracy": original_acc,
                "merged_accuracy": merged_acc,
                "delta": merged_acc - original_acc if merged_acc is not None and original_acc is not None else None,
            })
    return rows


def emit_report(report: Dict[str, Any], out_dir: PathLike,
                baseline_reports: Optional[Sequence[Dict[str, Any]]] = None) -> List[Path]:
    """report.json, one confusion CSV per (dataset, segment) and scores.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    document = dict(report)
    # Run-dependent values live under metadata; the rest is reproducible
    metadata = {"generated_at": datetime.now(timezone.utc).isoformat()}
    if "timings" in document:
        metadata["timings"] = document.pop("timings")
    document["metadata"] = metadata
    write_json(document, out_dir / "report.json")
    written.append(out_dir / "report.json")

    for result in report["results"]:
        labels = result["labels"]
        frame = pd.DataFrame(result["confusion_matrix"], index=labels, columns=labels)
        frame.index.name = "expected\\predicted"
        path = out_dir / f"confusion_{safe_filename(result['dataset'])}_{safe_filename(result['segment'])}.csv"
        frame.to_csv(path)
        written.append(path)

    scores = pd.DataFrame(
        [{"dataset": r["dataset"], "segment": r["segment"], "accuracy": r["accuracy"], "macro_f1": r["macro_f1"]}
         for r in report["results"]],
        columns=["dataset", "segment", "accuracy", "macro_f1"],
    )
    scores.to_csv(out_dir / "scores.csv", index=False)
    written.append(out_dir / "scores.csv")

    if baseline_reports:
        comparison = pd.DataFrame(
            accuracy_comparison(baseline_reports, report),
            columns=["dataset", "segment", "expected_label", "original_accuracy", "merged_accuracy", "delta"],
        )
        comparison.to_csv(out_dir / "accuracy_comparison.csv", index=False)
        written.append(out_dir / "accuracy_comparison.csv")

    logger.info(f"Wrote {len(written)} report files to {out_dir}")
    return written


def write_runtime_table(comparison: Dict[str, Any], out_dir: PathLike) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(comparison, out_dir / "runtime.json")
    pd.DataFrame(comparison["table"]).to_csv(out_dir / "runtime.csv", index=False)
    return [out_dir / "runtime.json", out_dir / "runtime.csv"]

