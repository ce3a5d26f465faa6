import json
import shlex
import logging
import subprocess
import tempfile
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union

import constants
from checkpoint_store import Checkpoint, save
from config import EXTERNAL_TIMEOUT_SECONDS
from errors import ExternalEvaluatorError
from hm3_transform import save_layout

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

REQUIRED_RESULT_KEYS = ["dataset", "segment", "labels", "confusion_matrix", "accuracy", "macro_f1", "samples"]


def validate_report(report: Any) -> Dict[str, Any]:
    """Check an EvalReport document; raises ExternalEvaluatorError on the first problem."""
    try:
        return _check_report(report)
    except (TypeError, ValueError, KeyError) as exc:
        raise ExternalEvaluatorError("external_report", detail=f"unreadable field: {exc}")


def _check_report(report: Any) -> Dict[str, Any]:
    def fail(detail: str):
        raise ExternalEvaluatorError("external_report", detail=detail)

    if not isinstance(report, dict) or not isinstance(report.get("results"), list):
        fail("expected an object with a 'results' list")

    for result in report["results"]:
        missing = [key for key in REQUIRED_RESULT_KEYS if key not in result]
        if missing:
            fail(f"result is missing {missing}")
        labels = result["labels"]
        matrix = result["confusion_matrix"]
        if len(matrix) != len(labels) or any(len(row) != len(labels) for row in matrix):
            fail(f"confusion matrix for {result['dataset']} is not {len(labels)}x{len(labels)}")
        if any(int(v) < 0 for row in matrix for v in row):
            fail(f"negative count in confusion matrix for {result['dataset']}")
        if sum(int(v) for row in matrix for v in row) != int(result["samples"]):
            fail(f"confusion matrix for {result['dataset']} does not sum to {result['samples']}")
        for key in ("accuracy", "macro_f1"):
            if not 0.0 <= float(result[key]) <= 1.0:
                fail(f"{key}={result[key]} outside [0, 1]")

    for row in report.get("probabilities", []):
        values = [float(v) for v in row]
        if any(v < 0 for v in values) or abs(sum(values) - 1.0) > constants.PROBABILITY_TOLERANCE:
            fail(f"probabilities {values} do not sum to 1")
    return report


def run_external_evaluator(command: str, checkpoint_path: PathLike, dataset_paths: Sequence[PathLike],
                           layout_path: PathLike, timeout: Optional[float] = None) -> Dict[str, Any]:
    """Invoke `<command> --checkpoint P --dataset D... --layout L` and parse its stdout."""
    argv = shlex.split(command) + ["--checkpoint", str(checkpoint_path)]
    for dataset_path in dataset_paths:
        argv += ["--dataset", str(dataset_path)]
    argv += ["--layout", str(layout_path)]

    logger.info(f"Running external evaluator: {' '.join(argv)}")
    try:
        completed = subprocess.run(
            argv,
            capture_output=True,
            text=True,
            timeout=timeout or EXTERNAL_TIMEOUT_SECONDS,
        )
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise ExternalEvaluatorError("external_failed", code=None, detail=str(exc))

    if completed.returncode != 0:
        error_message = completed.stderr.strip()[-2000:]
        logger.error(f"External evaluator exited with {completed.returncode}: {error_message}")
        raise ExternalEvaluatorError("external_failed", code=completed.returncode, detail=error_message)

    try:
        report = json.loads(completed.stdout)
    except json.JSONDecodeError as exc:
        raise ExternalEvaluatorError("external_report", detail=f"stdout is not JSON: {exc}")
    return validate_report(report)


class ExternalEvaluator:
    """Evaluator backed by an external command; same call shape as the built-in one."""

    name = "external"

    def __init__(self, command: str, timeout: Optional[float] = None):
        self.command = command
        self.timeout = timeout

    def evaluate(self, checkpoint: Checkpoint, layout, datasets, plan=None, subsets=None) -> Dict[str, Any]:
        cross_checks = [pair for pair in plan or [] if pair.expected_label is not None]
        if cross_checks:
            logger.warning(
                f"External evaluator receives datasets only; {len(cross_checks)} cross-check pairs "
                f"are left to the command itself"
            )
        with tempfile.TemporaryDirectory(prefix="hm3-eval-") as tmp:
            tmp_dir = Path(tmp)
            checkpoint_path = tmp_dir / "model.hm3"
            layout_path = tmp_dir / "layout.json"
            save(checkpoint, checkpoint_path)
            save_layout(layout, layout_path)

            dataset_paths = []
            for dataset in datasets:
                indices = subsets[dataset.name] if subsets else range(len(dataset.examples))
                path = tmp_dir / f"{dataset.name}.jsonl"
                with open(path, "w", encoding="utf-8") as f:
                    for index in indices:
                        text, label = dataset.examples[index]
                        f.write(json.dumps({"text": text, "expected_label": label}, ensure_ascii=False) + "\n")
                dataset_paths.append(path)

            return run_external_evaluator(self.command, checkpoint_path, dataset_paths, layout_path, self.timeout)
