"""
Configuration settings for the HM3 merging toolkit.
Centralized configuration management for better maintainability.
"""

import os
import logging
from typing import Dict, Any, Optional

from dotenv import load_dotenv

import constants

load_dotenv()

logger = logging.getLogger(__name__)

# Logging Configuration
LOG_LEVEL = os.getenv("HM3_LOG_LEVEL", "INFO")
LOG_FILE = os.getenv("HM3_LOG_FILE")
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# Parallelism
THREADS_ENV_VAR = "HM3_THREADS"
DEFAULT_THREADS = 1

# External evaluator
EXTERNAL_TIMEOUT_SECONDS = float(os.getenv("HM3_EXTERNAL_TIMEOUT", "3600"))

# File names written into output directories
CHECKPOINT_SUFFIX = ".hm3"
LAYOUT_FILE = "layout.json"
MERGED_FILE = "merged.hm3"
BEST_FILE = "best.hm3"
TRIALS_FILE = "trials.jsonl"
SCATTER_FILE = "scatter.csv"
BEST_RECIPE_FILE = "best_recipe.json"
SUMMARY_FILE = "summary.json"
EXPANDED_BASE_FILE = "base.expanded.hm3"

# Merge Default Parameters
MERGE_DEFAULTS = {
    "strategy": constants.STRATEGY_TIES,
    "density": 1.0,
    "seed": 0,
    "trim_scope": constants.TRIM_GLOBAL,
    "lambda": 1.0,
}

# Search Default Parameters
SEARCH_DEFAULTS = {
    "trials": constants.SEARCH_TRIALS,
    "val_samples": constants.VALIDATION_SAMPLES,
    "test_samples": constants.TEST_SAMPLES,
    "baseline_samples": constants.BASELINE_SAMPLES,
    "beta_alpha": constants.BETA_ALPHA,
    "beta_beta": constants.BETA_BETA,
    "base_seed": 0,
    "self_merge": False,
    "threads": 1,
    "fixed_density": None,
}

# Evaluation Default Parameters
EVAL_DEFAULTS = {
    "sample_cap": constants.EVAL_SAMPLE_CAP,
    "seed": 0,
    "exclude_zero_support": False,
}

# Exit codes
EXIT_OK = 0
EXIT_ARGUMENT_ERROR = 2
EXIT_VALIDATION_ERROR = 3
EXIT_RUNTIME_FAILURE = 4

# Error Messages
ERROR_MESSAGES = {
    "shape_mismatch": "Shape mismatch: {left} vs {right}",
    "non_finite_scalar": "Scale factor must be finite, got {value}",
    "non_finite_result": "Operation produced non-finite values",
    "empty_tensor_list": "At least one tensor is required",
    "invalid_keep_fraction": "keep_fraction must be in (0, 1], got {value}",
    "invalid_density": "density must be in (0, 1], got {value}",
    "invalid_threshold": "threshold must be non-negative, got {value}",
    "malformed_header": "Malformed header: {detail}",
    "truncated_payload": "Truncated payload: {detail}",
    "unknown_family": "Unknown architecture family '{family}'",
    "manifest_mismatch": "Manifest/payload length mismatch: {detail}",
    "overlapping_extents": "Overlapping tensor extents: {first} and {second}",
    "duplicate_labels": "Duplicate labels: {labels}",
    "empty_label": "Labels must be non-empty strings",
    "missing_tensor": "Missing required tensor '{name}'",
    "unexpected_tensor": "Unexpected tensor '{name}'",
    "tensor_shape": "Tensor '{name}' has shape {actual}, expected {expected}",
    "head_width": "head_out_dim {head_out_dim} does not match label count {labels}",
    "unknown_role": "Unknown checkpoint role '{role}'",
    "bad_role": "Expected a checkpoint with role '{expected}', got '{actual}'",
    "duplicate_model_id": "Duplicate model id '{model_id}'",
    "unknown_model_id": "Model id '{model_id}' has no segment in the layout",
    "segment_width": "Checkpoint head width {actual} does not match segment width {expected} for '{model_id}'",
    "layout_mismatch": "Logit vector of length {actual} does not match layout width {expected}",
    "bad_tiling": "Segment '{model_id}' has width {width} at offset {actual}; segments must be non-empty and start at {expected}",
    "layout_width": "Layout declares total width {declared} but its segments cover {actual}",
    "incompatible": "Checkpoints are not compatible for merging: {diagnostics}",
    "too_few_models": "At least {minimum} checkpoints are required, got {count}",
    "weight_count": "Expected {expected} soup weights, got {actual}",
    "bad_weights": "Soup weights must be non-negative and sum to 1, got {weights}",
    "unknown_strategy": "Unknown merge strategy '{strategy}'",
    "bad_recipe": "Invalid recipe: {detail}",
    "bad_search_config": "Invalid search config: {detail}",
    "token_out_of_range": "Token id {token} outside vocabulary of size {vocab_size}",
    "invalid_vocab_size": "vocab_size must be at least 2, got {vocab_size}",
    "empty_dataset": "Empty dataset: {path}",
    "malformed_line": "Malformed record at {path}:{line}: {detail}",
    "unknown_label": "Label '{label}' is not part of segment '{segment}'",
    "unknown_segment": "Segment '{segment}' is not part of the layout",
    "unknown_dataset": "Dataset '{dataset}' was not loaded",
    "duplicate_dataset": "Dataset name '{dataset}' is used more than once",
    "ambiguous_target_segment": "Dataset '{dataset}' fits segments {segments}; pin one with PATH@SEGMENT",
    "no_target_segment": "No segment contains every label of dataset '{dataset}'",
    "evaluation_failed": "Evaluation failed on dataset '{dataset}', example {index}: {detail}",
    "external_failed": "external evaluator failed (exit code {code}): {detail}",
    "external_report": "external evaluator returned an invalid report: {detail}",
    "base_required": "base required for task vectors (strategy '{strategy}')",
    "missing_argument": "Subcommand '{command}' requires {argument}",
}


def get_error_message(key: str, **kwargs: Any) -> str:
    """Get an error message with optional formatting."""
    message = ERROR_MESSAGES.get(key, "An unknown error occurred.")
    return message.format(**kwargs) if kwargs else message


def get_thread_count(cli_value: Optional[int] = None) -> int:
    """Resolve worker count: CLI flag, then HM3_THREADS, then the default."""
    if cli_value is not None:
        return max(1, int(cli_value))
    raw = os.getenv(THREADS_ENV_VAR)
    if not raw:
        return DEFAULT_THREADS
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning(f"Ignoring invalid {THREADS_ENV_VAR}={raw!r}, using {DEFAULT_THREADS}")
        return DEFAULT_THREADS


def get_log_level(cli_value: Optional[str] = None) -> str:
    """Resolve the log level name."""
    return (cli_value or LOG_LEVEL).upper()


def merged_defaults(defaults: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Overlay user-supplied values on a defaults table."""
    merged = dict(defaults)
    merged.update(overrides)
    return merged
