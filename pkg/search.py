"""
Random search over DARE-TIES task-vector densities.

Every trial i draws a density from Beta(alpha, beta) with a generator seeded by
base_seed + i, merges the HM3-expanded models with that shared density and
scores the merge on a fixed validation subset. A strictly better mean
validation macro-F1 makes the trial the new best, which is then scored on the
disjoint test subset.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

import constants
import merge_engine
from checkpoint_store import Checkpoint
from config import (
    BEST_RECIPE_FILE,
    SCATTER_FILE,
    SEARCH_DEFAULTS,
    SUMMARY_FILE,
    TRIALS_FILE,
)
from errors import RecipeError, StructuralError
from evaluation import (
    BuiltinEvaluator,
    LabeledDataset,
    check_dataset_names,
    cross_check_plan,
    resolve_dataset,
    result_key,
)
from hm3_transform import SegmentLayout, transform
from merge_engine import MergeRecipe, save_recipe
from utils import fnv1a_64, log_error, read_json, write_json

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
ModelInput = Tuple[str, Checkpoint]


@dataclass
class SearchConfig:
    trials: int = SEARCH_DEFAULTS["trials"]
    val_samples: int = SEARCH_DEFAULTS["val_samples"]
    test_samples: int = SEARCH_DEFAULTS["test_samples"]
    baseline_samples: int = SEARCH_DEFAULTS["baseline_samples"]
    beta_alpha: float = SEARCH_DEFAULTS["beta_alpha"]
    beta_beta: float = SEARCH_DEFAULTS["beta_beta"]
    base_seed: int = SEARCH_DEFAULTS["base_seed"]
    self_merge: bool = SEARCH_DEFAULTS["self_merge"]
    threads: int = SEARCH_DEFAULTS["threads"]
    # Forces every trial's density; None samples from the Beta distribution
    fixed_density: Optional[float] = SEARCH_DEFAULTS["fixed_density"]

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("trials", "val_samples", "test_samples", "baseline_samples", "threads"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise RecipeError("bad_search_config", detail=f"{name} must be a positive integer, got {value!r}")
        if not (self.beta_alpha > 0 and self.beta_beta > 0):
            raise RecipeError("bad_search_config", detail="beta_alpha and beta_beta must be positive")
        if not 0 <= int(self.base_seed) <= constants.UINT64_MASK:
            raise RecipeError("bad_search_config", detail=f"base_seed {self.base_seed} is not a 64-bit unsigned integer")
        if self.fixed_density is not None and not 0.0 < float(self.fixed_density) <= 1.0:
            raise RecipeError("bad_search_config", detail=f"fixed_density must be in (0, 1], got {self.fixed_density}")

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SearchConfig":
        unknown = sorted(set(data) - {f.name for f in fields(cls)})
        if unknown:
            raise RecipeError("bad_search_config", detail=f"unknown keys {unknown}")
        try:
            return cls(**data)
        except TypeError as e:
            raise RecipeError("bad_search_config", detail=str(e))


def load_search_config(path: PathLike) -> SearchConfig:
    data = read_json(path)
    if not isinstance(data, dict):
        raise RecipeError("bad_search_config", detail="search config must be a JSON object")
    return SearchConfig.from_dict(data)


@dataclass
class TrialRecord:
    trial_index: int
    density: float
    seed: int
    val_scores: Dict[str, float] = field(default_factory=dict)
    val_mean_f1: Optional[float] = None
    is_new_best: bool = False
    test_scores: Optional[Dict[str, float]] = None
    failed: bool = False
    error: Optional[str] = None

    @property
    def test_mean_f1(self) -> Optional[float]:
        if not self.test_scores:
            return None
        return float(np.mean(list(self.test_scores.values())))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "trial_index": self.trial_index,
            "density": self.density,
            "seed": self.seed,
            "val_scores": self.val_scores,
            "val_mean_f1": self.val_mean_f1,
            "is_new_best": self.is_new_best,
            "test_scores": self.test_scores,
            "failed": self.failed,
            "error": self.error,
        }


@dataclass
class SearchResult:
    best: Optional[Checkpoint]
    records: List[TrialRecord]
    layout: SegmentLayout
    config: SearchConfig
    baseline_scores: Dict[str, Optional[Dict[str, float]]] = field(default_factory=dict)

    @property
    def best_record(self) -> Optional[TrialRecord]:
        bests = [r for r in self.records if r.is_new_best]
        return bests[-1] if bests else None

    @property
    def best_recipe(self) -> Optional[MergeRecipe]:
        record = self.best_record
        if record is None:
            return None
        return trial_recipe(record.density, record.seed)

    def summary(self) -> Dict[str, Any]:
        best = self.best_record
        return {
            "config": self.config.to_dict(),
            "layout": self.layout.to_dict(),
            "baseline_scores": self.baseline_scores,
            "trials": len(self.records),
            "failed_trials": sum(1 for r in self.records if r.failed),
            "best_trial": best.trial_index if best else None,
            "best_density": best.density if best else None,
            "best_val_mean_f1": best.val_mean_f1 if best else None,
            "best_test_scores": best.test_scores if best else None,
        }


def sample_density(rng: np.random.Generator, alpha: float = constants.BETA_ALPHA,
                   beta: float = constants.BETA_BETA) -> float:
    """
    One Beta(alpha, beta) variate as G_a / (G_a + G_b) from two Gamma variates.
    Exact 0 and 1 are redrawn.
    """
    while True:
        ga = rng.standard_gamma(alpha)
        gb = rng.standard_gamma(beta)
        total = ga + gb
        if total <= 0.0:
            continue
        x = ga / total
        if 0.0 < x < 1.0:
            return float(x)


def trial_seed(base_seed: int, index: int) -> int:
    return (int(base_seed) + index) & constants.UINT64_MASK


def trial_density(config: SearchConfig, index: int) -> float:
    if config.fixed_density is not None:
        return float(config.fixed_density)
    rng = np.random.Generator(np.random.PCG64(trial_seed(config.base_seed, index)))
    return sample_density(rng, config.beta_alpha, config.beta_beta)


def trial_recipe(density: float, seed: int) -> MergeRecipe:
    return MergeRecipe(strategy=constants.STRATEGY_DARE_TIES, density=density, seed=seed, lam=1.0)


def split_subsets(datasets: Sequence[LabeledDataset], config: SearchConfig):
    """
    Fixed, seeded validation / test / baseline index sets per dataset.
    Validation and test never overlap; the baseline subset is disjoint from
    both when the dataset is large enough and reuses the test subset otherwise.
    """
    val, test, baseline = {}, {}, {}
    for dataset in datasets:
        size = len(dataset.examples)
        rng = np.random.default_rng([int(config.base_seed), fnv1a_64(dataset.name.encode("utf-8"))])
        order = [int(i) for i in rng.permutation(size)]

        n_val, n_test = config.val_samples, config.test_samples
        if size < n_val + n_test:
            if size < 2:
                logger.warning(f"Dataset '{dataset.name}' has {size} example; validation and test share it")
                val[dataset.name] = test[dataset.name] = baseline[dataset.name] = sorted(order)
                continue
            n_val = min(n_val, max(1, round(size * n_val / (n_val + n_test))))
            n_val = min(n_val, size - 1)
            n_test = size - n_val
            logger.warning(
                f"Dataset '{dataset.name}' has only {size} examples; "
                f"using {n_val} validation and {n_test} test samples"
            )
        val[dataset.name] = sorted(order[:n_val])
        test[dataset.name] = sorted(order[n_val:n_val + n_test])

        remaining = order[n_val + n_test:]
        if len(remaining) >= config.baseline_samples:
            baseline[dataset.name] = sorted(remaining[:config.baseline_samples])
        else:
            logger.info(
                f"Dataset '{dataset.name}' cannot hold a disjoint baseline subset of "
                f"{config.baseline_samples}; baseline reuses the test subset"
            )
            baseline[dataset.name] = test[dataset.name]
    return val, test, baseline


def _scores(report: Dict[str, Any]) -> Dict[str, float]:
    return {result_key(r): float(r["macro_f1"]) for r in report["results"]}


def _mean(scores: Dict[str, float]) -> float:
    return float(np.mean(list(scores.values()))) if scores else 0.0


def _prepare(models: Sequence[ModelInput], base: Checkpoint, self_merge: bool):
    if self_merge:
        if len(models) != 1:
            raise RecipeError("bad_search_config", detail=f"self_merge takes exactly one model, got {len(models)}")
        expanded, expanded_base, layout = transform(models, base)
        # The model is both merge inputs
        return [expanded[0], expanded[0]], expanded, expanded_base, layout
    if len(models) < 2:
        raise StructuralError("too_few_models", minimum=2, count=len(models))
    expanded, expanded_base, layout = transform(models, base)
    return expanded, expanded, expanded_base, layout


def run_search(models: Sequence[ModelInput], base: Checkpoint, datasets: Sequence[LabeledDataset],
               plan_entries: Optional[Sequence[Dict[str, str]]] = None,
               config: Optional[SearchConfig] = None, evaluator=None) -> SearchResult:
    """
    Run config.trials DARE-TIES trials and track the best merge.
    Failed trials are recorded and skipped; they never abort the search.
    """
    config = config or SearchConfig()
    if not datasets:
        raise RecipeError("bad_search_config", detail="at least one dataset is required")
    check_dataset_names(datasets)
    merge_inputs, originals, expanded_base, layout = _prepare(models, base, config.self_merge)
    datasets = [resolve_dataset(d, layout) for d in datasets]
    plan = cross_check_plan(layout, datasets, plan_entries)
    evaluator = evaluator or BuiltinEvaluator(sample_cap=None, seed=config.base_seed)
    val_subsets, test_subsets, baseline_subsets = split_subsets(datasets, config)

    logger.info(
        f"Search: {config.trials} trials over {len(merge_inputs)} inputs, "
        f"{len(datasets)} datasets, layout width {layout.total_width}"
    )

    baseline_scores = {}
    for model_id, original in zip(layout.model_ids, originals):
        try:
            report = evaluator.evaluate(original, layout, datasets, plan=plan, subsets=baseline_subsets)
            baseline_scores[model_id] = _scores(report)
        except Exception as e:
            log_error(e, f"Baseline evaluation of '{model_id}' failed")
            baseline_scores[model_id] = None

    def run_trial(index: int):
        seed = trial_seed(config.base_seed, index)
        density = trial_density(config, index)
        record = TrialRecord(trial_index=index, density=density, seed=seed)
        try:
            merged = merge_engine.dare_ties_merge(expanded_base, merge_inputs, trial_recipe(density, seed))
            report = evaluator.evaluate(merged, layout, datasets, plan=plan, subsets=val_subsets)
            record.val_scores = _scores(report)
            record.val_mean_f1 = _mean(record.val_scores)
            return record, merged
        except Exception as e:
            log_error(e, f"Trial {index} (density {density:.4f}) failed")
            record.failed = True
            record.error = str(e)
            return record, None

    records: List[TrialRecord] = []
    best: Optional[Checkpoint] = None
    best_score = float("-inf")
    chunk = max(1, config.threads)

    executor = ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 else None
    try:
        for start in range(0, config.trials, chunk):
            indices = range(start, min(start + chunk, config.trials))
            outcomes = list(executor.map(run_trial, indices)) if executor else [run_trial(i) for i in indices]

            # Best-model updates happen in trial order
            for record, merged in outcomes:
                if not record.failed and record.val_mean_f1 > best_score:
                    try:
                        report = evaluator.evaluate(merged, layout, datasets, plan=plan, subsets=test_subsets)
                        record.test_scores = _scores(report)
                    except Exception as e:
                        log_error(e, f"Test evaluation of trial {record.trial_index} failed")
                        record.failed = True
                        record.error = str(e)
                    else:
                        record.is_new_best = True
                        best, best_score = merged, record.val_mean_f1
                        logger.info(
                            f"Trial {record.trial_index}: new best val macro-F1 {record.val_mean_f1:.4f} "
                            f"at density {record.density:.4f}, test {record.test_mean_f1:.4f}"
                        )
                records.append(record)
    finally:
        if executor:
            executor.shutdown()

    failures = sum(1 for r in records if r.failed)
    if best is None:
        logger.error(f"Search finished without a successful trial ({failures} failed)")
    else:
        logger.info(f"Search finished: best val macro-F1 {best_score:.4f}, {failures} failed trials")
    return SearchResult(best=best, records=records, layout=layout, config=config, baseline_scores=baseline_scores)


def run_self_merge(model: ModelInput, base: Checkpoint, datasets: Sequence[LabeledDataset],
                   config: Optional[SearchConfig] = None,
                   plan_entries: Optional[Sequence[Dict[str, str]]] = None, evaluator=None) -> SearchResult:
    """DARE-TIES search merging one model with itself over a single-segment layout."""
    config = replace(config or SearchConfig(), self_merge=True)
    return run_search([model], base, datasets, plan_entries, config, evaluator)


def emit_search_artifacts(records: Sequence[TrialRecord], out_dir: PathLike,
                          best_recipe: Optional[MergeRecipe] = None,
                          summary: Optional[Dict[str, Any]] = None) -> List[Path]:
    """trials.jsonl, scatter.csv, and best_recipe.json / summary.json when given."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    with open(out_dir / TRIALS_FILE, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
    written.append(out_dir / TRIALS_FILE)

    scatter = pd.DataFrame(
        [{
            "trial": r.trial_index,
            "density": r.density,
            "val_mean_f1": r.val_mean_f1,
            "is_new_best": r.is_new_best,
            "test_mean_f1": r.test_mean_f1,
            "failed": r.failed,
        } for r in records],
        columns=["trial", "density", "val_mean_f1", "is_new_best", "test_mean_f1", "failed"],
    )
    scatter.to_csv(out_dir / SCATTER_FILE, index=False)
    written.append(out_dir / SCATTER_FILE)

    if best_recipe is not None:
        save_recipe(best_recipe, out_dir / BEST_RECIPE_FILE)
        written.append(out_dir / BEST_RECIPE_FILE)
    if summary is not None:
        write_json(summary, out_dir / SUMMARY_FILE)
        written.append(out_dir / SUMMARY_FILE)

    logger.info(f"Wrote {len(records)} trial records to {out_dir}")
    return written
