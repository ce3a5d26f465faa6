"""
Training-free merging of HM3-expanded checkpoints.

Strategies:
    soup             weighted average of full weights
    task_arithmetic  base + lambda * sum of task vectors
    ties             trim -> elect sign -> disjoint mean over task vectors
    dare_ties        random drop + rescale of task vectors, then ties without trimming
    dare_soup        random drop + rescale, then weighted sum of task vectors

Task vectors are held in float64 so base + (ft - base) recomposes ft exactly;
merged weights are rounded to float32 once, when the checkpoint is assembled.
"""

import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Union

import numpy as np

import constants
import tensor_core
from checkpoint_store import Checkpoint, compatible_for_merge
from config import MERGE_DEFAULTS
from errors import InvariantError, RecipeError, StructuralError
from utils import fnv1a_64, read_json, write_json

logger = logging.getLogger(__name__)


@dataclass
class TaskVector:
    tensors: Dict[str, np.ndarray]

    def names(self) -> List[str]:
        return list(self.tensors)


@dataclass
class MergeRecipe:
    strategy: str = MERGE_DEFAULTS["strategy"]
    soup_weights: Optional[List[float]] = None
    density: float = MERGE_DEFAULTS["density"]
    seed: int = MERGE_DEFAULTS["seed"]
    trim_scope: str = MERGE_DEFAULTS["trim_scope"]
    # `lambda` in JSON documents
    lam: float = MERGE_DEFAULTS["lambda"]
    # Optional per-model densities; search always uses the shared density
    densities: Optional[List[float]] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.strategy not in constants.STRATEGIES:
            raise RecipeError("unknown_strategy", strategy=self.strategy)
        _check_density(self.density)
        for d in self.densities or []:
            _check_density(d)
        if self.trim_scope not in constants.TRIM_SCOPES:
            raise RecipeError("bad_recipe", detail=f"trim_scope must be one of {constants.TRIM_SCOPES}")
        if not 0 <= int(self.seed) <= constants.UINT64_MASK:
            raise RecipeError("bad_recipe", detail=f"seed {self.seed} is not a 64-bit unsigned integer")
        if not math.isfinite(self.lam):
            raise RecipeError("bad_recipe", detail=f"lambda must be finite, got {self.lam}")
        if self.soup_weights is not None:
            weights = [float(w) for w in self.soup_weights]
            if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > constants.SOUP_WEIGHT_TOLERANCE:
                raise RecipeError("bad_weights", weights=weights)

    def density_for(self, index: int) -> float:
        if self.densities:
            if index >= len(self.densities):
                raise RecipeError("bad_recipe", detail=f"no density for model {index}")
            return self.densities[index]
        return self.density

    def to_dict(self) -> Dict[str, Any]:
        return {
            "strategy": self.strategy,
            "soup_weights": self.soup_weights,
            "density": self.density,
            "seed": int(self.seed),
            "trim_scope": self.trim_scope,
            "lambda": self.lam,
            "densities": self.densities,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MergeRecipe":
        known = {f.name for f in fields(cls)} - {"lam"} | {"lambda"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise RecipeError("bad_recipe", detail=f"unknown keys {unknown}")
        values = dict(data)
        if "lambda" in values:
            values["lam"] = values.pop("lambda")
        try:
            return cls(**values)
        except (TypeError, ValueError) as e:
            if isinstance(e, RecipeError):
                raise
            raise RecipeError("bad_recipe", detail=str(e))


def _check_density(density: float) -> None:
    if not 0.0 < float(density) <= 1.0:
        raise InvariantError("invalid_density", value=density)


def load_recipe(path: Union[str, Path]) -> MergeRecipe:
    data = read_json(path)
    if not isinstance(data, dict):
        raise RecipeError("bad_recipe", detail="recipe must be a JSON object")
    return MergeRecipe.from_dict(data)


def save_recipe(recipe: MergeRecipe, path: Union[str, Path]) -> None:
    write_json(recipe.to_dict(), path)


def _map_tensors(fn: Callable[[str], np.ndarray], names: List[str], threads: int = 1) -> Dict[str, np.ndarray]:
    """Apply fn per tensor name; results are keyed by name so scheduling never matters."""
    if threads <= 1 or len(names) <= 1:
        return {name: fn(name) for name in names}
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return dict(zip(names, executor.map(fn, names)))


def _require_compatible(cps: List[Checkpoint], minimum: int = 1) -> None:
    if len(cps) < minimum:
        raise StructuralError("too_few_models", minimum=minimum, count=len(cps))
    if len(cps) >= 2:
        ok, diagnostics = compatible_for_merge(cps)
        if not ok:
            raise StructuralError("incompatible", diagnostics="; ".join(diagnostics))
    # Post-HM3 checkpoints must agree on head shapes too
    reference = cps[0]
    for cp in cps[1:]:
        for name in constants.HEAD_TENSORS:
            if cp.tensors[name].shape != reference.tensors[name].shape:
                raise StructuralError(
                    "shape_mismatch",
                    left=list(reference.tensors[name].shape),
                    right=list(cp.tensors[name].shape),
                )


def _assemble(reference: Checkpoint, tensors: Dict[str, np.ndarray], recipe: Optional[MergeRecipe]) -> Checkpoint:
    """Round merged float64 tensors to float32 and wrap them as a merged checkpoint."""
    rounded = {}
    for name, values in tensors.items():
        if not np.all(np.isfinite(values)):
            raise InvariantError("non_finite_result")
        rounded[name] = np.asarray(values, dtype=np.float32)
    return Checkpoint(
        arch=reference.arch,
        tensors=rounded,
        label_space=list(reference.label_space),
        role=constants.ROLE_MERGED,
        layout=reference.layout,
        recipe=recipe.to_dict() if recipe is not None else None,
        metadata={"created_at": datetime.now(timezone.utc).isoformat()},
    ).validate()


def task_vector(base: Checkpoint, ft: Checkpoint) -> TaskVector:
    """Per-tensor ft - base, computed in float64."""
    _require_compatible([base, ft], minimum=2)
    return TaskVector({
        name: tensor_core.subtract(
            ft.tensors[name].astype(np.float64),
            base.tensors[name].astype(np.float64),
        )
        for name in constants.REQUIRED_TENSORS
    })


def soup_merge(cps: List[Checkpoint], weights: Optional[List[float]] = None,
               recipe: Optional[MergeRecipe] = None, threads: int = 1) -> Checkpoint:
    _require_compatible(cps, minimum=2)
    if weights is None:
        weights = [1.0 / len(cps)] * len(cps)
    if len(weights) != len(cps):
        raise StructuralError("weight_count", expected=len(cps), actual=len(weights))
    if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > constants.SOUP_WEIGHT_TOLERANCE:
        raise RecipeError("bad_weights", weights=list(weights))

    def average(name: str) -> np.ndarray:
        total = np.zeros(cps[0].tensors[name].shape, dtype=np.float64)
        for weight, cp in zip(weights, cps):
            total = tensor_core.add(total, tensor_core.scale(cp.tensors[name].astype(np.float64), float(weight)))
        return total

    merged = _map_tensors(average, constants.REQUIRED_TENSORS, threads)
    logger.info(f"Soup merge of {len(cps)} checkpoints with weights {list(weights)}")
    return _assemble(cps[0], merged, recipe or MergeRecipe(strategy=constants.STRATEGY_SOUP, soup_weights=list(weights)))


def _dare_mask(seed: int, name: str, size: int, density: float) -> np.ndarray:
    """
    Keep/drop decisions from a counter-based generator keyed by (seed, tensor
    name); the decision for flat index i is the i-th draw of that stream.
    """
    key = (fnv1a_64(name.encode("utf-8")) << 64) | (int(seed) & constants.UINT64_MASK)
    generator = np.random.Generator(np.random.Philox(key=key))
    return generator.random(size) < density


def dare(tv: TaskVector, density: float, seed: int) -> TaskVector:
    """Drop each value with probability 1 - density and rescale survivors by 1/density."""
    _check_density(density)
    if density == 1.0:
        return TaskVector({name: t.copy() for name, t in tv.tensors.items()})

    dropped = {}
    for name, values in tv.tensors.items():
        keep = _dare_mask(seed, name, values.size, density).reshape(values.shape)
        dropped[name] = np.where(keep, values.astype(np.float64) / density, 0.0)
    return TaskVector(dropped)


def _trim_task_vector(tv: TaskVector, density: float, scope: str) -> TaskVector:
    names = tv.names()
    if density >= 1.0:
        return TaskVector({name: tv.tensors[name] for name in names})
    if scope == constants.TRIM_PER_TENSOR:
        return TaskVector({name: tensor_core.trim_top_fraction([tv.tensors[name]], density)[0] for name in names})
    trimmed = tensor_core.trim_top_fraction([tv.tensors[name] for name in names], density)
    return TaskVector(dict(zip(names, trimmed)))


def _apply_to_base(base: Checkpoint, name: str, merged_tv: np.ndarray, lam: float) -> np.ndarray:
    """base + lam * merged task vector, in float64."""
    return tensor_core.add(base.tensors[name].astype(np.float64), tensor_core.scale(merged_tv, lam))


def _elect_and_merge(stacked: np.ndarray) -> np.ndarray:
    """
    Sign election and disjoint mean over axis 0 (one row per model).
    sgn(0) counts as +1; positions without agreeing non-zero values merge to 0.
    """
    elected = np.where(stacked.sum(axis=0) >= 0, 1.0, -1.0)
    agrees = (stacked != 0) & (np.sign(stacked) == elected)
    counts = agrees.sum(axis=0)
    totals = np.where(agrees, stacked, 0.0).sum(axis=0)
    return np.divide(totals, counts, out=np.zeros_like(totals), where=counts > 0)


def _ties_from_task_vectors(base: Checkpoint, tvs: List[TaskVector], recipe: MergeRecipe,
                            threads: int = 1) -> Checkpoint:
    def merge_tensor(name: str) -> np.ndarray:
        stacked = np.stack([tv.tensors[name] for tv in tvs])
        merged_tv = _elect_and_merge(stacked)
        return _apply_to_base(base, name, merged_tv, recipe.lam)

    merged = _map_tensors(merge_tensor, constants.REQUIRED_TENSORS, threads)
    return _assemble(base, merged, recipe)


def ties_merge(base: Checkpoint, cps: List[Checkpoint], recipe: MergeRecipe, threads: int = 1) -> Checkpoint:
    _require_compatible([base] + list(cps), minimum=2)
    tvs = [
        _trim_task_vector(task_vector(base, cp), recipe.density_for(i), recipe.trim_scope)
        for i, cp in enumerate(cps)
    ]
    logger.info(f"TIES merge of {len(cps)} models at density {recipe.density} ({recipe.trim_scope} trim)")
    return _ties_from_task_vectors(base, tvs, recipe, threads)


def model_seed(seed: int, index: int) -> int:
    """Per-model sub-seed: seed XOR model index."""
    return (int(seed) ^ index) & constants.UINT64_MASK


def dare_ties_merge(base: Checkpoint, cps: List[Checkpoint], recipe: MergeRecipe, threads: int = 1) -> Checkpoint:
    """DARE on every task vector, then sign election and disjoint mean without a second trim."""
    _require_compatible([base] + list(cps), minimum=2)
    tvs = [
        dare(task_vector(base, cp), recipe.density_for(i), model_seed(recipe.seed, i))
        for i, cp in enumerate(cps)
    ]
    logger.debug(f"DARE-TIES merge of {len(cps)} models at density {recipe.density}, seed {recipe.seed}")
    return _ties_from_task_vectors(base, tvs, recipe, threads)


def task_arithmetic_merge(base: Checkpoint, cps: List[Checkpoint], recipe: MergeRecipe,
                          threads: int = 1) -> Checkpoint:
    _require_compatible([base] + list(cps), minimum=2)
    tvs = [task_vector(base, cp) for cp in cps]

    def merge_tensor(name: str) -> np.ndarray:
        summed = np.sum([tv.tensors[name] for tv in tvs], axis=0)
        return _apply_to_base(base, name, summed, recipe.lam)

    return _assemble(base, _map_tensors(merge_tensor, constants.REQUIRED_TENSORS, threads), recipe)


def dare_soup_merge(base: Checkpoint, cps: List[Checkpoint], recipe: MergeRecipe, threads: int = 1) -> Checkpoint:
    _require_compatible([base] + list(cps), minimum=2)
    weights = recipe.soup_weights or [1.0 / len(cps)] * len(cps)
    if len(weights) != len(cps):
        raise StructuralError("weight_count", expected=len(cps), actual=len(weights))
    tvs = [
        dare(task_vector(base, cp), recipe.density_for(i), model_seed(recipe.seed, i))
        for i, cp in enumerate(cps)
    ]

    def merge_tensor(name: str) -> np.ndarray:
        weighted = np.zeros(base.tensors[name].shape, dtype=np.float64)
        for weight, tv in zip(weights, tvs):
            weighted = tensor_core.add(weighted, tensor_core.scale(tv.tensors[name], float(weight)))
        return _apply_to_base(base, name, weighted, recipe.lam)

    return _assemble(base, _map_tensors(merge_tensor, constants.REQUIRED_TENSORS, threads), recipe)


def merge(base: Optional[Checkpoint], cps: List[Checkpoint], recipe: MergeRecipe, threads: int = 1) -> Checkpoint:
    """Dispatch on recipe.strategy."""
    if recipe.strategy == constants.STRATEGY_SOUP:
        return soup_merge(cps, recipe.soup_weights, recipe, threads)
    if base is None:
        raise RecipeError("base_required", strategy=recipe.strategy)
    strategies = {
        constants.STRATEGY_TIES: ties_merge,
        constants.STRATEGY_DARE_TIES: dare_ties_merge,
        constants.STRATEGY_TASK_ARITHMETIC: task_arithmetic_merge,
        constants.STRATEGY_DARE_SOUP: dare_soup_merge,
    }
    return strategies[recipe.strategy](base, cps, recipe, threads)
