"""
Dense tensor helpers every merge strategy is built from.

Tensors are plain numpy arrays. Stored weights are float32; accumulations
(sums, means, task vectors) run in float64 and are rounded back when a
checkpoint is assembled.
"""

import math
import logging
from typing import List, Optional, Sequence

import numpy as np

from errors import StructuralError, InvariantError

logger = logging.getLogger(__name__)

STORAGE_DTYPE = np.float32
ACCUMULATOR_DTYPE = np.float64


class TieBudget:
    """Mutable counter of how many values equal to the threshold may still survive."""

    def __init__(self, remaining: Optional[int] = None):
        # None means unlimited
        self.remaining = remaining

    def take(self, available: int) -> int:
        if self.remaining is None:
            return available
        granted = min(available, self.remaining)
        self.remaining -= granted
        return granted


def as_tensor(values, shape: Optional[Sequence[int]] = None) -> np.ndarray:
    """Build a float32 tensor, checking data length against the shape."""
    data = np.asarray(values, dtype=STORAGE_DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape) or data.size != math.prod(shape):
            raise StructuralError("shape_mismatch", left=list(data.shape), right=list(shape))
        data = data.reshape(shape)
    _check_finite(data)
    return data


def _check_finite(tensor: np.ndarray) -> None:
    if not np.all(np.isfinite(tensor)):
        raise InvariantError("non_finite_result")


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise StructuralError("shape_mismatch", left=list(a.shape), right=list(b.shape))


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same_shape(a, b)
    result = np.add(a, b, dtype=np.result_type(a, b))
    _check_finite(result)
    return result


def subtract(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same_shape(a, b)
    result = np.subtract(a, b, dtype=np.result_type(a, b))
    _check_finite(result)
    return result


def scale(a: np.ndarray, s: float) -> np.ndarray:
    if not math.isfinite(s):
        raise InvariantError("non_finite_scalar", value=s)
    result = (a * a.dtype.type(s)).astype(a.dtype, copy=False)
    _check_finite(result)
    return result


def keep_count(total: int, keep_fraction: float) -> int:
    """ceil(keep_fraction * total), guarded against float noise such as 0.1 * 30."""
    return max(1, math.ceil(round(keep_fraction * total, 9)))


def global_magnitude_threshold(tensors: List[np.ndarray], keep_fraction: float) -> float:
    """
    Magnitude threshold that keeps exactly ceil(keep_fraction * total) values
    across all tensors, once ties at the threshold are resolved in flat
    iteration order (see tie_budget_for).
    """
    if not tensors or sum(t.size for t in tensors) == 0:
        raise StructuralError("empty_tensor_list")
    if not 0.0 < keep_fraction <= 1.0:
        raise InvariantError("invalid_keep_fraction", value=keep_fraction)

    magnitudes = np.concatenate([np.abs(np.asarray(t, dtype=ACCUMULATOR_DTYPE)).ravel() for t in tensors])
    k = keep_count(magnitudes.size, keep_fraction)
    # k-th largest magnitude
    return float(np.partition(magnitudes, magnitudes.size - k)[magnitudes.size - k])


def tie_budget_for(tensors: List[np.ndarray], keep_fraction: float, threshold: float) -> TieBudget:
    """How many values equal to the threshold survive so the kept count is exact."""
    total = sum(t.size for t in tensors)
    above = sum(int(np.count_nonzero(np.abs(t) > threshold)) for t in tensors)
    return TieBudget(keep_count(total, keep_fraction) - above)


def trim(tensor: np.ndarray, threshold: float, tie_budget: Optional[TieBudget] = None) -> np.ndarray:
    """
    Zero values whose magnitude is below threshold. Values exactly at the
    threshold survive while the tie budget lasts, earliest flat index first.
    """
    if threshold < 0:
        raise InvariantError("invalid_threshold", value=threshold)
    budget = tie_budget if tie_budget is not None else TieBudget()

    flat = tensor.ravel()
    magnitudes = np.abs(flat)
    keep = magnitudes > threshold
    ties = np.flatnonzero(magnitudes == threshold)
    keep[ties[:budget.take(ties.size)]] = True

    trimmed = np.where(keep, flat, flat.dtype.type(0))
    return trimmed.reshape(tensor.shape)


def trim_top_fraction(tensors: List[np.ndarray], keep_fraction: float) -> List[np.ndarray]:
    """Keep the top keep_fraction of values by magnitude across the whole list."""
    if keep_fraction >= 1.0:
        return [t.copy() for t in tensors]
    threshold = global_magnitude_threshold(tensors, keep_fraction)
    budget = tie_budget_for(tensors, keep_fraction, threshold)
    return [trim(t, threshold, budget) for t in tensors]
