"""
HM3 output-layer expansion.

Every classifier head is padded with zero columns (and zero bias entries) into
one shared layout of width K = sum of all label counts, and the base model's
head is replaced by zeros of the same width. Afterwards all checkpoints have
identical shapes and can be merged with any weight-space strategy; the merged
head is read segment by segment.
"""

import re
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np

import constants
from checkpoint_store import Checkpoint, compatible_for_merge
from errors import InvariantError, StructuralError
from utils import read_json, write_json

logger = logging.getLogger(__name__)

# "label0", "LABEL_1", "Label-2" and empty labels carry no meaning
UNINFORMATIVE_LABEL = re.compile(r"^label[_\-\s]?\d+$", re.IGNORECASE)


@dataclass(frozen=True)
class Segment:
    model_id: str
    labels: Tuple[str, ...]
    offset: int

    @property
    def width(self) -> int:
        return len(self.labels)

    @property
    def end(self) -> int:
        return self.offset + self.width

    def to_dict(self) -> Dict[str, Any]:
        return {"model_id": self.model_id, "labels": list(self.labels), "offset": self.offset}


@dataclass(frozen=True)
class SegmentLayout:
    segments: Tuple[Segment, ...]

    @property
    def total_width(self) -> int:
        return sum(s.width for s in self.segments)

    @property
    def labels(self) -> List[str]:
        return [label for s in self.segments for label in s.labels]

    @property
    def model_ids(self) -> List[str]:
        return [s.model_id for s in self.segments]

    def segment(self, model_id: str) -> Segment:
        for s in self.segments:
            if s.model_id == model_id:
                return s
        raise StructuralError("unknown_model_id", model_id=model_id)

    def to_manifest(self) -> List[Dict[str, Any]]:
        return [s.to_dict() for s in self.segments]

    def to_dict(self) -> Dict[str, Any]:
        return {"segments": self.to_manifest(), "total_width": self.total_width}

    @classmethod
    def from_manifest(cls, entries: List[Dict[str, Any]]) -> "SegmentLayout":
        segments = tuple(
            Segment(model_id=e["model_id"], labels=tuple(e["labels"]), offset=int(e["offset"]))
            for e in entries
        )
        layout = cls(segments)
        _validate_tiling(layout)
        return layout


def _validate_tiling(layout: SegmentLayout) -> None:
    if not layout.segments:
        raise StructuralError("too_few_models", minimum=1, count=0)
    expected_offset = 0
    for s in layout.segments:
        if s.width == 0 or s.offset != expected_offset:
            raise StructuralError("bad_tiling", model_id=s.model_id, width=s.width, actual=s.offset,
                                  expected=expected_offset)
        expected_offset = s.end
    ids = Counter(layout.model_ids)
    for model_id, count in ids.items():
        if count > 1:
            raise StructuralError("duplicate_model_id", model_id=model_id)
    duplicates = sorted(label for label, count in Counter(layout.labels).items() if count > 1)
    if duplicates:
        raise StructuralError("duplicate_labels", labels=duplicates)


def sanitize_labels(models: Sequence[Tuple[str, Sequence[str]]]) -> List[List[str]]:
    """
    Replace uninformative labels with "<model_id>:class<i>" and prefix every
    label that appears in more than one model with its model id.
    """
    renamed = []
    for model_id, labels in models:
        renamed.append([
            f"{model_id}:class{i}" if not label or UNINFORMATIVE_LABEL.match(label) else label
            for i, label in enumerate(labels)
        ])

    # Count each label once per model
    occurrences = Counter(label for labels in renamed for label in set(labels))
    sanitized = []
    for (model_id, _), labels in zip(models, renamed):
        sanitized.append([
            f"{model_id}:{label}" if occurrences[label] > 1 else label
            for label in labels
        ])
        changed = [old for old, new in zip(labels, sanitized[-1]) if old != new]
        if changed:
            logger.info(f"Renamed labels of '{model_id}' to keep the merged label space unique: {changed}")
    return sanitized


def build_layout(models: Sequence[Tuple[str, Sequence[str]]]) -> SegmentLayout:
    """Segment i starts at the sum of the widths before it, in input order."""
    segments = []
    offset = 0
    for model_id, labels in models:
        if not labels:
            raise StructuralError("too_few_models", minimum=1, count=0)
        segments.append(Segment(model_id=model_id, labels=tuple(labels), offset=offset))
        offset += len(labels)
    layout = SegmentLayout(tuple(segments))
    _validate_tiling(layout)
    return layout


def expand_head(cp: Checkpoint, layout: SegmentLayout, model_id: str) -> Checkpoint:
    """Copy the model's head into its segment's columns; every other column is zero."""
    if cp.role != constants.ROLE_FINE_TUNED:
        raise InvariantError("bad_role", expected=constants.ROLE_FINE_TUNED, actual=cp.role)
    segment = layout.segment(model_id)
    width = cp.tensors[constants.HEAD_BIAS].shape[0]
    if width != segment.width:
        raise StructuralError("segment_width", actual=width, expected=segment.width, model_id=model_id)

    total = layout.total_width
    head_weight = np.zeros((cp.arch.hidden_dim, total), dtype=np.float32)
    head_bias = np.zeros(total, dtype=np.float32)
    head_weight[:, segment.offset:segment.end] = cp.tensors[constants.HEAD_WEIGHT]
    head_bias[segment.offset:segment.end] = cp.tensors[constants.HEAD_BIAS]

    tensors = {name: t.copy() for name, t in cp.non_head_tensors().items()}
    tensors[constants.HEAD_WEIGHT] = head_weight
    tensors[constants.HEAD_BIAS] = head_bias
    return Checkpoint(
        arch=cp.arch.with_head_width(total),
        tensors=tensors,
        label_space=layout.labels,
        role=constants.ROLE_EXPANDED,
        layout=layout.to_manifest(),
        metadata={"source_model_id": model_id},
    ).validate()


def make_base(base: Checkpoint, layout: SegmentLayout) -> Checkpoint:
    """Discard the base head and replace it with zeros of the layout's width."""
    if base.role not in (constants.ROLE_BASE, constants.ROLE_EXPANDED):
        raise InvariantError("bad_role", expected=constants.ROLE_BASE, actual=base.role)

    total = layout.total_width
    tensors = {name: t.copy() for name, t in base.non_head_tensors().items()}
    tensors[constants.HEAD_WEIGHT] = np.zeros((base.arch.hidden_dim, total), dtype=np.float32)
    tensors[constants.HEAD_BIAS] = np.zeros(total, dtype=np.float32)
    return Checkpoint(
        arch=base.arch.with_head_width(total),
        tensors=tensors,
        label_space=layout.labels,
        role=constants.ROLE_EXPANDED,
        layout=layout.to_manifest(),
        metadata={"source_model_id": "base"},
    ).validate()


def transform(models: Sequence[Tuple[str, Checkpoint]], base: Checkpoint = None):
    """
    The whole expansion in one call: sanitize labels, build the layout, expand every
    head and zero the base head. Returns (expanded models, expanded base, layout);
    the expanded base is None when no base is given.
    """
    ids = [model_id for model_id, _ in models]
    duplicates = sorted(i for i, c in Counter(ids).items() if c > 1)
    if duplicates:
        raise StructuralError("duplicate_model_id", model_id=duplicates[0])

    checkpoints = [cp for _, cp in models] + ([base] if base is not None else [])
    if len(checkpoints) >= 2:
        ok, diagnostics = compatible_for_merge(checkpoints)
        if not ok:
            raise StructuralError("incompatible", diagnostics="; ".join(diagnostics))

    sanitized = sanitize_labels([(model_id, cp.label_space) for model_id, cp in models])
    layout = build_layout(list(zip(ids, sanitized)))
    expanded = [expand_head(cp, layout, model_id) for model_id, cp in models]
    expanded_base = make_base(base, layout) if base is not None else None
    logger.info(f"HM3 layout: {len(layout.segments)} segments, total width {layout.total_width}")
    return expanded, expanded_base, layout


def layout_of(cp: Checkpoint, default_model_id: str = "model") -> SegmentLayout:
    """The checkpoint's own layout, or a single segment covering its head."""
    if cp.layout:
        return SegmentLayout.from_manifest(cp.layout)
    return build_layout([(default_model_id, cp.label_space)])


def save_layout(layout: SegmentLayout, path: Union[str, Path]) -> None:
    write_json(layout.to_dict(), path)


def load_layout(path: Union[str, Path]) -> SegmentLayout:
    data = read_json(path)
    layout = SegmentLayout.from_manifest(data["segments"])
    if int(data.get("total_width", layout.total_width)) != layout.total_width:
        raise StructuralError("layout_width", declared=data["total_width"], actual=layout.total_width)
    return layout
