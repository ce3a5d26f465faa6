"""
Checkpoint value types and their bit-exact file format.

Layout on disk:
    bytes 0-7     unsigned 64-bit little-endian manifest length n
    bytes 8..8+n  UTF-8 JSON manifest (arch, labels, role, tensors, optional
                  layout/recipe/metadata); tensor offsets are relative to the
                  payload start
    remainder     raw little-endian float32 data
"""

import json
import math
import struct
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

import constants
import tensor_core
from errors import (
    InvariantError,
    MalformedHeaderError,
    ManifestMismatchError,
    OverlappingExtentsError,
    TruncatedPayloadError,
    UnknownFamilyError,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ArchDescriptor:
    family: str
    vocab_size: int
    embed_dim: int
    hidden_dim: int
    head_out_dim: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "family": self.family,
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "head_out_dim": self.head_out_dim,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ArchDescriptor":
        family = data.get("family")
        if family not in constants.KNOWN_FAMILIES:
            raise UnknownFamilyError("unknown_family", family=family)
        try:
            dims = {key: int(data[key]) for key in ("vocab_size", "embed_dim", "hidden_dim", "head_out_dim")}
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedHeaderError("malformed_header", detail=f"bad arch block: {e}")
        return cls(family=family, **dims)

    def with_head_width(self, width: int) -> "ArchDescriptor":
        return ArchDescriptor(self.family, self.vocab_size, self.embed_dim, self.hidden_dim, width)

    def expected_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {
            constants.EMBED_WEIGHT: (self.vocab_size, self.embed_dim),
            constants.DENSE_WEIGHT: (self.embed_dim, self.hidden_dim),
            constants.DENSE_BIAS: (self.hidden_dim,),
            constants.HEAD_WEIGHT: (self.hidden_dim, self.head_out_dim),
            constants.HEAD_BIAS: (self.head_out_dim,),
        }


@dataclass
class Checkpoint:
    arch: ArchDescriptor
    tensors: Dict[str, np.ndarray]
    label_space: List[str]
    role: str
    # Expanded and merged checkpoints describe their segments here
    layout: Optional[List[Dict[str, Any]]] = None
    # Merged checkpoints embed the recipe that produced them
    recipe: Optional[Dict[str, Any]] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def validate(self) -> "Checkpoint":
        validate_checkpoint(self)
        return self

    def non_head_tensors(self) -> Dict[str, np.ndarray]:
        return {name: t for name, t in self.tensors.items() if name not in constants.HEAD_TENSORS}


def validate_label_space(labels: List[str]) -> None:
    if any(not isinstance(label, str) or not label for label in labels):
        raise InvariantError("empty_label")
    duplicates = sorted({label for label in labels if labels.count(label) > 1})
    if duplicates:
        raise InvariantError("duplicate_labels", labels=duplicates)


def validate_checkpoint(cp: Checkpoint) -> None:
    """Check the tiny_text_v1 invariants: labels, role, tensor names and shapes."""
    if cp.arch.family not in constants.KNOWN_FAMILIES:
        raise UnknownFamilyError("unknown_family", family=cp.arch.family)
    if cp.role not in constants.ROLES:
        raise InvariantError("unknown_role", role=cp.role)
    validate_label_space(cp.label_space)
    if cp.arch.head_out_dim != len(cp.label_space):
        raise InvariantError("head_width", head_out_dim=cp.arch.head_out_dim, labels=len(cp.label_space))

    expected = cp.arch.expected_shapes()
    for name in expected:
        if name not in cp.tensors:
            raise InvariantError("missing_tensor", name=name)
    for name, tensor in cp.tensors.items():
        if name not in expected:
            raise InvariantError("unexpected_tensor", name=name)
        if tuple(tensor.shape) != expected[name]:
            raise InvariantError("tensor_shape", name=name, actual=list(tensor.shape), expected=list(expected[name]))
        if tensor.dtype != np.float32:
            raise InvariantError("tensor_shape", name=name, actual=str(tensor.dtype), expected="float32")
        if not np.all(np.isfinite(tensor)):
            raise InvariantError("non_finite_result")


def _manifest(cp: Checkpoint) -> Tuple[Dict[str, Any], List[bytes]]:
    entries = []
    chunks = []
    offset = 0
    # Required-name order keeps files byte-stable
    for name in constants.REQUIRED_TENSORS:
        data = cp.tensors[name].astype("<f4", copy=False).tobytes()
        entries.append({
            "name": name,
            "shape": list(cp.tensors[name].shape),
            "dtype": constants.DTYPE_F32,
            "offset": offset,
            "nbytes": len(data),
        })
        chunks.append(data)
        offset += len(data)

    manifest: Dict[str, Any] = {
        "arch": cp.arch.to_dict(),
        "labels": list(cp.label_space),
        "role": cp.role,
        "tensors": entries,
    }
    if cp.layout is not None:
        manifest["layout"] = cp.layout
    if cp.recipe is not None:
        manifest["recipe"] = cp.recipe
    if cp.metadata:
        manifest["metadata"] = cp.metadata
    return manifest, chunks


def save(cp: Checkpoint, path: PathLike) -> None:
    validate_checkpoint(cp)
    manifest, chunks = _manifest(cp)
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")

    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for chunk in chunks:
            f.write(chunk)
    logger.debug(f"Saved {cp.role} checkpoint with {len(cp.label_space)} labels to {path}")


def _parse_manifest(raw: bytes) -> Dict[str, Any]:
    if len(raw) < constants.MANIFEST_LENGTH_BYTES:
        raise MalformedHeaderError("malformed_header", detail="file shorter than the length prefix")
    (length,) = struct.unpack("<Q", raw[:constants.MANIFEST_LENGTH_BYTES])
    end = constants.MANIFEST_LENGTH_BYTES + length
    if end > len(raw):
        raise MalformedHeaderError("malformed_header", detail=f"manifest length {length} exceeds file size")
    try:
        manifest = json.loads(raw[constants.MANIFEST_LENGTH_BYTES:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedHeaderError("malformed_header", detail=str(e))
    if not isinstance(manifest, dict) or not all(k in manifest for k in ("arch", "labels", "role", "tensors")):
        raise MalformedHeaderError("malformed_header", detail="manifest lacks arch/labels/role/tensors")
    return manifest


def _check_extents(entries: List[Dict[str, Any]], payload_size: int) -> None:
    for entry in entries:
        try:
            name = str(entry["name"])
            shape = [int(s) for s in entry["shape"]]
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedHeaderError("malformed_header", detail=f"bad tensor entry: {e}")
        if entry.get("dtype") != constants.DTYPE_F32:
            raise MalformedHeaderError("malformed_header", detail=f"unsupported dtype {entry.get('dtype')!r}")
        if offset < 0 or nbytes < 0:
            raise MalformedHeaderError("malformed_header", detail=f"negative extent for {name}")
        if nbytes != math.prod(shape) * constants.BYTES_PER_F32:
            raise ManifestMismatchError(
                "manifest_mismatch",
                detail=f"{name} declares {nbytes} bytes for shape {shape}",
            )

    ordered = sorted(entries, key=lambda e: int(e["offset"]))
    for first, second in zip(ordered, ordered[1:]):
        if int(first["offset"]) + int(first["nbytes"]) > int(second["offset"]):
            raise OverlappingExtentsError("overlapping_extents", first=first["name"], second=second["name"])

    needed = max((int(e["offset"]) + int(e["nbytes"]) for e in entries), default=0)
    if needed > payload_size:
        raise TruncatedPayloadError("truncated_payload", detail=f"need {needed} bytes, found {payload_size}")
    declared = sum(int(e["nbytes"]) for e in entries)
    if declared != payload_size:
        raise ManifestMismatchError(
            "manifest_mismatch",
            detail=f"manifest declares {declared} bytes, payload holds {payload_size}",
        )


def load(path: PathLike) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()

    manifest = _parse_manifest(raw)
    arch = ArchDescriptor.from_dict(manifest["arch"])
    payload_start = constants.MANIFEST_LENGTH_BYTES + struct.unpack("<Q", raw[:8])[0]
    payload = memoryview(raw)[payload_start:]

    entries = manifest["tensors"]
    if not isinstance(entries, list):
        raise MalformedHeaderError("malformed_header", detail="tensors must be a list")
    _check_extents(entries, len(payload))

    tensors = {}
    for entry in entries:
        start = int(entry["offset"])
        data = np.frombuffer(payload[start:start + int(entry["nbytes"])], dtype="<f4")
        tensors[entry["name"]] = tensor_core.as_tensor(data.astype(np.float32), entry["shape"])

    cp = Checkpoint(
        arch=arch,
        tensors=tensors,
        label_space=list(manifest["labels"]),
        role=manifest["role"],
        layout=manifest.get("layout"),
        recipe=manifest.get("recipe"),
        metadata=manifest.get("metadata", {}),
    )
    validate_checkpoint(cp)
    logger.debug(f"Loaded {cp.role} checkpoint from {path}")
    return cp


def compatible_for_merge(cps: List[Checkpoint]) -> Tuple[bool, List[str]]:
    """All arch fields except head_out_dim and all non-head shapes must agree."""
    diagnostics = []
    if len(cps) < 2:
        diagnostics.append(f"need at least 2 checkpoints, got {len(cps)}")
        return False, diagnostics

    reference = cps[0]
    for index, cp in enumerate(cps[1:], start=1):
        for attr in ("family", "vocab_size", "embed_dim", "hidden_dim"):
            left, right = getattr(reference.arch, attr), getattr(cp.arch, attr)
            if left != right:
                diagnostics.append(f"checkpoint {index}: {attr} {right} differs from {left}")
        for name, tensor in reference.non_head_tensors().items():
            other = cp.tensors.get(name)
            if other is None:
                diagnostics.append(f"checkpoint {index}: missing tensor {name}")
            elif other.shape != tensor.shape:
                diagnostics.append(
                    f"checkpoint {index}: {name} shape {list(other.shape)} differs from {list(tensor.shape)}"
                )
    return not diagnostics, diagnostics
