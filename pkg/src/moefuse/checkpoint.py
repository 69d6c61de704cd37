"""On-disk checkpoint format: a JSON manifest plus one raw tensor blob.

A checkpoint directory holds exactly two files:

* ``manifest.json`` -- UTF-8 JSON with stable key order describing the model
  kind, architecture, optional MoE metadata, and the tensor table.
* ``tensors.bin`` -- the tensors' float32 little-endian payloads, row-major,
  concatenated in manifest order with no header or padding.

Saving the same checkpoint twice produces byte-identical files, so composed
models can be diffed and checksummed. See docs/checkpoint-format.md for the
field-by-field reference.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointIOError, FormatError, InvariantViolation, ShapeError
from .tensor import Tensor

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "tensors.bin"
MODEL_KINDS = ("dense", "traditional", "btx", "bts")

_EXPERT_NAME_RE = re.compile(r"(?:^|\.)experts\.expert_(\d+)(?:\.|$)")
_STITCH_EXPERT_RE = re.compile(r"^stitch\.\d+\.expert_(\d+)(?:\.|$)")


@dataclass(frozen=True)
class ArchInfo:
    """Backbone dimensions shared by every block of a model."""

    vocab_size: int
    d_model: int
    n_blocks: int
    n_heads: int
    d_ff: int

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_blocks": self.n_blocks,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchInfo":
        try:
            return cls(
                vocab_size=int(d["vocab_size"]),
                d_model=int(d["d_model"]),
                n_blocks=int(d["n_blocks"]),
                n_heads=int(d["n_heads"]),
                d_ff=int(d["d_ff"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad arch section: {exc}") from exc


@dataclass(frozen=True)
class MoeInfo:
    """MoE metadata echoed into composed manifests so checkpoints self-describe."""

    num_experts: int
    num_experts_per_tok: int
    router_layers: tuple[str, ...]
    router_layers_index: tuple[int, ...]
    alpha: float
    expert_names: tuple[str, ...]
    stitch_freq: int | None = None
    expert_arch: tuple[ArchInfo, ...] | None = None

    def to_dict(self) -> dict:
        d = {
            "num_experts": self.num_experts,
            "num_experts_per_tok": self.num_experts_per_tok,
            "router_layers": list(self.router_layers),
            "router_layers_index": list(self.router_layers_index),
            "alpha": self.alpha,
            "expert_names": list(self.expert_names),
            "stitch_freq": self.stitch_freq,
        }
        if self.expert_arch is not None:
            d["expert_arch"] = [a.to_dict() for a in self.expert_arch]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MoeInfo":
        try:
            expert_arch = None
            if d.get("expert_arch") is not None:
                expert_arch = tuple(ArchInfo.from_dict(a) for a in d["expert_arch"])
            stitch_freq = d.get("stitch_freq")
            return cls(
                num_experts=int(d["num_experts"]),
                num_experts_per_tok=int(d["num_experts_per_tok"]),
                router_layers=tuple(str(s) for s in d["router_layers"]),
                router_layers_index=tuple(int(i) for i in d["router_layers_index"]),
                alpha=float(d["alpha"]),
                expert_names=tuple(str(s) for s in d["expert_names"]),
                stitch_freq=None if stitch_freq is None else int(stitch_freq),
                expert_arch=expert_arch,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad moe section: {exc}") from exc


@dataclass(frozen=True)
class TensorEntry:
    name: str
    shape: tuple[int, ...]
    byte_offset: int
    dtype: str = "f32"

    @property
    def nbytes(self) -> int:
        return 4 * int(np.prod(self.shape))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "shape": list(self.shape),
            "dtype": self.dtype,
            "byte_offset": self.byte_offset,
        }


@dataclass(frozen=True)
class Manifest:
    model_kind: str
    arch: ArchInfo
    tensors: tuple[TensorEntry, ...]
    moe: MoeInfo | None = None
    model_type: str | None = None
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "model_kind": self.model_kind,
            "model_type": self.model_type,
            "arch": self.arch.to_dict(),
            "moe": None if self.moe is None else self.moe.to_dict(),
            "tensors": [t.to_dict() for t in self.tensors],
        }

    def validate(self) -> None:
        if self.model_kind not in MODEL_KINDS:
            raise InvariantViolation(f"unknown model_kind {self.model_kind!r}")
        names = [t.name for t in self.tensors]
        if names != sorted(names):
            raise InvariantViolation("tensor entries are not sorted by name")
        if len(set(names)) != len(names):
            raise InvariantViolation("duplicate tensor names in manifest")
        offset = 0
        for entry in self.tensors:
            if any(s <= 0 for s in entry.shape):
                raise InvariantViolation(f"{entry.name}: non-positive dim in {entry.shape}")
            if entry.dtype != "f32":
                raise InvariantViolation(f"{entry.name}: unsupported dtype {entry.dtype}")
            if entry.byte_offset != offset:
                raise InvariantViolation(
                    f"{entry.name}: offset {entry.byte_offset}, expected {offset}"
                )
            offset += entry.nbytes
        if self.moe is not None:
            for name in names:
                for pat in (_EXPERT_NAME_RE, _STITCH_EXPERT_RE):
                    m = pat.search(name)
                    if m and int(m.group(1)) >= self.moe.num_experts:
                        raise InvariantViolation(
                            f"{name}: expert index out of range (num_experts="
                            f"{self.moe.num_experts})"
                        )

    @property
    def total_bytes(self) -> int:
        if not self.tensors:
            return 0
        last = self.tensors[-1]
        return last.byte_offset + last.nbytes


@dataclass(frozen=True)
class Checkpoint:
    manifest: Manifest
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def validate(self) -> None:
        self.manifest.validate()
        entry_names = {t.name for t in self.manifest.tensors}
        if entry_names != set(self.tensors):
            missing = entry_names - set(self.tensors)
            extra = set(self.tensors) - entry_names
            raise InvariantViolation(f"manifest/tensor drift: missing={missing} extra={extra}")
        for entry in self.manifest.tensors:
            got = self.tensors[entry.name].shape
            if got != entry.shape:
                raise InvariantViolation(f"{entry.name}: shape {got} != manifest {entry.shape}")


def build_checkpoint(model_kind: str, arch: ArchInfo, tensors: dict[str, Tensor],
                     moe: MoeInfo | None = None, model_type: str | None = None) -> Checkpoint:
    """Assemble a checkpoint with a freshly computed (sorted, contiguous) manifest."""
    entries = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name]
        entry = TensorEntry(name=name, shape=t.shape, byte_offset=offset)
        entries.append(entry)
        offset += entry.nbytes
    manifest = Manifest(model_kind=model_kind, arch=arch, tensors=tuple(entries),
                        moe=moe, model_type=model_type)
    ckpt = Checkpoint(manifest=manifest, tensors=dict(tensors))
    ckpt.validate()
    return ckpt


def manifest_from_dict(d: dict) -> Manifest:
    try:
        version = int(d["format_version"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError("manifest missing format_version") from exc
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {version}, expected {FORMAT_VERSION}")
    kind = d.get("model_kind")
    if kind not in MODEL_KINDS:
        raise FormatError(f"unknown model_kind {kind!r}")
    try:
        entries = tuple(
            TensorEntry(
                name=str(e["name"]),
                shape=tuple(int(s) for s in e["shape"]),
                byte_offset=int(e["byte_offset"]),
                dtype=str(e.get("dtype", "f32")),
            )
            for e in d["tensors"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad tensor table: {exc}") from exc
    moe = None if d.get("moe") is None else MoeInfo.from_dict(d["moe"])
    manifest = Manifest(
        model_kind=kind,
        arch=ArchInfo.from_dict(d.get("arch", {})),
        tensors=entries,
        moe=moe,
        model_type=d.get("model_type"),
        format_version=version,
    )
    try:
        manifest.validate()
    except InvariantViolation as exc:
        raise FormatError(str(exc)) from exc
    return manifest


def manifest_json(manifest: Manifest) -> str:
    return json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n"


def save(ckpt: Checkpoint, directory) -> None:
    """Write manifest.json and tensors.bin; re-saving is byte-identical."""
    ckpt.validate()
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / MANIFEST_NAME).write_text(manifest_json(ckpt.manifest), encoding="utf-8")
        with open(directory / BLOB_NAME, "wb") as fh:
            for entry in ckpt.manifest.tensors:
                arr = ckpt.tensors[entry.name].data
                fh.write(arr.astype("<f4").tobytes(order="C"))
    except OSError as exc:
        raise CheckpointIOError(f"saving to {directory}: {exc}") from exc


def load(directory) -> Checkpoint:
    """Inverse of save; f32 payloads widen to f64 tensors."""
    directory = Path(directory)
    try:
        raw = (directory / MANIFEST_NAME).read_text(encoding="utf-8")
        blob = (directory / BLOB_NAME).read_bytes()
    except OSError as exc:
        raise CheckpointIOError(f"loading from {directory}: {exc}") from exc
    try:
        parsed = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    manifest = manifest_from_dict(parsed)
    if len(blob) != manifest.total_bytes:
        raise ShapeError(f"blob is {len(blob)} bytes, manifest declares {manifest.total_bytes}")
    tensors = {}
    for entry in manifest.tensors:
        flat = np.frombuffer(blob, dtype="<f4", count=entry.nbytes // 4,
                             offset=entry.byte_offset)
        arr = flat.astype(np.float64).reshape(entry.shape)
        tensors[entry.name] = Tensor._wrap(arr, name=entry.name)
    ckpt = Checkpoint(manifest=manifest, tensors=tensors)
    ckpt.validate()
    return ckpt
