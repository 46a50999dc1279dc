"""Persistence and validation of embedding sets, labels and manifests.

This is the boundary between external model outputs and the engine: every
load validates invariants (sorted unique ids, finite values, declared
dimension) and every write round-trips bit-exactly.

EMB1 binary format (little-endian regardless of host):
    bytes 0-3   magic ASCII "EMB1"
    bytes 4-5   version u16 = 1
    bytes 6-9   dim u32
    bytes 10-17 count u64
    then ``count`` records of [id u64][dim x f32], sorted by id ascending.

Label TSV: no header, ``image_id<TAB>landmark_id``, UTF-8, LF endings.
"""

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    BadVersion,
    DimMismatch,
    DuplicateId,
    IdMismatch,
    InvariantViolation,
    NonFinite,
    ParseError,
    Truncated,
    ZeroNorm,
)

EMB1_MAGIC = b"EMB1"
EMB1_VERSION = 1
_HEADER = struct.Struct("<4sHIQ")  # magic, version, dim, count

_U64_MAX = 2**64 - 1
_U32_MAX = 2**32 - 1


def atomic_write_bytes(path, data: bytes):
    """Write via a temp file in the target directory, then rename.

    A failed write never leaves a partial output file behind.
    """
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


@dataclass(frozen=True)
class EmbeddingSet:
    """Ordered (image id, vector) collection with a declared dimension.

    ids are unique uint64 sorted ascending; matrix rows are float32 and
    finite, one per id.
    """

    dim: int
    ids: np.ndarray
    matrix: np.ndarray

    def __post_init__(self):
        ids = np.ascontiguousarray(self.ids, dtype=np.uint64)
        matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.dim < 1:
            raise InvariantViolation(f"dim must be positive, got {self.dim}")
        if matrix.ndim != 2 or matrix.shape != (len(ids), self.dim):
            raise InvariantViolation(
                f"matrix shape {matrix.shape} does not match "
                f"({len(ids)}, {self.dim})"
            )
        if len(ids) > 1:
            if np.any(ids[1:] == ids[:-1]):
                dup = int(ids[1:][ids[1:] == ids[:-1]][0])
                raise InvariantViolation(f"duplicate image id {dup}")
            if np.any(ids[1:] < ids[:-1]):
                raise InvariantViolation("image ids are not sorted ascending")
        if matrix.size and not np.all(np.isfinite(matrix)):
            raise NonFinite("embedding matrix contains NaN or Inf")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "matrix", matrix)

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_rows(cls, dim, id_vector_pairs) -> "EmbeddingSet":
        """Build from unsorted (id, vector) pairs; duplicate ids rejected."""
        pairs = sorted(id_vector_pairs, key=lambda item: item[0])
        ids = np.array([p[0] for p in pairs], dtype=np.uint64)
        matrix = (
            np.array([p[1] for p in pairs], dtype=np.float32)
            if pairs
            else np.empty((0, dim), dtype=np.float32)
        )
        return cls(dim=dim, ids=ids, matrix=matrix)

    def row_index(self) -> dict:
        return {int(i): pos for pos, i in enumerate(self.ids)}


def write_embeddings(emb_set: EmbeddingSet, path):
    """Serialize an EmbeddingSet to the EMB1 binary format."""
    header = _HEADER.pack(EMB1_MAGIC, EMB1_VERSION, emb_set.dim, len(emb_set))
    record = np.dtype([("id", "<u8"), ("vec", "<f4", (emb_set.dim,))])
    records = np.empty(len(emb_set), dtype=record)
    records["id"] = emb_set.ids
    records["vec"] = emb_set.matrix
    atomic_write_bytes(path, header + records.tobytes())


def read_embeddings(path) -> EmbeddingSet:
    """Load and validate an EMB1 file.

    Wrong magic, wrong version, size mismatches and non-finite payloads
    each raise their own error class; a partially populated set is never
    returned.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) >= 4 and data[:4] != EMB1_MAGIC:
        raise BadMagic(f"{path}: bad magic {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise Truncated(f"{path}: {len(data)} bytes is shorter than the 18-byte header")
    _, version, dim, count = _HEADER.unpack_from(data)
    if version != EMB1_VERSION:
        raise BadVersion(f"{path}: unsupported EMB1 version {version}")
    if dim < 1:
        raise InvariantViolation(f"{path}: non-positive dim {dim}")
    record = np.dtype([("id", "<u8"), ("vec", "<f4", (dim,))])
    expected = _HEADER.size + count * record.itemsize
    if len(data) != expected:
        raise Truncated(
            f"{path}: declared {count} records of dim {dim} imply "
            f"{expected} bytes, file has {len(data)}"
        )
    records = np.frombuffer(data, dtype=record, offset=_HEADER.size)
    ids = records["id"].astype(np.uint64)
    matrix = (
        np.ascontiguousarray(records["vec"], dtype=np.float32)
        if count
        else np.empty((0, dim), dtype=np.float32)
    )
    return EmbeddingSet(dim=int(dim), ids=ids, matrix=matrix)


@dataclass(frozen=True)
class LabelTable:
    """image id -> landmark id for index/training images.

    Absence from the table means the image is a non-landmark.
    """

    entries: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, image_id):
        return int(image_id) in self.entries

    def get(self, image_id):
        return self.entries.get(int(image_id))

    def class_counts(self) -> dict:
        counts = {}
        for landmark in self.entries.values():
            counts[landmark] = counts.get(landmark, 0) + 1
        return counts


def _parse_uint(token: str, limit: int, row: int, col: int, path) -> int:
    try:
        value = int(token)
    except ValueError:
        raise ParseError(
            f"{path}: row {row}, column {col}: {token!r} is not an integer"
        ) from None
    if not 0 <= value <= limit:
        raise ParseError(
            f"{path}: row {row}, column {col}: {value} out of range [0, {limit}]"
        )
    return value


def read_labels(path) -> LabelTable:
    entries = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise ParseError(f"{path}: row {row}: expected 2 columns, got {len(cols)}")
            image_id = _parse_uint(cols[0], _U64_MAX, row, 1, path)
            landmark_id = _parse_uint(cols[1], _U32_MAX, row, 2, path)
            if image_id in entries:
                raise DuplicateId(f"{path}: row {row}: duplicate image id {image_id}")
            entries[image_id] = landmark_id
    return LabelTable(entries=entries)


def write_labels(table: LabelTable, path):
    lines = [f"{image_id}\t{landmark}\n"
             for image_id, landmark in sorted(table.entries.items())]
    atomic_write_text(path, "".join(lines))


@dataclass(frozen=True)
class ClassCenterSet:
    """Per-landmark class centers of one classification model.

    The embedded "image ids" are landmark ids. Centers are re-normalized
    to unit length at load time.
    """

    model_name: str
    centers: EmbeddingSet

    @property
    def landmark_ids(self) -> np.ndarray:
        return self.centers.ids

    @property
    def matrix(self) -> np.ndarray:
        return self.centers.matrix


def load_class_centers(path, model_name: str) -> ClassCenterSet:
    raw = read_embeddings(path)
    norms = np.linalg.norm(raw.matrix.astype(np.float64), axis=1)
    if np.any(norms <= 1e-12):
        bad = int(raw.ids[int(np.argmin(norms))])
        raise ZeroNorm(f"{path}: class center {bad} has zero norm")
    matrix = (raw.matrix.astype(np.float64) / norms[:, np.newaxis]).astype(np.float32)
    normalized = EmbeddingSet(dim=raw.dim, ids=raw.ids, matrix=matrix)
    return ClassCenterSet(model_name=model_name, centers=normalized)


def align(per_model_sets) -> list:
    """Zip per-model embedding sets image-by-image for ensembling.

    All sets must contain exactly the same id sequence; returns a list of
    (image_id, [vector per model]) in id order.
    """
    if not per_model_sets:
        raise ValueError("align requires at least one embedding set")
    first = per_model_sets[0]
    for other in per_model_sets[1:]:
        if len(other) != len(first) or np.any(other.ids != first.ids):
            limit = min(len(first), len(other))
            for pos in range(limit):
                if first.ids[pos] != other.ids[pos]:
                    raise IdMismatch(
                        f"id sequences diverge at position {pos}: "
                        f"{int(first.ids[pos])} vs {int(other.ids[pos])}"
                    )
            raise IdMismatch(
                f"id sequences diverge at position {limit}: "
                f"{len(first)} vs {len(other)} ids"
            )
    return [
        (int(image_id), [s.matrix[pos] for s in per_model_sets])
        for pos, image_id in enumerate(first.ids)
    ]


@dataclass(frozen=True)
class Manifest:
    """Index of the engine's on-disk inputs.

    ``model_names`` orders the retrieval models for ensemble concatenation;
    ``classification_models`` may be a different list (the logit stages can
    use fewer or other models than retrieval). ``roles`` maps role keys to
    file paths relative to the manifest's directory: per-model roles use
    "<role>:<model>" keys (index/query/distractor/centers), plus "labels"
    and optionally "truth".
    """

    dim: int
    model_names: tuple
    classification_models: tuple
    roles: dict
    base_dir: Path = field(default=Path("."))

    def path(self, role: str) -> Path:
        if role not in self.roles:
            raise InvariantViolation(f"manifest has no role {role!r}")
        return self.base_dir / self.roles[role]

    def has_role(self, role: str) -> bool:
        return role in self.roles

    def load_embeddings(self, role: str) -> EmbeddingSet:
        emb_set = read_embeddings(self.path(role))
        if emb_set.dim != self.dim:
            raise DimMismatch(
                f"{self.roles[role]}: dim {emb_set.dim} does not match "
                f"manifest dim {self.dim}"
            )
        return emb_set

    def load_per_model(self, role: str) -> list:
        return [self.load_embeddings(f"{role}:{m}") for m in self.model_names]

    def load_centers(self, model: str) -> ClassCenterSet:
        path = self.path(f"centers:{model}")
        centers = load_class_centers(path, model)
        if centers.centers.dim != self.dim:
            raise DimMismatch(
                f"{path.name}: centers dim {centers.centers.dim} does not "
                f"match manifest dim {self.dim}"
            )
        return centers

    def load_labels(self) -> LabelTable:
        return read_labels(self.path("labels"))


def write_manifest(manifest: Manifest, path):
    doc = {
        "dim": manifest.dim,
        "model_names": list(manifest.model_names),
        "classification_models": list(manifest.classification_models),
        "roles": dict(manifest.roles),
    }
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON: {exc}") from None
    for key in ("dim", "model_names", "roles"):
        if key not in doc:
            raise ParseError(f"{path}: manifest is missing {key!r}")
    dim = int(doc["dim"])
    if dim < 1:
        raise InvariantViolation(f"{path}: non-positive dim {dim}")
    models = tuple(doc["model_names"])
    cls_models = tuple(doc.get("classification_models", doc["model_names"]))
    manifest = Manifest(
        dim=dim,
        model_names=models,
        classification_models=cls_models,
        roles=dict(doc["roles"]),
        base_dir=path.parent,
    )
    for role, rel in manifest.roles.items():
        target = manifest.base_dir / rel
        if not target.exists():
            raise InvariantViolation(f"{path}: role {role!r} points to missing file {rel}")
        if ":" in role:  # embedding roles declare their dim in the header
            with open(target, "rb") as fh:
                header = fh.read(_HEADER.size)
            if len(header) == _HEADER.size and header[:4] == EMB1_MAGIC:
                declared = _HEADER.unpack(header)[2]
                if declared != dim:
                    raise DimMismatch(
                        f"{path}: role {role!r} declares dim {declared}, "
                        f"manifest says {dim}"
                    )
    return manifest
