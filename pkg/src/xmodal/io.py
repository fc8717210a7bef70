"""File formats: word vectors, image feature tables, datasets, checkpoints.

All binary layouts are little-endian and fixed, so files are portable and
round-trips are bit-exact:

  feature file   magic "IMFT", u32 version=1, u32 count, u32 dim, then per
                 record u16 id length, id bytes (utf-8), dim x f32 values.
  checkpoint     u32 version=1, u32 tensor count, per tensor u16 name
                 length + utf-8 name, u8 rank, u32 extents, f64 values;
                 then u64 step, f64 lr, u32 batch_size, u8 phase.

Feature vectors are held as float32, the storage dtype, so that a table
written and read back compares bit-equal.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .text import Vocabulary

FEATURE_MAGIC = b"IMFT"
FEATURE_VERSION = 1
CHECKPOINT_VERSION = 1


class DataFormatError(ValueError):
    """Malformed input file."""


class FeatureTable:
    """Image id -> feature vector (float32, fixed dim, all finite)."""

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("feature dim must be >= 1")
        self.dim = int(dim)
        self.entries: dict[str, np.ndarray] = {}

    def add(self, image_id: str, vector) -> None:
        vec = np.asarray(vector, dtype=np.float32)
        if vec.shape != (self.dim,):
            raise DataFormatError(
                f"feature for {image_id!r} has shape {vec.shape}, want ({self.dim},)"
            )
        if not np.isfinite(vec).all():
            raise DataFormatError(f"feature for {image_id!r} has non-finite values")
        if image_id in self.entries:
            raise DataFormatError(f"duplicate image id {image_id!r}")
        self.entries[image_id] = vec

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.entries

    def __getitem__(self, image_id: str) -> np.ndarray:
        return self.entries[image_id]

    def ids(self) -> list[str]:
        return list(self.entries)

    def matrix(self, image_ids) -> np.ndarray:
        """Stack features for the given ids as float64 rows."""
        return np.stack([self.entries[i] for i in image_ids]).astype(np.float64)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureTable) or self.dim != other.dim:
            return NotImplemented if not isinstance(other, FeatureTable) else False
        return list(self.entries) == list(other.entries) and all(
            np.array_equal(self.entries[k], other.entries[k]) for k in self.entries
        )


def write_feature_file(table: FeatureTable, path) -> None:
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FEATURE_VERSION, len(table), table.dim))
        for image_id, vec in table.entries.items():
            idb = image_id.encode("utf-8")
            if len(idb) > 0xFFFF:
                raise DataFormatError(f"image id too long: {image_id[:32]!r}...")
            f.write(struct.pack("<H", len(idb)))
            f.write(idb)
            f.write(vec.astype("<f4").tobytes())


def read_feature_file(path) -> FeatureTable:
    with open(path, "rb") as f:
        blob = f.read()

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise DataFormatError(f"{path}: truncated {what} at offset {off}")
        out = blob[off : off + n]
        off += n
        return out

    off = 0
    if take(4, "magic") != FEATURE_MAGIC:
        raise DataFormatError(f"{path}: bad magic, not a feature file")
    version, count, dim = struct.unpack("<III", take(12, "header"))
    if version != FEATURE_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    if dim < 1:
        raise DataFormatError(f"{path}: invalid dim {dim}")
    table = FeatureTable(dim)
    for _ in range(count):
        (id_len,) = struct.unpack("<H", take(2, "id length"))
        image_id = take(id_len, "id").decode("utf-8")
        vec = np.frombuffer(take(4 * dim, f"record {image_id!r}"), dtype="<f4")
        table.add(image_id, vec)
    if off != len(blob):
        raise DataFormatError(
            f"{path}: {len(blob) - off} trailing bytes after {count} records"
        )
    return table


@dataclass
class DatasetRecord:
    id: str
    feature_ref: str
    captions: list[str]


def load_dataset(path, features: FeatureTable | None = None) -> list[DatasetRecord]:
    """Read JSONL records; feature_refs are validated when a table is given."""
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}:{lineno}: invalid json: {e}") from None
            for field in ("id", "feature_ref", "captions"):
                if field not in obj:
                    raise DataFormatError(f"{path}:{lineno}: missing field {field!r}")
            if not isinstance(obj["captions"], list) or not obj["captions"]:
                raise DataFormatError(f"{path}:{lineno}: captions must be non-empty")
            if not all(isinstance(c, str) for c in obj["captions"]):
                raise DataFormatError(f"{path}:{lineno}: captions must be strings")
            if features is not None and obj["feature_ref"] not in features:
                raise DataFormatError(
                    f"{path}:{lineno}: record {obj['id']!r} references unknown "
                    f"feature {obj['feature_ref']!r}"
                )
            records.append(DatasetRecord(obj["id"], obj["feature_ref"], list(obj["captions"])))
    return records


def save_dataset(records: list[DatasetRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(
                {"id": r.id, "feature_ref": r.feature_ref, "captions": r.captions}
            ) + "\n")


def load_word_vectors(path, vocab: Vocabulary, rng: np.random.Generator,
                      fallback_scale: float = 0.08) -> tuple[np.ndarray, float]:
    """Build a (d+1, dim) embedding matrix from a text word-vector file.

    Row 0 (padding) is zeros; vocabulary tokens found in the file get their
    vector verbatim, the rest draw uniform [-fallback_scale, fallback_scale]
    from `rng` in index order. Returns (matrix, matched/d coverage).
    """
    vectors: dict[str, np.ndarray] = {}
    dim = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                raise DataFormatError(f"{path}:{lineno}: expected `token v1 ... vdim`")
            token = parts[0]
            if dim is None:
                dim = len(parts) - 1
            elif len(parts) - 1 != dim:
                raise DataFormatError(
                    f"{path}:{lineno}: dim {len(parts) - 1} differs from first line ({dim})"
                )
            try:
                vec = np.array([float(x) for x in parts[1:]], dtype=np.float64)
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: unparseable float") from None
            if token in vocab:
                vectors[token] = vec
    if dim is None:
        raise DataFormatError(f"{path}: empty word-vector file")

    d = vocab.size
    matrix = np.zeros((d + 1, dim), dtype=np.float64)
    matched = 0
    for token in vocab.tokens_by_index():
        idx = vocab[token]
        vec = vectors.get(token)
        if vec is not None:
            matrix[idx] = vec
            matched += 1
        else:
            matrix[idx] = rng.uniform(-fallback_scale, fallback_scale, dim)
    coverage = matched / d if d else 1.0
    return matrix, coverage


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]  # name -> float64 array, insertion-ordered
    step: int
    lr: float
    batch_size: int
    phase: int  # completed batch-growth cycles


def save_checkpoint(path, tensors: dict[str, np.ndarray], step: int, lr: float,
                    batch_size: int, phase: int) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            a = np.asarray(arr, dtype=np.float64)
            nameb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nameb)))
            f.write(nameb)
            f.write(struct.pack("<B", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(a.astype("<f8").tobytes())
        f.write(struct.pack("<QdIB", step, lr, batch_size, phase))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise DataFormatError(f"{path}: truncated {what} at offset {off}")
        out = blob[off : off + n]
        off += n
        return out

    off = 0
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "tensor name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"rank of {name!r}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name!r}"))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(8 * n, f"data of {name!r}"), dtype="<f8")
        if name in tensors:
            raise DataFormatError(f"{path}: duplicate tensor {name!r}")
        tensors[name] = data.reshape(shape).copy()
    step, lr, batch_size, phase = struct.unpack("<QdIB", take(21, "counters"))
    if off != len(blob):
        raise DataFormatError(f"{path}: {len(blob) - off} trailing bytes")
    return Checkpoint(tensors, step, lr, batch_size, phase)
