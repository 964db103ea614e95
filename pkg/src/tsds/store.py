"""Embedding sets: ingestion, binary persistence, normalization, synthesis.

Binary layout (little-endian)::

    magic "TSEM" | u32 version=1 | u8 normalized | 3 pad bytes | u32 dim | u64 count
    count x (u64 id, dim x f32)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"TSEM"
VERSION = 1
_HEADER = struct.Struct("<4sIB3xIQ")
UNIT_NORM_TOL = 1e-5


class EmbeddingFormatError(ValueError):
    """Raised for malformed embedding input (JSONL or binary)."""


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """Ids plus a (count, dim) float32 matrix. Duplicate ids are allowed."""

    ids: np.ndarray
    vectors: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        ids = np.ascontiguousarray(self.ids, dtype=np.uint64)
        vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if vectors.ndim != 2:
            raise EmbeddingFormatError(f"vectors must be 2-d, got shape {vectors.shape}")
        if ids.ndim != 1 or ids.shape[0] != vectors.shape[0]:
            raise EmbeddingFormatError(
                f"{ids.shape[0]} ids for {vectors.shape[0]} rows")
        if vectors.shape[1] < 1:
            raise EmbeddingFormatError("dim must be >= 1")
        if not np.isfinite(vectors).all():
            raise EmbeddingFormatError("vectors contain NaN or Inf")
        if self.normalized and len(vectors):
            norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
            if bad.size:
                raise EmbeddingFormatError(
                    f"row {bad[0]} has norm {norms[bad[0]]:.6g} but set is flagged normalized")
        ids.flags.writeable = False
        vectors.flags.writeable = False
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "normalized", bool(self.normalized))

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return self.count

    def __eq__(self, other):
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (self.normalized == other.normalized
                and self.vectors.shape == other.vectors.shape
                and np.array_equal(self.ids, other.ids)
                and self.vectors.tobytes() == other.vectors.tobytes())

    def __repr__(self):
        return (f"EmbeddingSet(count={self.count}, dim={self.dim}, "
                f"normalized={self.normalized})")

    def subset(self, positions) -> "EmbeddingSet":
        positions = np.asarray(positions, dtype=np.int64)
        return EmbeddingSet(self.ids[positions], self.vectors[positions], self.normalized)


def ingest_jsonl(path) -> EmbeddingSet:
    """Read one ``{"id": int, "vec": [...]}`` object per line, in file order."""
    ids: list[int] = []
    rows: list[list[float]] = []
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise EmbeddingFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or "id" not in rec or "vec" not in rec:
                raise EmbeddingFormatError(f"line {lineno}: expected fields 'id' and 'vec'")
            rid, vec = rec["id"], rec["vec"]
            if isinstance(rid, bool) or not isinstance(rid, int) or not 0 <= rid < 2**64:
                raise EmbeddingFormatError(f"line {lineno}: id must be an unsigned 64-bit integer")
            if not isinstance(vec, list) or not vec:
                raise EmbeddingFormatError(f"line {lineno}: 'vec' must be a non-empty array")
            if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in vec):
                raise EmbeddingFormatError(f"line {lineno}: 'vec' must contain numbers only")
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise EmbeddingFormatError(
                    f"line {lineno}: dimension {len(vec)} does not match {dim}")
            arr = np.asarray(vec, dtype=np.float64)
            if not np.isfinite(arr).all() or not np.isfinite(arr.astype(np.float32)).all():
                raise EmbeddingFormatError(f"line {lineno}: non-finite value")
            ids.append(rid)
            rows.append(vec)
    if not rows:
        raise EmbeddingFormatError(f"{path}: empty set")
    return EmbeddingSet(np.array(ids, dtype=np.uint64), np.array(rows, dtype=np.float32))


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("vec", "<f4", (dim,))])


def to_bytes(es: EmbeddingSet) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, int(es.normalized), es.dim, es.count)
    rec = np.empty(es.count, dtype=_record_dtype(es.dim))
    rec["id"] = es.ids
    rec["vec"] = es.vectors
    return header + rec.tobytes()


def from_bytes(buf: bytes) -> EmbeddingSet:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise EmbeddingFormatError("bad magic")
    if len(buf) < _HEADER.size:
        raise EmbeddingFormatError("truncated header")
    _, version, flag, dim, count = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise EmbeddingFormatError(f"unsupported version {version} (expected {VERSION})")
    if flag not in (0, 1):
        raise EmbeddingFormatError(f"invalid normalized flag {flag}")
    if dim < 1:
        raise EmbeddingFormatError("dim must be >= 1")
    dt = _record_dtype(dim)
    payload = memoryview(buf)[_HEADER.size:]
    expected = count * dt.itemsize
    if len(payload) < expected:
        raise EmbeddingFormatError(
            f"truncated payload: {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise EmbeddingFormatError(f"{len(payload) - expected} trailing bytes after records")
    rec = np.frombuffer(payload, dtype=dt, count=count)
    return EmbeddingSet(rec["id"].copy(), rec["vec"].copy(), bool(flag))


def write_binary(es: EmbeddingSet, path) -> None:
    Path(path).write_bytes(to_bytes(es))


def read_binary(path) -> EmbeddingSet:
    return from_bytes(Path(path).read_bytes())


def normalize(es: EmbeddingSet) -> EmbeddingSet:
    """Scale every row to unit Euclidean norm. Zero rows are rejected."""
    x = es.vectors.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise EmbeddingFormatError(f"row {zero[0]} has zero norm")
    # rows already at unit norm are left alone so that normalize is idempotent
    scale = np.where(np.abs(norms - 1.0) <= 1e-7, 1.0, norms)
    return EmbeddingSet(es.ids, (x / scale[:, None]).astype(np.float32), True)


def synth_mixture(components: Sequence[tuple], seed: int) -> EmbeddingSet:
    """Sample isotropic Gaussian blobs, rows grouped by component.

    ``components`` holds ``(mean, stddev, count)`` triples; ids are 0..n-1.
    """
    if not components:
        raise ValueError("at least one component is required")
    means = [np.atleast_1d(np.asarray(c[0], dtype=np.float64)) for c in components]
    dim = means[0].shape[0]
    for k, m in enumerate(means):
        if m.ndim != 1 or m.shape[0] != dim:
            raise ValueError(f"component {k} mean has dim {m.shape[-1]}, expected {dim}")
    rng = np.random.default_rng(seed)
    blocks = []
    for mean, (_, std, count) in zip(means, components):
        if std < 0:
            raise ValueError("stddev must be >= 0")
        if count < 1:
            raise ValueError("component counts must be >= 1")
        blocks.append(mean + std * rng.standard_normal((int(count), dim)))
    vectors = np.vstack(blocks)
    return EmbeddingSet(np.arange(vectors.shape[0], dtype=np.uint64), vectors)


@dataclass(frozen=True)
class DuplicationSpec:
    fraction: float
    factor: int
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"fraction must be in [0, 1], got {self.fraction}")
        if self.factor < 1:
            raise ValueError(f"factor must be >= 1, got {self.factor}")

    def chosen_count(self, count: int) -> int:
        return int(np.floor(self.fraction * count + 0.5))


def choose_duplicates(count: int, spec: DuplicationSpec) -> np.ndarray:
    """Sorted positions of the rows that `inject_duplicates` copies."""
    n = spec.chosen_count(count)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    rng = np.random.default_rng(spec.seed)
    return np.sort(rng.choice(count, size=n, replace=False)).astype(np.int64)


def inject_duplicates(es: EmbeddingSet, spec: DuplicationSpec):
    """Append ``factor`` exact copies of a seeded random subset of rows.

    Copies of the k-th chosen row (ascending position) occupy rows
    ``count + k*factor`` through ``count + (k+1)*factor - 1`` and get fresh
    ids above the current maximum. Returns ``(new_set, duplicated_ids)``.
    """
    chosen = choose_duplicates(es.count, spec)
    if chosen.size == 0:
        return es, []
    src = np.repeat(chosen, spec.factor)
    start = int(es.ids.max()) + 1 if es.count else 0
    if start + src.size > 2**64:
        raise OverflowError("not enough id space for fresh duplicate ids")
    new_ids = np.arange(start, start + src.size, dtype=np.uint64)
    out = EmbeddingSet(np.concatenate([es.ids, new_ids]),
                       np.vstack([es.vectors, es.vectors[src]]),
                       es.normalized)
    return out, [int(i) for i in es.ids[chosen]]


def duplicate_groups(original_count: int, chosen: np.ndarray, factor: int) -> list[np.ndarray]:
    """Positions (original first, then its copies) for each duplicated row."""
    return [np.concatenate([[p], original_count + k * factor + np.arange(factor)])
            for k, p in enumerate(chosen)]
