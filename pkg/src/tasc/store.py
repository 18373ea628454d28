"""Embedding file IO, validation, normalization, and the target-by-text
similarity cache.

File format (EMBX v1, bit-exact): magic bytes "EMBX", little-endian u32
version = 1, u64 rows, u64 dims, then rows*dims little-endian IEEE-754
float32 values in row-major order. A sidecar manifest lives next to the
matrix under the same basename with the ".manifest.json" suffix and carries
role, names, labels, count.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EMBX"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")

ROLES = ("source_images", "target_images", "source_classnames", "noun_vocab", "adapter")

NORM_TOL = 1e-5
ZERO_ROW_TOL = 1e-12


class FormatError(Exception):
    """Bad magic, version, or truncated payload."""


class ConsistencyError(Exception):
    """Matrix and manifest disagree, or matrices are mutually incompatible."""


class DataError(Exception):
    """Non-finite or degenerate numeric content."""


@dataclass
class Manifest:
    role: str
    names: list = field(default_factory=list)
    labels: list | None = None
    count: int = 0

    def to_json(self):
        return {"role": self.role, "names": list(self.names),
                "labels": None if self.labels is None else [int(x) for x in self.labels],
                "count": int(self.count)}

    @classmethod
    def from_json(cls, obj):
        for key in ("role", "names", "count"):
            if key not in obj:
                raise ConsistencyError(f"manifest missing field {key!r}")
        if obj["role"] not in ROLES:
            raise ConsistencyError(f"unknown manifest role {obj['role']!r}")
        return cls(role=obj["role"], names=list(obj["names"]),
                   labels=obj.get("labels"), count=int(obj["count"]))


@dataclass
class EmbeddingMatrix:
    """Dense (rows, dims) float32 matrix; `normalized` means unit rows."""

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise DataError("embedding matrix must be 2-D")

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def dims(self):
        return self.data.shape[1]


def manifest_path(path) -> Path:
    return Path(path).with_suffix(".manifest.json")


def save_embeddings(path, matrix: EmbeddingMatrix, manifest: Manifest):
    """Write an EMBX file plus its sidecar manifest."""
    path = Path(path)
    if manifest.count != matrix.rows:
        raise ConsistencyError(
            f"manifest count {manifest.count} != matrix rows {matrix.rows}")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, matrix.rows, matrix.dims))
        f.write(matrix.data.astype("<f4", copy=False).tobytes(order="C"))
    with open(manifest_path(path), "w", encoding="utf-8") as f:
        json.dump(manifest.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_embeddings(path):
    """Read and validate an EMBX file; returns (EmbeddingMatrix, Manifest).

    The matrix comes back un-normalized (flag False) even if its rows happen
    to be unit length; callers normalize explicitly.
    """
    path = Path(path)
    mpath = manifest_path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))

    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, version, rows, dims = _HEADER.unpack(header)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        payload = f.read()
    expected = rows * dims * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(rows, dims)

    if not mpath.exists():
        raise ConsistencyError(f"sidecar manifest not found: {mpath}")
    with open(mpath, "r", encoding="utf-8") as f:
        manifest = Manifest.from_json(json.load(f))
    if manifest.count != rows:
        raise ConsistencyError(
            f"{path}: manifest count {manifest.count} != file rows {rows}")
    if manifest.labels is not None and len(manifest.labels) != rows:
        raise ConsistencyError(f"{path}: labels length != rows")
    if not np.isfinite(data).all():
        raise DataError(f"{path}: NaN or Inf entries")
    return EmbeddingMatrix(data=data.copy(), normalized=False), manifest


def l2_normalize(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Unit-normalize every row; rejects rows with norm below 1e-12."""
    norms = np.linalg.norm(m.data.astype(np.float64), axis=1)
    if (norms < ZERO_ROW_TOL).any():
        bad = int(np.argmin(norms))
        raise DataError(f"row {bad} has near-zero norm {norms[bad]:.3e}")
    data = (m.data.astype(np.float64) / norms[:, None]).astype(np.float32)
    return EmbeddingMatrix(data=data, normalized=True)


@dataclass
class SimilarityCache:
    """Cosine similarities of every target sample against every text column.

    Column space: the first `n_source` columns are source class names, the
    rest are vocabulary nouns. Held in float64 so downstream losses can reuse
    the entries without re-accumulating. References to the normalized target
    and text matrices ride along for prototype computations that need raw
    embeddings.
    """

    matrix: np.ndarray
    n_source: int
    targets: EmbeddingMatrix
    texts: EmbeddingMatrix

    @property
    def n_targets(self):
        return self.matrix.shape[0]

    @property
    def n_columns(self):
        return self.matrix.shape[1]

    @property
    def n_nouns(self):
        return self.n_columns - self.n_source


def build_similarity_cache(targets: EmbeddingMatrix, texts: EmbeddingMatrix,
                           n_source: int = 0) -> SimilarityCache:
    """Precompute the full target x text cosine-similarity matrix.

    Both matrices must be normalized and share dims. With frozen encoders all
    similarities are constants, so candidate evaluation downstream reduces to
    column gathers on this cache.
    """
    if not (targets.normalized and texts.normalized):
        raise ValueError("both matrices must be normalized first")
    if targets.dims != texts.dims:
        raise ConsistencyError(
            f"dims mismatch: targets {targets.dims} vs texts {texts.dims}")
    if not 0 <= n_source <= texts.rows:
        raise ValueError("n_source out of range")
    matrix = targets.data.astype(np.float64) @ texts.data.astype(np.float64).T
    return SimilarityCache(matrix=matrix, n_source=n_source,
                           targets=targets, texts=texts)


def stack_texts(classnames: EmbeddingMatrix, nouns: EmbeddingMatrix) -> EmbeddingMatrix:
    """Concatenate source class-name rows in front of noun-vocabulary rows."""
    if classnames.dims != nouns.dims:
        raise ConsistencyError("classnames and nouns dims differ")
    if not (classnames.normalized and nouns.normalized):
        raise ValueError("stack requires normalized inputs")
    return EmbeddingMatrix(np.vstack([classnames.data, nouns.data]), normalized=True)
