"""Reader/writer for the dense feature-matrix binary format.

Layout (all little-endian):
    magic "ICFM" | format version u32 | dim u32 | row count u64
    per row: id length u16 | id bytes (UTF-8) | dim x float32

Rows are written sorted by image id so that a write is byte-deterministic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ICFM"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIIQ")
_IDLEN = struct.Struct("<H")


class FeatureFileError(Exception):
    """Raised on a malformed or truncated feature file."""


@dataclass(eq=False)
class FeatureMatrix:
    """Dense real-valued feature vectors keyed by image id."""

    feature_name: str
    dim: int
    rows: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.dim <= 0:
            raise FeatureFileError(f"dim must be positive, got {self.dim}")

    def add(self, image_id: str, vector) -> None:
        vec = np.asarray(vector, dtype=np.float32)
        if vec.shape != (self.dim,):
            raise FeatureFileError(
                f"feature row for {image_id!r} has length {vec.size}, expected {self.dim}"
            )
        if not np.all(np.isfinite(vec)):
            idx = int(np.flatnonzero(~np.isfinite(vec))[0])
            raise FeatureFileError(
                f"non-finite feature value for image {image_id!r} at index {idx}"
            )
        self.rows[image_id] = vec

    def matrix(self, image_ids: list[str]) -> np.ndarray:
        """Stack rows for the given ids into an (n, dim) float64 array."""
        missing = [i for i in image_ids if i not in self.rows]
        if missing:
            raise KeyError(f"no feature row for image {missing[0]!r}")
        return np.stack([self.rows[i] for i in image_ids]).astype(np.float64)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureMatrix):
            return NotImplemented
        return (
            self.feature_name == other.feature_name
            and self.dim == other.dim
            and self.rows.keys() == other.rows.keys()
            and all(np.array_equal(v, other.rows[k]) for k, v in self.rows.items())
        )


def write_feature_file(path, matrix: FeatureMatrix) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, matrix.dim, len(matrix.rows)))
        for image_id in sorted(matrix.rows):
            ident = image_id.encode("utf-8")
            if len(ident) > 0xFFFF:
                raise FeatureFileError(f"image id too long to encode: {image_id!r}")
            fh.write(_IDLEN.pack(len(ident)))
            fh.write(ident)
            fh.write(matrix.rows[image_id].astype("<f4", copy=False).tobytes())


def read_feature_file(path, feature_name: str | None = None) -> FeatureMatrix:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FeatureFileError(f"{path}: truncated header")
    magic, version, dim, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FeatureFileError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FeatureFileError(f"{path}: unsupported format version {version}")
    if dim == 0:
        raise FeatureFileError(f"{path}: zero feature dimension")
    matrix = FeatureMatrix(feature_name or path.stem, int(dim))
    offset = _HEADER.size
    row_bytes = 4 * dim
    for _ in range(count):
        if offset + _IDLEN.size > len(data):
            raise FeatureFileError(f"{path}: truncated row header at byte {offset}")
        (id_len,) = _IDLEN.unpack_from(data, offset)
        offset += _IDLEN.size
        if offset + id_len + row_bytes > len(data):
            raise FeatureFileError(f"{path}: truncated row at byte {offset}")
        image_id = data[offset : offset + id_len].decode("utf-8")
        offset += id_len
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).copy()
        offset += row_bytes
        if image_id in matrix.rows:
            raise FeatureFileError(f"{path}: duplicate feature row for {image_id!r}")
        if not np.all(np.isfinite(vec)):
            idx = int(np.flatnonzero(~np.isfinite(vec))[0])
            raise FeatureFileError(
                f"{path}: non-finite feature value for image {image_id!r} at index {idx}"
            )
        matrix.rows[image_id] = vec
    if offset != len(data):
        raise FeatureFileError(f"{path}: {len(data) - offset} trailing bytes")
    return matrix
