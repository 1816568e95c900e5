"""Matrix containers, zero-centering and the FDH1 / FDHM file formats.

All matrices are stored feature-per-row: a feature matrix for ``n`` samples
of dimension ``d`` has shape ``(d, n)``; labels are ``(c, n)`` and hash codes
``(q, n)``.
"""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MATRIX_MAGIC = b"FDH1"
ARCHIVE_MAGIC = b"FDHM"
ARCHIVE_VERSION = 1

_HEADER = struct.Struct("<4sII")
_U32 = struct.Struct("<I")

# Section names an FDHM archive may carry. Anything else is rejected on load.
KNOWN_SECTIONS = frozenset(
    {
        "C", "R_1", "R_2", "H", "Y", "YBAR", "TRACE",
        "ANCHORS_1", "ANCHORS_2", "CENTER_1", "CENTER_2",
        "P_1", "P_2", "GRAM_1", "GRAM_2", "CROSS_1", "CROSS_2",
    }
)
REQUIRED_SECTIONS = ("C", "R_1", "R_2", "H")


class MatrixFormatError(ValueError):
    """Raised when a matrix file cannot be parsed.

    ``offset`` is a byte offset for binary files and a 1-based line number
    for CSV files.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at {offset})"
        super().__init__(message)
        self.offset = offset


class ArchiveError(ValueError):
    pass


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FeatureMatrix:
    """Real features of one modality, shape ``(d, n)``."""

    values: np.ndarray
    modality_id: int = 1
    centered: bool = False
    center_vector: np.ndarray | None = None

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 2:
            raise ValueError(f"feature matrix must be 2-D, got shape {values.shape}")
        d, n = values.shape
        if d < 1 or n < 1:
            raise ValueError(f"feature matrix needs d >= 1 and n >= 1, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("feature matrix contains non-finite entries")
        if self.modality_id not in (1, 2):
            raise ValueError(f"modality_id must be 1 or 2, got {self.modality_id}")
        center = np.zeros(d) if self.center_vector is None else self.center_vector
        center = _frozen(center).reshape(-1)
        if center.shape != (d,):
            raise ValueError(f"center_vector has length {center.size}, expected {d}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "center_vector", center)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class LabelMatrix:
    """Zero-one class indicators, shape ``(c, n)``; multi-label allowed."""

    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 2 or values.shape[0] < 1:
            raise ValueError(f"label matrix must be 2-D with c >= 1, got shape {values.shape}")
        if not np.all((values == 0) | (values == 1)):
            raise ValueError("label matrix entries must be 0 or 1")
        empty = np.flatnonzero(values.sum(axis=0) == 0)
        if empty.size:
            raise ValueError(f"label column {int(empty[0])} has no class assigned")
        object.__setattr__(self, "values", values)

    @property
    def num_classes(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class HashCodeMatrix:
    """Binary codes in {-1, +1}, shape ``(q, n)``."""

    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 2 or values.shape[0] < 1:
            raise ValueError(f"code matrix must be 2-D with q >= 1, got shape {values.shape}")
        if not np.all(np.abs(values) == 1):
            raise ValueError("hash code entries must be -1 or +1")
        object.__setattr__(self, "values", values)

    @property
    def num_bits(self):
        return self.values.shape[0]


@dataclass
class ModelArchive:
    sections: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)


def zero_center(x: FeatureMatrix) -> FeatureMatrix:
    """Subtract per-feature means; the means are kept for query-time reuse."""
    mean = x.values.mean(axis=1)
    values = x.values - mean[:, None]
    # Composes with any previously stored center so queries see a single shift.
    return FeatureMatrix(values, x.modality_id, True, x.center_vector + mean)


def apply_center(x: np.ndarray, center_vector: np.ndarray) -> np.ndarray:
    """Shift raw query features by a stored training center."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != center_vector.shape[0]:
        raise ValueError(
            f"query has shape {x.shape}, expected {center_vector.shape[0]} rows"
        )
    return x - center_vector[:, None]


# --- FDH1 --------------------------------------------------------------------

def _encode_matrix(a) -> bytes:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"only 2-D matrices can be stored, got shape {a.shape}")
    rows, cols = a.shape
    if rows == 0:
        raise ValueError("empty matrix")
    return _HEADER.pack(MATRIX_MAGIC, rows, cols) + np.ascontiguousarray(a, dtype="<f8").tobytes()


def _decode_matrix(buf, offset=0):
    """Decode one FDH1 matrix starting at ``offset``; return (matrix, end offset)."""
    if len(buf) - offset < _HEADER.size:
        raise MatrixFormatError("truncated matrix header", offset)
    magic, rows, cols = _HEADER.unpack_from(buf, offset)
    if magic != MATRIX_MAGIC:
        raise MatrixFormatError("bad magic, not an FDH1 matrix", offset)
    if rows == 0:
        raise MatrixFormatError("empty matrix", offset + 4)
    start = offset + _HEADER.size
    end = start + 8 * rows * cols
    if len(buf) < end:
        raise MatrixFormatError(
            f"truncated matrix data: need {end - start} bytes, have {len(buf) - start}", len(buf)
        )
    a = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=start).reshape(rows, cols)
    bad = np.flatnonzero(~np.isfinite(a.ravel()))
    if bad.size:
        raise MatrixFormatError("non-finite entry", start + 8 * int(bad[0]))
    return a.astype(np.float64), end


def _parse_csv(text):
    rows = []
    width = None
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        try:
            values = [float(cell) for cell in row]
        except ValueError:
            raise MatrixFormatError("unparseable number", f"line {lineno}") from None
        if not all(np.isfinite(values)):
            raise MatrixFormatError("non-finite entry", f"line {lineno}")
        if width is None:
            width = len(values)
        elif len(values) != width:
            raise MatrixFormatError(
                f"ragged row: {len(values)} fields, expected {width}", f"line {lineno}"
            )
        rows.append(values)
    if not rows:
        raise MatrixFormatError("empty matrix")
    return np.array(rows, dtype=np.float64)


def _infer_format(path):
    return "csv" if Path(path).suffix.lower() == ".csv" else "binary"


def load_matrix(path, format=None) -> np.ndarray:
    """Read a dense matrix from an FDH1 binary file or a headerless CSV file."""
    fmt = format or _infer_format(path)
    if fmt == "csv":
        return _parse_csv(Path(path).read_text(encoding="utf-8"))
    if fmt != "binary":
        raise ValueError(f"unknown matrix format {fmt!r}")
    buf = Path(path).read_bytes()
    a, end = _decode_matrix(buf)
    if end != len(buf):
        raise MatrixFormatError(f"{len(buf) - end} trailing bytes after matrix", end)
    return a


def save_matrix(a, path, format=None):
    fmt = format or _infer_format(path)
    if fmt == "csv":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] == 0:
            raise ValueError("empty matrix")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in a:
                writer.writerow([repr(float(v)) for v in row])
    elif fmt == "binary":
        Path(path).write_bytes(_encode_matrix(a))
    else:
        raise ValueError(f"unknown matrix format {fmt!r}")


def load_labels(path, format=None) -> LabelMatrix:
    return LabelMatrix(load_matrix(path, format))


def load_features(path, modality_id, format=None) -> FeatureMatrix:
    return FeatureMatrix(load_matrix(path, format), modality_id)


# --- FDHM --------------------------------------------------------------------

def save_model(archive: ModelArchive, path):
    parts = [ARCHIVE_MAGIC, _U32.pack(ARCHIVE_VERSION), _U32.pack(len(archive.sections))]
    for name, matrix in archive.sections.items():
        if name not in KNOWN_SECTIONS:
            raise ArchiveError(f"unknown section name {name!r}")
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _encode_matrix(matrix)]
    lines = []
    for key, value in archive.metadata.items():
        if "=" in key or "\n" in key or "\n" in str(value):
            raise ArchiveError(f"metadata entry {key!r} cannot be stored as a key=value line")
        lines.append(f"{key}={value}\n")
    meta = "".join(lines).encode("utf-8")
    parts += [_U32.pack(len(meta)), meta]
    Path(path).write_bytes(b"".join(parts))


def _read_u32(buf, offset):
    if len(buf) - offset < 4:
        raise ArchiveError(f"truncated file at byte {offset}")
    return _U32.unpack_from(buf, offset)[0], offset + 4


def load_model(path) -> ModelArchive:
    buf = Path(path).read_bytes()
    if buf[:4] != ARCHIVE_MAGIC:
        raise ArchiveError("not a model archive")
    version, pos = _read_u32(buf, 4)
    if version != ARCHIVE_VERSION:
        raise ArchiveError(f"unsupported archive version {version}, expected {ARCHIVE_VERSION}")
    count, pos = _read_u32(buf, pos)
    sections = {}
    for _ in range(count):
        length, pos = _read_u32(buf, pos)
        if len(buf) - pos < length:
            raise ArchiveError(f"truncated file at byte {pos}")
        name = buf[pos:pos + length].decode("utf-8")
        pos += length
        if name not in KNOWN_SECTIONS:
            raise ArchiveError(f"unknown section name {name!r}")
        try:
            sections[name], pos = _decode_matrix(buf, pos)
        except MatrixFormatError as exc:
            raise ArchiveError(f"section {name!r}: {exc}") from None
    length, pos = _read_u32(buf, pos)
    if len(buf) - pos < length:
        raise ArchiveError(f"truncated file at byte {pos}")
    metadata = {}
    for line in buf[pos:pos + length].decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        metadata[key] = value
    if pos + length != len(buf):
        raise ArchiveError(f"{len(buf) - pos - length} trailing bytes after metadata")
    for name in REQUIRED_SECTIONS:
        if name not in sections:
            raise ArchiveError(f"missing required section {name!r}")
    return ModelArchive(sections, metadata)
