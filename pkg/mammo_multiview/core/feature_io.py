"""
Binary feature-file codec (MFV1).

Layout, little-endian:
    header:  magic "MFV1" | u32 rows | u32 columns | u8 scheme | u8 level
    record:  columns x f32 | u8 diagnosis | u8 density | u8 laterality |
             u8 view (0 CC, 1 MLO, 2 fused) | u8 views_present | u16 n | n bytes study_id (utf-8)

``level`` is 0 for per-image tables and 1 for per-side (fused) tables.
"""

import struct
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from .errors import DataIOError, FormatVersionError, IntegrityError
from .extractor import FeatureMatrix
from .labels import BIRADS5, PATHOLOGY3, Laterality, ViewKind

MAGIC = b"MFV1"
LEVEL_IMAGE = 0
LEVEL_SIDE = 1

_HEADER = struct.Struct("<4sIIBB")
_TRAILER = struct.Struct("<BBBBBH")
_SCHEMES = (BIRADS5, PATHOLOGY3)
_LATERALITIES = (Laterality.L, Laterality.R)
_VIEWS = (ViewKind.CC, ViewKind.MLO, None)


def table_level(matrix: FeatureMatrix) -> int:
    return LEVEL_SIDE if any(v is None for v in matrix.views) else LEVEL_IMAGE


def encode_features(matrix: FeatureMatrix) -> bytes:
    n, c = matrix.values.shape
    parts = [_HEADER.pack(MAGIC, n, c, _SCHEMES.index(matrix.scheme), table_level(matrix))]
    values = np.ascontiguousarray(matrix.values, dtype="<f4")
    for k in range(n):
        sid = matrix.study_ids[k].encode("utf-8")
        if len(sid) > 0xFFFF:
            raise IntegrityError(f"study_id too long for a feature record: {matrix.study_ids[k][:40]}...")
        parts.append(values[k].tobytes())
        parts.append(_TRAILER.pack(int(matrix.y_diag[k]), int(matrix.y_dens[k]),
                                   _LATERALITIES.index(matrix.lateralities[k]),
                                   _VIEWS.index(matrix.views[k]),
                                   int(matrix.views_present[k]), len(sid)))
        parts.append(sid)
    return b"".join(parts)


def decode_features(data: bytes, source: Optional[str] = None) -> FeatureMatrix:
    """
    Raises:
        FormatVersionError: wrong magic.
        DataIOError: truncated or malformed records.
    """
    where = source or "feature data"
    if len(data) < _HEADER.size:
        raise DataIOError(f"{where}: truncated header")
    magic, n, c, scheme_code, _ = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatVersionError(f"{where}: unknown feature format {magic!r}, expected {MAGIC!r}")
    if scheme_code >= len(_SCHEMES):
        raise DataIOError(f"{where}: unknown label scheme code {scheme_code}")

    offset = _HEADER.size
    values = np.empty((n, c), dtype=np.float32)
    study_ids: List[str] = []
    lateralities, views = [], []
    y_diag = np.empty(n, dtype=np.intp)
    y_dens = np.empty(n, dtype=np.intp)
    present = np.empty(n, dtype=np.uint8)
    try:
        for k in range(n):
            values[k] = np.frombuffer(data, dtype="<f4", count=c, offset=offset)
            offset += 4 * c
            diag, dens, lat, view, mask, length = _TRAILER.unpack_from(data, offset)
            offset += _TRAILER.size
            raw_id = data[offset:offset + length]
            if len(raw_id) != length:
                raise ValueError("study_id runs past the end of the file")
            offset += length
            study_ids.append(raw_id.decode("utf-8"))
            lateralities.append(_LATERALITIES[lat])
            views.append(_VIEWS[view])
            y_diag[k], y_dens[k], present[k] = diag, dens, mask
    except (ValueError, IndexError, struct.error, UnicodeDecodeError) as exc:
        raise DataIOError(f"{where}: malformed record {len(study_ids)}: {exc}") from exc
    if offset != len(data):
        raise DataIOError(f"{where}: {len(data) - offset} trailing bytes after {n} records")
    return FeatureMatrix(values=values, study_ids=study_ids, lateralities=lateralities, views=views,
                         y_diag=y_diag, y_dens=y_dens, views_present=present,
                         scheme=_SCHEMES[scheme_code])


def write_features(matrix: FeatureMatrix, path: Union[str, Path]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_features(matrix))
    except OSError as exc:
        raise DataIOError(f"Cannot write features {path}: {exc}") from exc


def read_features(path: Union[str, Path]) -> FeatureMatrix:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataIOError(f"Cannot read features {path}: {exc}") from exc
    return decode_features(data, str(path))
