"""ERCE binary embedding files (writer side).

Layout, all little-endian: magic ``ERCE``, u32 version (=1), u32 dim,
u64 row count, one flag byte (0 = base store: one row per utterance;
1 = futures store, followed by u32 m: m consecutive rows per utterance),
then the row-major float32 payload.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import ExportError

ERCE_MAGIC = b"ERCE"
ERCE_VERSION = 1


def write_erce(path: str, matrix: np.ndarray, *, futures_m: int | None = None) -> None:
    """Write ``matrix`` (rows, dim) as an ERCE file, atomically.

    ``futures_m`` switches the header to a futures store holding that many
    consecutive rows per utterance; the row count must then be divisible
    by it. Non-finite values are refused so a consumer never has to.
    """
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ExportError(f"embedding matrix must be 2-D, got shape {matrix.shape}")
    rows, dim = matrix.shape
    if dim == 0:
        raise ExportError("embedding matrix has zero columns")
    if not np.all(np.isfinite(matrix)):
        raise ExportError("embedding matrix contains non-finite values")
    if futures_m is not None:
        if futures_m <= 0:
            raise ExportError(f"futures_m must be positive, got {futures_m}")
        if rows % futures_m != 0:
            raise ExportError(
                f"futures store row count {rows} is not divisible by m={futures_m}")

    header = ERCE_MAGIC + struct.pack("<IIQ", ERCE_VERSION, dim, rows)
    if futures_m is None:
        header += struct.pack("<B", 0)
    else:
        header += struct.pack("<BI", 1, futures_m)
    payload = np.ascontiguousarray(matrix, dtype="<f4").tobytes()

    out_dir = os.path.dirname(os.path.abspath(path))
    os.makedirs(out_dir, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
