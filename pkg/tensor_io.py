"""
VSTN tensor files.

Layout per tensor (little-endian): magic b"VSTN", u8 dtype code, u8 rank, rank x u32
extents, raw payload. Several tensors may be concatenated in one blob; checkpoints and the
synthetic dataset both use this layout, label rasters carry a JSON sidecar.
"""

import json
import logging
import os
import re
import struct

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"VSTN"
DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("u1"): 3,
    np.dtype("<i4"): 4,
    np.dtype("<i8"): 5,
}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}
_HEADER = struct.Struct("<4sBB")


class TensorFormatError(ValueError):
    """Raised for a bad magic, an unknown dtype code or a truncated payload."""


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<") if array.dtype.itemsize > 1 else array.dtype
    if dtype not in DTYPE_CODES:
        raise TensorFormatError(f"Unsupported dtype for VSTN: {array.dtype}")
    if array.ndim > 255:
        raise TensorFormatError(f"Rank {array.ndim} exceeds the u8 rank field")
    header = _HEADER.pack(MAGIC, DTYPE_CODES[dtype], array.ndim)
    extents = struct.pack(f"<{array.ndim}I", *array.shape)
    return header + extents + np.ascontiguousarray(array, dtype=dtype).tobytes()


def decode_tensor(buffer: bytes, offset: int = 0) -> tuple:
    """Decode one tensor starting at ``offset``; returns (array, offset after it)."""
    if len(buffer) - offset < _HEADER.size:
        raise TensorFormatError(f"Truncated VSTN header at offset {offset}")
    magic, code, rank = _HEADER.unpack_from(buffer, offset)
    if magic != MAGIC:
        raise TensorFormatError(f"Bad magic {magic!r} at offset {offset}")
    if code not in CODE_DTYPES:
        raise TensorFormatError(f"Unknown dtype code {code} at offset {offset}")
    offset += _HEADER.size
    if len(buffer) - offset < 4 * rank:
        raise TensorFormatError("Truncated VSTN extents")
    shape = struct.unpack_from(f"<{rank}I", buffer, offset)
    offset += 4 * rank
    dtype = CODE_DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buffer) - offset < nbytes:
        raise TensorFormatError(f"Truncated VSTN payload: need {nbytes} bytes, have {len(buffer) - offset}")
    array = np.frombuffer(buffer, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(shape)
    return array.copy(), offset + nbytes


def write_tensors(path: str, arrays) -> list:
    """Write arrays back to back; returns the byte offset of each tensor."""
    offsets = []
    position = 0
    with open(path, "wb") as handle:
        for array in arrays:
            blob = encode_tensor(array)
            offsets.append(position)
            handle.write(blob)
            position += len(blob)
    return offsets


def read_tensors(path: str) -> list:
    with open(path, "rb") as handle:
        buffer = handle.read()
    arrays = []
    offset = 0
    while offset < len(buffer):
        array, offset = decode_tensor(buffer, offset)
        arrays.append(array)
    return arrays


def read_tensor_at(buffer: bytes, offset: int) -> np.ndarray:
    return decode_tensor(buffer, offset)[0]


def write_mask_file(path: str, values: np.ndarray, spacing_mm: float, class_names) -> str:
    """Write a u8 label raster as ``<path>`` plus a ``.json`` sidecar; returns the sidecar path."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise TensorFormatError(f"Label raster must be 2-D, got shape {values.shape}")
    write_tensors(path, [values.astype(np.uint8)])
    sidecar = os.path.splitext(path)[0] + ".json"
    with open(sidecar, "w") as handle:
        json.dump({"spacing_mm": float(spacing_mm), "class_names": list(class_names)}, handle, indent=2, sort_keys=True)
    return sidecar


def read_mask_file(path: str) -> tuple:
    """Returns (values, spacing_mm, class_names); spacing is None when the sidecar is missing."""
    arrays = read_tensors(path)
    if len(arrays) != 1 or arrays[0].dtype != np.uint8 or arrays[0].ndim != 2:
        raise TensorFormatError(f"{path} is not a single u8 label raster")
    sidecar = os.path.splitext(path)[0] + ".json"
    if not os.path.exists(sidecar):
        return arrays[0], None, None
    with open(sidecar) as handle:
        meta = json.load(handle)
    return arrays[0], meta.get("spacing_mm"), meta.get("class_names")


def clean_run_name(name: str) -> str:
    """Filesystem-safe directory name for a run label."""
    cleaned = re.sub(r"[^\w\s-]", "", name).strip()
    return re.sub(r"[-\s]+", "_", cleaned).lower()


def ensure_directory(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path
