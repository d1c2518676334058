"""
Run storage: checkpoint container and metrics file.

CHECKPOINT LAYOUT (little-endian):
    magic      8 bytes   b"HIMCKPT\\0"
    version    uint32
    dir_len    uint64    length of the directory block
    directory  JSON      [{name, dtype, shape, offset, nbytes, sha256}, ...]
    dir_hash   32 bytes  SHA-256 of the directory block
    data       concatenated raw array bytes (offsets relative to data start)

Text (config snapshot, generator states) is stored as uint8 arrays.
A checkpoint is fully verified before any array is returned.
"""

import csv
import hashlib
import json
import logging
import os
import struct
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"HIMCKPT\0"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    """Base class for checkpoint problems."""
    pass


class CheckpointVersionError(CheckpointError):
    """Raised when a checkpoint was written by an incompatible format version."""
    pass


class CheckpointCorruptError(CheckpointError):
    """Raised when a checkpoint is truncated or fails a shape/hash check."""
    pass


class CheckpointIncompatibleError(CheckpointError):
    """Raised when a checkpoint does not match the run it is loaded into."""
    pass


def array_checksum(array: np.ndarray) -> str:
    """
    SHA-256 over dtype, shape and raw bytes of an array.

    Args:
        array: Any numpy array

    Returns:
        Hex digest (64 characters)
    """
    array = np.ascontiguousarray(array)
    digest = hashlib.sha256()
    digest.update(array.dtype.str.encode())
    digest.update(str(array.shape).encode())
    digest.update(array.tobytes())
    return digest.hexdigest()


def text_array(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def array_text(array: np.ndarray) -> str:
    return np.asarray(array, dtype=np.uint8).tobytes().decode("utf-8")


def _little_endian(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    if array.dtype.byteorder == ">" or (array.dtype.byteorder == "=" and not np.little_endian):
        array = array.astype(array.dtype.newbyteorder("<"))
    return array


def save_checkpoint(path: Union[str, Path], arrays: Dict[str, np.ndarray]) -> Path:
    """
    Write named arrays to a single checkpoint file (atomically via rename).

    Returns:
        Path written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    directory = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        array = _little_endian(np.asarray(arrays[name]))
        raw = array.tobytes()
        directory.append({
            "name": name,
            "dtype": array.dtype.str,
            "shape": list(array.shape),
            "offset": offset,
            "nbytes": len(raw),
            "sha256": array_checksum(array),
        })
        blobs.append(raw)
        offset += len(raw)

    dir_bytes = json.dumps(directory, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(dir_bytes)))
        fh.write(dir_bytes)
        fh.write(hashlib.sha256(dir_bytes).digest())
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)
    logger.info(f"Wrote checkpoint {path} ({len(directory)} arrays, {offset} bytes)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """
    Read and verify a checkpoint.

    Raises:
        CheckpointVersionError: Unknown magic or format version
        CheckpointCorruptError: Truncation, bad directory, size or hash mismatch
    """
    data = Path(path).read_bytes()
    if len(data) < _PREAMBLE.size:
        raise CheckpointCorruptError(f"{path}: file too short for a checkpoint header")
    magic, version, dir_len = _PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")

    start = _PREAMBLE.size
    dir_end = start + dir_len
    data_start = dir_end + 32
    if len(data) < data_start:
        raise CheckpointCorruptError(f"{path}: truncated directory")
    dir_bytes = data[start:dir_end]
    if hashlib.sha256(dir_bytes).digest() != data[dir_end:data_start]:
        raise CheckpointCorruptError(f"{path}: directory checksum mismatch")
    try:
        directory = json.loads(dir_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointCorruptError(f"{path}: unreadable directory: {e}")

    arrays = {}
    for entry in directory:
        name = entry["name"]
        begin = data_start + entry["offset"]
        end = begin + entry["nbytes"]
        if end > len(data):
            raise CheckpointCorruptError(f"{path}: array '{name}' extends past end of file")
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        if int(np.prod(shape, dtype=np.int64)) * dtype.itemsize != entry["nbytes"]:
            raise CheckpointCorruptError(f"{path}: array '{name}' size does not match its shape")
        array = np.frombuffer(data[begin:end], dtype=dtype).reshape(shape).copy()
        if array_checksum(array) != entry["sha256"]:
            raise CheckpointCorruptError(f"{path}: checksum mismatch for array '{name}'")
        arrays[name] = array
    return arrays


def checkpoint_path(out_dir: Union[str, Path], iteration: int) -> Path:
    return Path(out_dir) / f"ckpt_{iteration}.bin"


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _format_cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


class MetricsWriter:
    """
    Append-only CSV of per-iteration metrics, flushed after every row.

    Args:
        path: CSV file
        columns: Column names, "iteration" first
        resume_iteration: When resuming, rows after this iteration are dropped
            and writing continues after the kept rows
    """

    def __init__(self, path: Union[str, Path], columns: Sequence[str],
                 resume_iteration: Optional[int] = None):
        self.path = Path(path)
        self.columns = list(columns)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        kept: List[List[str]] = []
        if resume_iteration is not None and self.path.exists():
            with open(self.path, newline="") as fh:
                reader = csv.reader(fh)
                header = next(reader, None)
                if header is not None and header != self.columns:
                    raise CheckpointIncompatibleError(
                        f"{self.path}: metrics columns {header} do not match this run {self.columns}")
                kept = [row for row in reader if row and int(row[0]) <= resume_iteration]
        with open(self.path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.columns)
            writer.writerows(kept)

    def write(self, row: Dict[str, object]) -> None:
        with open(self.path, "a", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([_format_cell(row[c]) for c in self.columns])


def read_metrics(path: Union[str, Path]) -> List[Dict[str, float]]:
    """Rows of a metrics file with every cell parsed as float."""
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
