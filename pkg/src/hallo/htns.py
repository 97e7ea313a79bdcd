"""HTNS tensor files and parameter directories.

Layout (little-endian): ``b"HTNS"``, u32 rank, ``rank`` x u64 extents, then
the row-major float32 payload.  Values are widened to float64 on load.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"HTNS"


class HTNSError(ValueError):
    pass


def encode(array) -> bytes:
    arr = np.asarray(array)
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise HTNSError("not an HTNS file (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8
    shape = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = buf[off:]
    if len(payload) != 4 * count:
        raise HTNSError(f"payload holds {len(payload)} bytes, shape {shape} needs {4 * count}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(shape)


def save(path, array) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def save_params(directory, arrays: Mapping[str, np.ndarray], extra: dict | None = None) -> dict:
    """Write one HTNS file per named array plus ``manifest.json``.

    The manifest maps names to files, shapes and sha256 digests.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(arrays):
        blob = encode(arrays[name])
        fname = name.replace("/", "__") + ".htns"
        (directory / fname).write_bytes(blob)
        entries[name] = {"file": fname, "shape": list(np.shape(arrays[name])),
                         "sha256": hashlib.sha256(blob).hexdigest()}
    manifest = {"tensors": entries, **(extra or {})}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_params(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    arrays = {}
    for name, e in manifest["tensors"].items():
        blob = (directory / e["file"]).read_bytes()
        if hashlib.sha256(blob).hexdigest() != e["sha256"]:
            raise HTNSError(f"{directory / e['file']}: digest does not match manifest")
        arrays[name] = decode(blob)
    return arrays, manifest
