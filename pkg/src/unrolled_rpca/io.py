"""On-disk formats: URTF tensors, network checkpoints and PGM frame exports.

URTF layout (all integers little-endian)::

    bytes 0-3   magic b"URTF"
    u32         version (1)
    u32         dtype code (1 = float32)
    u32         ndim
    ndim * u64  extents
    payload     row-major float32

A checkpoint is one line of compact UTF-8 JSON (the manifest) terminated by
``\\n``, followed by the concatenated URTF blobs of every parameter.  Manifest
offsets are relative to the first byte after the newline.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"URTF"
VERSION = 1
DTYPE_F32 = 1
CHECKPOINT_FORMAT = "urtf-checkpoint"


class FormatError(ValueError):
    """Malformed or unsupported file content."""


def encode_urtf(arr: np.ndarray) -> bytes:
    a = np.array(arr, dtype="<f4", order="C")  # keeps 0-d arrays 0-d
    header = MAGIC + struct.pack("<III", VERSION, DTYPE_F32, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + a.tobytes()


def decode_urtf(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns ``(array, end_offset)``."""
    if len(buf) - offset < 16:
        raise FormatError("truncated URTF header")
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError(f"bad URTF magic {buf[offset:offset + 4]!r}")
    version, dtype, ndim = struct.unpack_from("<III", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported URTF version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported URTF dtype code {dtype}")
    pos = offset + 16
    if len(buf) < pos + 8 * ndim:
        raise FormatError("truncated URTF extents")
    shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    count = int(np.prod(shape, dtype=np.int64))
    end = pos + 4 * count
    if len(buf) < end:
        raise FormatError(f"truncated URTF payload: need {4 * count} bytes")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
    return arr, end


def save_urtf(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_urtf(arr))


def load_urtf(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read tensor file {path}: {exc.strerror}") from exc
    try:
        arr, end = decode_urtf(buf)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after tensor payload")
    return arr


def encode_checkpoint(params: Dict[str, np.ndarray], meta: dict) -> bytes:
    blobs, entries, offset = [], [], 0
    for name, arr in params.items():
        blob = encode_urtf(arr)
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = {"format": CHECKPOINT_FORMAT, "version": VERSION, "meta": meta, "params": entries}
    head = json.dumps(manifest, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return head + b"\n" + b"".join(blobs)


def decode_checkpoint(buf: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    nl = buf.find(b"\n")
    if nl < 0:
        raise FormatError("checkpoint manifest is not newline-terminated")
    try:
        manifest = json.loads(buf[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad checkpoint manifest: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != VERSION:
        raise FormatError("not a version-1 URTF checkpoint")
    base = nl + 1
    params = {}
    for entry in manifest["params"]:
        arr, _ = decode_urtf(buf, base + entry["offset"])
        if list(arr.shape) != list(entry["shape"]):
            raise FormatError(f"parameter {entry['name']}: shape {arr.shape} != manifest {entry['shape']}")
        params[entry["name"]] = arr
    return params, manifest.get("meta", {})


def save_checkpoint(path, params: Dict[str, np.ndarray], meta: dict) -> None:
    Path(path).write_bytes(encode_checkpoint(params, meta))


def load_checkpoint(path):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    try:
        return decode_checkpoint(buf)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2-D image with values in [0, 1] as 8-bit binary PGM (P5)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D frame, got shape {img.shape}")
    pix = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5 {w} {h} 255\n".encode("ascii") + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while buf[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not buf[pos : pos + 1].isspace():
            pos += 1
        fields.append(buf[start:pos].decode("ascii"))
    if fields[0] != "P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pix = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)
    return pix.astype(np.float64) / maxval
