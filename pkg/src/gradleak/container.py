"""Shared binary container: magic, u32 version, length-prefixed JSON header,
then named float32 little-endian arrays with length-prefixed names.

The header carries an ``arrays`` manifest (name + shape, in file order) so a
reader can detect truncation and name the parameter that is missing. Writes
go through a temp file and rename, so a crashed run never leaves a partial
container behind.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct

import numpy as np

MAGIC_CHECKPOINT = b"GLCK"
MAGIC_PACKET = b"GLGP"
MAGIC_DATASET = b"GLDS"
MAGIC_GROUNDTRUTH = b"GLGT"

_U32 = struct.Struct("<I")


class ContainerError(ValueError):
    """Malformed or mismatched container file."""


def container_bytes(magic: bytes, header: dict, arrays: dict[str, np.ndarray], version: int = 1) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    full_header = dict(header)
    full_header["arrays"] = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    header_bytes = json.dumps(full_header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(_U32.pack(version))
    buf.write(_U32.pack(len(header_bytes)))
    buf.write(header_bytes)
    for name, arr in arrays.items():
        name_b = name.encode("utf-8")
        buf.write(_U32.pack(len(name_b)))
        buf.write(name_b)
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def write_container(path, magic: bytes, header: dict, arrays: dict[str, np.ndarray], version: int = 1):
    data = container_bytes(magic, header, arrays, version)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def read_container(path, magic: bytes, version: int = 1) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    view = memoryview(raw)
    if len(raw) < 12:
        raise ContainerError(f"{path}: file too short to be a container")
    if bytes(view[:4]) != magic:
        raise ContainerError(f"{path}: bad magic {bytes(view[:4])!r}, expected {magic!r}")
    got_version = _U32.unpack_from(view, 4)[0]
    if got_version != version:
        raise ContainerError(f"{path}: version {got_version}, expected {version}")
    header_len = _U32.unpack_from(view, 8)[0]
    pos = 12
    if pos + header_len > len(raw):
        raise ContainerError(f"{path}: truncated header")
    header = json.loads(bytes(view[pos : pos + header_len]).decode("utf-8"))
    pos += header_len

    manifest = header.get("arrays", [])
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest:
        want = entry["name"]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if pos + 4 > len(raw):
            raise ContainerError(f"{path}: missing parameter '{want}' (file truncated)")
        name_len = _U32.unpack_from(view, pos)[0]
        pos += 4
        name = bytes(view[pos : pos + name_len]).decode("utf-8")
        pos += name_len
        if name != want:
            raise ContainerError(f"{path}: expected parameter '{want}', found '{name}'")
        nbytes = count * 4
        if pos + nbytes > len(raw):
            raise ContainerError(f"{path}: corrupt length for parameter '{name}'")
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
        pos += nbytes
    return header, arrays


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
