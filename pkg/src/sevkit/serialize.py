"""Versioned binary container: JSON metadata plus named float64 tensors.

Layout: magic, format version, header length, header JSON (metadata and
an ordered tensor index with shapes), then the concatenated row-major
little-endian float64 payloads.  Writing is byte-deterministic for fixed
content (sorted JSON keys, no timestamps).
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"SVKC"
FORMAT_VERSION = 1


class ContainerError(Exception):
    """Corrupt or incompatible container file."""


def write_container(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    index = [[name, list(np.asarray(t).shape)] for name, t in tensors.items()]
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta, "tensors": index},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for _, tensor in tensors.items():
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ContainerError(f"{path}: bad magic {magic!r}")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise ContainerError(f"{path}: unsupported container version {version}")
        header = json.loads(fh.read(header_len).decode())
        tensors = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(8 * count)
            if len(payload) != 8 * count:
                raise ContainerError(f"{path}: truncated payload for tensor {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return header["meta"], tensors
